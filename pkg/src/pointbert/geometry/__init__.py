"""Deterministic point-cloud kernels and file formats."""

from .cloudio import from_csv, read_cloud, read_records, to_csv, write_cloud
from .ops import (
    PatchSet,
    PointCloud,
    chamfer_l1,
    chamfer_l1_batch,
    group_batch,
    group_patches,
    knn,
    knn_batch,
    pairwise_sqdist,
    sample_fps,
)
