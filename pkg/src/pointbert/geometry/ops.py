"""Point-cloud operations built on the kernels: sampling, grouping, Chamfer."""

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError, SizeError
from ..numcore import Tensor
from ..numcore.tensor import as_tensor
from . import kernels


def _points(x, name="points"):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"{name} must be (N, 3), got {arr.shape}")
    return arr


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.points = _points(self.points)
        if self.points.shape[0] < 1:
            raise SizeError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise ShapeError("one label per point required")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class PatchSet:
    centers: np.ndarray  # (g, 3)
    patches: np.ndarray  # (g, n, 3), each translated so its center is the origin
    source_indices: np.ndarray  # (g, n)
    center_indices: np.ndarray  # (g,)

    @property
    def num_groups(self):
        return self.centers.shape[0]

    @property
    def group_size(self):
        return self.patches.shape[1]


def pairwise_sqdist(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"incompatible point arrays {a.shape} and {b.shape}")
    return kernels.sqdist(a, b)


def sample_fps(cloud, g, start_index=0):
    """Greedy farthest point sampling; ties resolve to the lowest index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else _points(cloud)
    n = pts.shape[0]
    if not 1 <= g <= n:
        raise SizeError(f"cannot sample {g} centers from {n} points")
    if not 0 <= start_index < n:
        raise SizeError(f"start index {start_index} out of range")
    return kernels.fps(pts, int(g), int(start_index))


def knn(query, reference, k):
    """Indices of the ``k`` nearest reference rows per query, nearest first."""
    q = np.ascontiguousarray(query, dtype=np.float64)
    r = np.ascontiguousarray(reference, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    if k > r.shape[0]:
        raise SizeError(f"k={k} exceeds {r.shape[0]} reference points")
    if q.shape[-1] != r.shape[-1]:
        raise ShapeError("query and reference dimensions differ")
    return kernels.knn_rows(q, r, int(k))


def knn_batch(query, reference, k):
    q = np.ascontiguousarray(query, dtype=np.float64)
    r = np.ascontiguousarray(reference, dtype=np.float64)
    if k > r.shape[1]:
        raise SizeError(f"k={k} exceeds {r.shape[1]} reference points")
    return kernels.knn_batch(q, r, int(k))


def group_patches(cloud, g, n, start_index=0):
    pts = cloud.points if isinstance(cloud, PointCloud) else _points(cloud)
    if n > pts.shape[0]:
        raise SizeError(f"patch size {n} exceeds cloud size {pts.shape[0]}")
    center_idx = sample_fps(pts, g, start_index)
    centers = pts[center_idx]
    members = knn(centers, pts, n)
    patches = pts[members] - centers[:, None, :]
    return PatchSet(centers=centers, patches=patches, source_indices=members, center_indices=center_idx)


def group_batch(clouds, g, n, start_indices=None):
    """Group each cloud of a (B, N, 3) batch; returns centers (B,g,3) and patches (B,g,n,3)."""
    sets = [
        group_patches(c, g, n, 0 if start_indices is None else int(start_indices[i]))
        for i, c in enumerate(clouds)
    ]
    return np.stack([s.centers for s in sets]), np.stack([s.patches for s in sets])


def chamfer_l1(P, G):
    """Mean nearest-neighbour Euclidean distance from P to G plus from G to P."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    G = np.ascontiguousarray(G, dtype=np.float64)
    if P.shape[0] == 0 or G.shape[0] == 0:
        raise SizeError("Chamfer distance needs non-empty point sets")
    _, d_pg = kernels.nearest_batch(P[None], G[None])
    _, d_gp = kernels.nearest_batch(G[None], P[None])
    return float(np.sqrt(d_pg[0]).mean() + np.sqrt(d_gp[0]).mean())


def _unit_diff(diff, dist):
    safe = np.where(dist > 0, dist, 1.0)[..., None]
    return np.where(dist[..., None] > 0, diff / safe, 0.0)


def chamfer_l1_batch(P, G):
    """Differentiable batched Chamfer: P (B, m, 3), G (B, n, 3) -> Tensor (B,).

    Nearest-neighbour assignments are held fixed for the backward pass; at a
    coincident pair the subgradient is taken as zero.
    """
    P, G = as_tensor(P), as_tensor(G)
    if P.ndim != 3 or G.ndim != 3 or P.shape[0] != G.shape[0]:
        raise ShapeError(f"chamfer batch shapes {P.shape} and {G.shape}")
    if P.shape[1] == 0 or G.shape[1] == 0:
        raise SizeError("Chamfer distance needs non-empty point sets")
    p, gt = np.ascontiguousarray(P.data), np.ascontiguousarray(G.data)
    bidx = np.arange(p.shape[0])[:, None]
    idx_pg, sq_pg = kernels.nearest_batch(p, gt)
    idx_gp, sq_gp = kernels.nearest_batch(gt, p)
    d_pg, d_gp = np.sqrt(sq_pg), np.sqrt(sq_gp)
    out = d_pg.mean(axis=1) + d_gp.mean(axis=1)

    def backward(g):
        g = g[:, None, None]
        u_pg = _unit_diff(p - gt[bidx, idx_pg], d_pg) / p.shape[1]
        u_gp = _unit_diff(gt - p[bidx, idx_gp], d_gp) / gt.shape[1]
        gp = gg = None
        if P.requires_grad:
            gp = g * u_pg
            acc = np.zeros_like(p)
            np.add.at(acc, (bidx, idx_gp), -g * u_gp)
            gp = gp + acc
        if G.requires_grad:
            gg = g * u_gp
            acc = np.zeros_like(gt)
            np.add.at(acc, (bidx, idx_pg), -g * u_pg)
            gg = gg + acc
        return gp, gg

    return Tensor.from_op(out, (P, G), backward)
