"""Procedural shape corpus with class and part labels.

Every family samples its surface uniformly by area in a canonical local
frame, labels parts analytically there, and only then applies pose,
jitter and unit-ball normalization.
"""

import hashlib
import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import SpecError
from .geometry import PointCloud, cloudio

FAMILIES = ("sphere", "cube", "cylinder", "torus", "cone", "plane")

# Part ids are global across families, like a ShapeNetPart-style taxonomy.
PART_TAXONOMY = {
    "sphere": (0, 1),  # upper / lower hemisphere
    "cube": (2, 3, 4),  # x-faces / y-faces / z-faces
    "cylinder": (5, 6),  # body / caps
    "torus": (7, 8),  # inner / outer half
    "cone": (9, 10),  # base disk / lateral surface
    "plane": (11, 12),  # x < 0 / x >= 0
}

SIZE_RANGES = {
    "sphere": {"radius": (0.8, 1.2)},
    "cube": {"a": (0.6, 1.4), "b": (0.6, 1.4), "c": (0.6, 1.4)},
    "cylinder": {"radius": (0.3, 0.6), "height": (1.0, 2.0)},
    "torus": {"major": (0.7, 1.0), "minor": (0.15, 0.35)},
    "cone": {"radius": (0.4, 0.8), "height": (0.8, 1.6)},
    "plane": {"a": (1.0, 2.0), "b": (0.5, 1.0)},
}


@dataclass
class ShapeSpec:
    family: str
    params: dict
    rotation: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 1.0])  # quaternion x, y, z, w
    translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    point_count: int = 1024
    noise_sigma: float = 0.0

    def validate(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.point_count < 8:
            raise SpecError("point_count must be at least 8")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")
        needed = SIZE_RANGES[self.family]
        for key in needed:
            if key not in self.params or not self.params[key] > 0:
                raise SpecError(f"{self.family} needs a positive {key!r}")
        if self.family == "torus" and self.params["minor"] >= self.params["major"]:
            raise SpecError("torus minor radius must be below the major radius")


def _choose(rng, weights, n):
    w = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(w), size=n, p=w / w.sum())


def sample_surface(spec, rng):
    """Points and part labels in the canonical frame (no pose, noise or scaling)."""
    spec.validate()
    n, p = spec.point_count, spec.params
    parts = PART_TAXONOMY[spec.family]
    if spec.family == "sphere":
        v = rng.normal(size=(n, 3))
        pts = p["radius"] * v / np.linalg.norm(v, axis=1, keepdims=True)
        labels = np.where(pts[:, 2] >= 0, parts[0], parts[1])
    elif spec.family == "cube":
        half = np.array([p["a"], p["b"], p["c"]]) / 2
        areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]]
        axis = _choose(rng, areas, n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        labels = np.asarray(parts)[axis]
    elif spec.family == "cylinder":
        r, h = p["radius"], p["height"]
        on_cap = _choose(rng, [2 * math.pi * r * h, 2 * math.pi * r * r], n) == 1
        theta = rng.uniform(0, 2 * math.pi, n)
        rad = np.where(on_cap, r * np.sqrt(rng.random(n)), r)
        z = np.where(on_cap, np.where(rng.random(n) < 0.5, -h / 2, h / 2), rng.uniform(-h / 2, h / 2, n))
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        labels = np.where(on_cap, parts[1], parts[0])
    elif spec.family == "torus":
        big, small = p["major"], p["minor"]
        phi = np.empty(0)
        # Rejection sampling: the area element is proportional to (R + r cos phi).
        while phi.size < n:
            cand = rng.uniform(0, 2 * math.pi, 2 * n)
            keep = rng.uniform(0, big + small, 2 * n) < big + small * np.cos(cand)
            phi = np.concatenate([phi, cand[keep]])
        phi = phi[:n]
        theta = rng.uniform(0, 2 * math.pi, n)
        ring = big + small * np.cos(phi)
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
        labels = np.where(ring < big, parts[0], parts[1])
    elif spec.family == "cone":
        r, h = p["radius"], p["height"]
        slant = math.hypot(r, h)
        on_side = _choose(rng, [math.pi * r * r, math.pi * r * slant], n) == 1
        theta = rng.uniform(0, 2 * math.pi, n)
        frac = np.sqrt(rng.random(n))
        rad = r * frac
        # On the lateral surface the radius shrinks linearly to the apex at z = h.
        z = np.where(on_side, h * (1.0 - frac), 0.0)
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z - h / 3], axis=1)
        labels = np.where(on_side, parts[1], parts[0])
    else:  # plane
        pts = np.zeros((n, 3))
        pts[:, 0] = rng.uniform(-p["a"] / 2, p["a"] / 2, n)
        pts[:, 1] = rng.uniform(-p["b"] / 2, p["b"] / 2, n)
        labels = np.where(pts[:, 0] < 0, parts[0], parts[1])
    return pts, labels.astype(np.int64)


def normalize_unit_ball(points):
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    return centered / radius if radius > 0 else centered


def generate_shape(spec, rng):
    """Posed, jittered, unit-ball-normalized cloud with per-point part labels."""
    pts, labels = sample_surface(spec, rng)
    pts = Rotation.from_quat(spec.rotation).apply(pts) + np.asarray(spec.translation, dtype=np.float64)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    return PointCloud(normalize_unit_ball(pts), labels)


def random_spec(family, rng, point_count, noise_sigma):
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in SIZE_RANGES[family].items()}
    quat = Rotation.random(random_state=rng).as_quat()
    return ShapeSpec(
        family=family,
        params=params,
        rotation=[float(x) for x in quat],
        translation=[float(x) for x in rng.uniform(-0.5, 0.5, 3)],
        point_count=point_count,
        noise_sigma=noise_sigma,
    )


def augment_scale_translate(points, rng, scale_range=(2.0 / 3.0, 1.5), translate_range=(-0.2, 0.2)):
    """Per-axis random scale then shift. Returns ``(points, scale, shift)``."""
    lo, hi = scale_range
    if lo <= 0 or hi < lo:
        raise ValueError("scale range must be positive and ordered")
    pts = np.asarray(points, dtype=np.float64)
    s = rng.uniform(lo, hi, size=3)
    t = rng.uniform(translate_range[0], translate_range[1], size=3)
    return pts * s + t, s, t


def invert_scale_translate(points, scale, shift):
    return (np.asarray(points) - shift) / scale


@dataclass
class CorpusConfig:
    families: tuple = FAMILIES
    instances_per_class: int = 40
    split_counts: tuple = (30, 5, 5)
    point_count: int = 256
    noise_sigma: float = 0.005


SPLITS = ("train", "val", "test")


def instance_seed(seed, class_id, index):
    return [int(seed), zlib.crc32(b"corpus"), int(class_id), int(index)]


def generate_corpus(cfg, seed):
    """In-memory corpus: ``{split: [(cloud, class_id, spec), ...]}``."""
    if sum(cfg.split_counts) != cfg.instances_per_class:
        raise SpecError("split counts must add up to instances_per_class")
    out = {s: [] for s in SPLITS}
    bounds = np.cumsum(cfg.split_counts)
    for class_id, family in enumerate(cfg.families):
        for i in range(cfg.instances_per_class):
            rng = np.random.default_rng(instance_seed(seed, class_id, i))
            spec = random_spec(family, rng, cfg.point_count, cfg.noise_sigma)
            cloud = generate_shape(spec, rng)
            split = SPLITS[int(np.searchsorted(bounds, i, side="right"))]
            out[split].append((cloud, class_id, spec))
    return out


def _manifest_hash(manifest):
    body = {k: v for k, v in manifest.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_corpus(cfg, seed, out_dir):
    """Write ``manifest.json`` plus ``<split>.bin`` record streams; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    corpus = generate_corpus(cfg, seed)
    manifest = {
        "version": "pointbert-corpus/1",
        "seed": int(seed),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "classes": list(cfg.families),
        "parts": {f: list(PART_TAXONOMY[f]) for f in cfg.families},
        "splits": {},
    }
    for split in SPLITS:
        blobs, entries, offset = [], [], 0
        for cloud, class_id, spec in corpus[split]:
            raw = cloudio.encode(cloud)
            entries.append({"class_id": class_id, "spec": asdict(spec), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        with open(os.path.join(out_dir, f"{split}.bin"), "wb") as fh:
            fh.write(b"".join(blobs))
        manifest["splits"][split] = entries
    manifest["hash"] = _manifest_hash(manifest)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_corpus(out_dir):
    """Read a corpus directory back into ``{split: [(cloud, class_id), ...]}`` and the manifest."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("hash") != _manifest_hash(manifest):
        raise SpecError("manifest hash mismatch")
    data = {}
    for split, entries in manifest["splits"].items():
        with open(os.path.join(out_dir, f"{split}.bin"), "rb") as fh:
            buf = fh.read()
        data[split] = [(cloudio.decode(buf, e["offset"])[0], e["class_id"]) for e in entries]
    return data, manifest


def stack_split(items):
    """(B, N, 3) points, (B, N) part labels and (B,) class ids from split items."""
    pts = np.stack([it[0].points for it in items])
    parts = np.stack([it[0].labels for it in items])
    classes = np.array([it[1] for it in items], dtype=np.int64)
    return pts, parts, classes
