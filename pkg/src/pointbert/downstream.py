"""Downstream heads and evaluation: classification, part segmentation, few-shot.

Every pipeline centers its input clouds before grouping, so translated
copies of a cloud see identical patches and positional inputs.
"""

from dataclasses import dataclass, field

import numpy as np

from .backbone import PointTransformer, global_feature
from .datasets import augment_scale_translate
from .errors import LabelError, ShapeError, SizeError
from .geometry import group_batch, knn_batch, sample_fps
from .neuralops import MLP, EdgeConv, TransformerConfig
from .numcore import AdamW, Linear, LrSchedule, Module, Tensor, concat, lr_at, no_grad, relu
from .numcore.functional import cross_entropy_logits, dropout, gather_rows
from .numcore.tensor import as_tensor

COINCIDENT = 1e-9


def center_clouds(clouds):
    clouds = np.asarray(clouds, dtype=np.float64)
    return clouds - clouds.mean(axis=-2, keepdims=True)


# -- classification ---------------------------------------------------------------


class ClsHead(Module):
    """``Linear(2d, hidden) -> ReLU -> Dropout -> Linear(hidden, classes)``."""

    def __init__(self, model_dim, num_classes, rng, hidden=256, drop=0.5):
        self.model_dim = model_dim
        self.fc1 = Linear(2 * model_dim, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self.drop = drop

    def __call__(self, feature, rng=None):
        feature = as_tensor(feature)
        if feature.shape[-1] != 2 * self.model_dim:
            raise ShapeError(f"head expects {2 * self.model_dim} features, got {feature.shape[-1]}")
        h = dropout(relu(self.fc1(feature)), self.drop, rng, self.training)
        return self.fc2(h)


@dataclass
class FinetuneConfig:
    num_groups: int = 16
    group_size: int = 16
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    head_hidden: int = 256
    head_dropout: float = 0.5
    augment: bool = False
    transformer: TransformerConfig = field(default_factory=TransformerConfig)


class Classifier(Module):
    def __init__(self, cfg, num_classes, rng):
        self.cfg = cfg
        self.backbone = PointTransformer(cfg.transformer, rng)
        self.head = ClsHead(cfg.transformer.model_dim, num_classes, rng, cfg.head_hidden, cfg.head_dropout)

    def features(self, centers, patches, rng=None):
        return global_feature(self.backbone(patches, centers, rng=rng))

    def __call__(self, centers, patches, rng=None):
        return self.head(self.features(centers, patches, rng), rng)


def group_for(cfg, clouds):
    return group_batch(center_clouds(clouds), cfg.num_groups, cfg.group_size)


def classify_forward(cloud, backbone, head, num_groups, group_size, rng=None):
    """Class logits for one (N, 3) cloud or a batch of clouds."""
    pts = np.asarray(cloud, dtype=np.float64)
    single = pts.ndim == 2
    centers, patches = group_batch(center_clouds(pts[None] if single else pts), num_groups, group_size)
    logits = head(global_feature(backbone(patches, centers, rng=rng)), rng)
    return logits[0] if single else logits


def predict(model, clouds, batch_size=64):
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(clouds), batch_size):
            c, p = group_for(model.cfg, clouds[s : s + batch_size])
            out.append(model(c, p).data)
    model.train()
    return np.concatenate(out) if out else np.zeros((0,))


def accuracy(logits, labels):
    return float((np.argmax(logits, axis=-1) == np.asarray(labels)).mean())


def train_classifier(model, points, labels, cfg, streams, params=None, eval_sets=None):
    """Mini-batch AdamW with warmup + cosine over ``cfg.epochs``.

    ``params`` restricts optimization (e.g. the head only); ``eval_sets``
    maps a name to ``(points, labels)`` scored after every epoch. Returns
    one log row per epoch.
    """
    points, labels = np.asarray(points, dtype=np.float64), np.asarray(labels)
    m = len(points)
    per_epoch = max(1, -(-m // cfg.batch_size))
    total = cfg.epochs * per_epoch
    sched = LrSchedule(cfg.lr, cfg.warmup_epochs * per_epoch, max(total, 1))
    opt = AdamW(params if params is not None else model.named_parameters(), lr=cfg.lr,
                weight_decay=cfg.weight_decay)
    cached = None if cfg.augment else group_for(cfg, points)
    log, step = [], 0
    for epoch in range(cfg.epochs):
        order = streams["batch"].permutation(m)
        losses = []
        for s in range(0, m, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if cached is None:
                batch = np.stack([augment_scale_translate(p, streams["augment"])[0] for p in points[idx]])
                c, p = group_for(cfg, batch)
            else:
                c, p = cached[0][idx], cached[1][idx]
            loss = cross_entropy_logits(model(c, p, streams["dropout"]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(sched, step))
            losses.append(float(loss.data))
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        for name, (pts, lab) in (eval_sets or {}).items():
            row[f"{name}_acc"] = accuracy(predict(model, pts), lab)
        log.append(row)
    return log


def finetune_classification(train, val, cfg, streams, num_classes, init_state=None):
    """Fine-tune a fresh classifier, optionally starting from a pretrained backbone.

    ``train``/``val`` are ``(points, labels)``; ``init_state`` is a backbone
    state dict. Returns ``(model, per-epoch log)``.
    """
    model = Classifier(cfg, num_classes, streams["init"])
    if init_state is not None:
        model.backbone.load_state_dict(init_state)
    log = train_classifier(model, *train, cfg, streams, eval_sets={"train": train, "val": val})
    return model, log


# -- few-shot ----------------------------------------------------------------------


@dataclass
class FewShotEpisode:
    classes: np.ndarray
    support: np.ndarray  # item indices, way * shot
    support_labels: np.ndarray  # episode-local labels 0..way-1
    query: np.ndarray  # item indices, 20 * way
    query_labels: np.ndarray


def sample_episode(labels, way, shot, rng, query_per_class=20):
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < way:
        raise SizeError(f"{way}-way episodes need {way} classes, corpus has {len(classes)}")
    need = shot + query_per_class
    counts = {c: int((labels == c).sum()) for c in classes}
    short = [int(c) for c in classes if counts[c] < need]
    if short:
        raise SizeError(f"classes {short} have fewer than {need} items")
    chosen = rng.choice(classes, size=way, replace=False)
    sup, sup_y, qry, qry_y = [], [], [], []
    for local, c in enumerate(chosen):
        items = rng.choice(np.flatnonzero(labels == c), size=need, replace=False)
        sup.append(items[:shot])
        qry.append(items[shot:])
        sup_y.append(np.full(shot, local))
        qry_y.append(np.full(query_per_class, local))
    return FewShotEpisode(chosen, np.concatenate(sup), np.concatenate(sup_y), np.concatenate(qry), np.concatenate(qry_y))


def fewshot_eval(points, labels, way, shot, cfg, rng, init_state=None, episodes=10, mode="full"):
    """Mean and standard deviation of query accuracy (percent) over episodes.

    ``mode="full"`` fine-tunes backbone and head per episode; ``"linear"``
    freezes the backbone and trains only the head. Each episode draws its
    classes, items and model init from ``rng``.
    """
    if mode not in ("full", "linear"):
        raise ValueError(f"unknown few-shot mode {mode!r}")
    points = np.asarray(points, dtype=np.float64)
    accs = []
    for _ in range(episodes):
        ep = sample_episode(labels, way, shot, rng)
        seeds = rng.integers(0, 2**63 - 1, size=4)
        streams = {k: np.random.default_rng(int(s)) for k, s in zip(("init", "batch", "dropout", "augment"), seeds)}
        model = Classifier(cfg, way, streams["init"])
        if init_state is not None:
            model.backbone.load_state_dict(init_state)
        params = model.head.named_parameters() if mode == "linear" else None
        if mode == "linear":
            model.backbone.eval()
        train_classifier(model, points[ep.support], ep.support_labels, cfg, streams, params=params)
        accs.append(100.0 * accuracy(predict(model, points[ep.query]), ep.query_labels))
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std()), accs


# -- segmentation ----------------------------------------------------------------


def idw_weights(dense, sparse, k=3):
    """Indices (B, M, k) of the nearest sparse points and their inverse-distance weights.

    A query closer than 1e-9 to a source takes that source's feature outright
    (weight 1 on it, 0 elsewhere) instead of evaluating 1/d.
    """
    dense = np.asarray(dense, dtype=np.float64)
    sparse = np.asarray(sparse, dtype=np.float64)
    if k > sparse.shape[-2]:
        raise SizeError(f"k={k} exceeds {sparse.shape[-2]} source points")
    idx = knn_batch(dense, sparse, k)
    b = np.arange(dense.shape[0])[:, None, None]
    d = np.linalg.norm(sparse[b, idx] - dense[:, :, None, :], axis=-1)
    hit = d[..., 0] < COINCIDENT
    inv = 1.0 / np.where(d < COINCIDENT, 1.0, d)
    w = inv / inv.sum(axis=-1, keepdims=True)
    w[hit] = 0.0
    w[hit, 0] = 1.0
    return idx, w


def interpolate(dense, sparse, features, k=3):
    """Inverse-distance weighted average of the ``k`` nearest sparse features."""
    idx, w = idw_weights(dense, sparse, k)
    return (gather_rows(features, idx) * w[..., None]).sum(axis=2)


class FeatureUpsample(Module):
    """``MLP(concat(IDW(features), coords))`` onto a denser point set."""

    def __init__(self, dim, rng, hidden=None, k=3):
        self.k = k
        self.mlp = MLP((dim + 3, hidden or 4 * dim, dim), rng)

    def __call__(self, dense, sparse, features):
        pooled = interpolate(dense, sparse, features, self.k)
        return self.mlp(concat([pooled, Tensor(np.asarray(dense, dtype=np.float64))], axis=-1))


def upsample_features(dense_points, sparse_points, sparse_features, mlp=None, k=3):
    """Functional form: IDW features, optionally passed with coordinates through ``mlp``."""
    pooled = interpolate(dense_points, sparse_points, sparse_features, k)
    if mlp is None:
        return pooled
    return mlp(concat([pooled, Tensor(np.asarray(dense_points, dtype=np.float64))], axis=-1))


class PropagationStage(Module):
    """Carry features from a coarse point set to a finer one.

    The base features are IDW-interpolated (plus an optional skip level).
    One EdgeConv gathers the k nearest coarse features for each fine point,
    a second mixes fine points with their fine neighbours, and the result
    is added back residually, so all-zero EdgeConv weights pass the base
    features through untouched.
    """

    def __init__(self, dim, hidden, k, rng):
        self.k = k
        self.gather = EdgeConv(dim, hidden, k, rng)
        self.refine = EdgeConv(hidden, dim, k, rng)

    def __call__(self, fine_pts, coarse_pts, coarse_feat, skip=None):
        base = interpolate(fine_pts, coarse_pts, coarse_feat, min(3, coarse_pts.shape[1]))
        if skip is not None:
            base = base + skip
        index = knn_batch(fine_pts, coarse_pts, min(self.k, coarse_pts.shape[1]))
        h = self.gather(base, ref=coarse_feat, index=index)
        return base + self.refine(h, graph=fine_pts)


@dataclass
class SegLevels:
    layers: tuple = (2, 3, 4)  # 1-based block indices, shallow to deep
    resolutions: tuple = (128, 64)  # point counts for the two shallower levels

    def validate(self, depth, num_groups, num_points):
        if len(self.layers) != 3 or len(self.resolutions) != 2:
            raise ShapeError("segmentation uses three layers and two intermediate resolutions")
        if not all(1 <= layer <= depth for layer in self.layers) or list(self.layers) != sorted(set(self.layers)):
            raise ShapeError(f"layers {self.layers} must be increasing block indices within depth {depth}")
        r0, r1 = self.resolutions
        if not num_points >= r0 > r1 > num_groups:
            raise ShapeError("resolutions must shrink strictly from the cloud size down to the group count")


@dataclass
class SegConfig:
    num_points: int = 256
    num_groups: int = 32
    group_size: int = 16
    levels: SegLevels = field(default_factory=SegLevels)
    edge_hidden: int = 64
    k: int = 4
    head_hidden: int = 64
    steps: int = 200
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_steps: int = 10
    transformer: TransformerConfig = field(default_factory=TransformerConfig)


class SegHead(Module):
    def __init__(self, cfg, num_parts, rng):
        d = cfg.transformer.model_dim
        self.up_shallow = FeatureUpsample(d, rng)
        self.up_middle = FeatureUpsample(d, rng)
        self.stages = [PropagationStage(d, cfg.edge_hidden, cfg.k, rng) for _ in range(4)]
        self.out = MLP((d, cfg.head_hidden, num_parts), rng)


class Segmenter(Module):
    def __init__(self, cfg, num_parts, rng):
        cfg.levels.validate(cfg.transformer.depth, cfg.num_groups, cfg.num_points)
        self.cfg = cfg
        self.backbone = PointTransformer(cfg.transformer, rng)
        self.head = SegHead(cfg, num_parts, rng)

    def __call__(self, clouds, rng=None):
        return segment_forward(clouds, self.backbone, self.head, self.cfg, rng)


def level_points(clouds, resolutions):
    """Nested FPS subsets: the coarser set is a prefix of the finer one."""
    out = []
    for r in resolutions:
        out.append(np.stack([c[sample_fps(c, r)] for c in clouds]))
    return out


def propagate_features(levels, level_feats, level_pts, clouds, stages):
    """Deep-to-shallow propagation ending on every input point.

    ``level_feats``: (deep at centers, middle, shallow) features;
    ``level_pts``: (centers, middle points, shallow points).
    """
    deep, middle, shallow = level_feats
    centers, mid_pts, sh_pts = level_pts
    h = stages[0](centers, centers, deep)
    h = stages[1](mid_pts, centers, h, skip=middle)
    h = stages[2](sh_pts, mid_pts, h, skip=shallow)
    return stages[3](clouds, sh_pts, h)


def segment_forward(clouds, backbone, head, cfg, rng=None):
    """Per-point part logits (B, N, parts) for (B, N, 3) clouds."""
    clouds = center_clouds(clouds)
    centers, patches = group_batch(clouds, cfg.num_groups, cfg.group_size)
    _, layers = backbone(patches, centers, rng=rng, return_layers=True)
    shallow, middle, deep = (layers[i - 1][:, 1:, :] for i in cfg.levels.layers)
    sh_pts, mid_pts = level_points(clouds, cfg.levels.resolutions)
    shallow_up = head.up_shallow(sh_pts, centers, shallow)
    middle_up = head.up_middle(mid_pts, centers, middle)
    feats = propagate_features(cfg.levels, (deep, middle_up, shallow_up), (centers, mid_pts, sh_pts), clouds, head.stages)
    return head.out(feats)


def train_segmenter(points, part_labels, num_parts, cfg, streams, model=None):
    """Per-point cross-entropy training; returns ``(model, log)``."""
    points = np.asarray(points, dtype=np.float64)
    part_labels = np.asarray(part_labels)
    if model is None:
        model = Segmenter(cfg, num_parts, streams["init"])
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = LrSchedule(cfg.lr, cfg.warmup_steps, max(cfg.steps, 1))
    log = []
    m = len(points)
    for step in range(cfg.steps):
        idx = np.arange(m) if cfg.batch_size >= m else np.sort(streams["batch"].choice(m, cfg.batch_size, replace=False))
        logits = model(points[idx], streams["dropout"])
        flat = logits.reshape((-1, num_parts))
        target = part_labels[idx].reshape(-1)
        loss = cross_entropy_logits(flat, target)
        opt.zero_grad()
        loss.backward()
        lr = lr_at(sched, step)
        opt.step(lr)
        acc = float((np.argmax(flat.data, axis=-1) == target).mean())
        log.append({"step": step, "loss": float(loss.data), "point_acc": acc, "lr": lr})
    return model, log


def segment_predict(model, points, batch_size=8):
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(points), batch_size):
            out.append(np.argmax(model(points[s : s + batch_size]).data, axis=-1))
    model.train()
    return np.concatenate(out)


def miou(predictions, labels, classes, taxonomy):
    """Part-segmentation IoU in percent: ``(mIoU_C, mIoU_I, per-category)``.

    ``taxonomy`` maps each class id to its part ids. An instance's IoU is
    the mean over its class's parts, where a part missing from both the
    prediction and the ground truth scores 1.
    """
    per_cat = {}
    instance = []
    for pred, lab, cls in zip(predictions, labels, classes):
        pred, lab = np.asarray(pred), np.asarray(lab)
        if pred.shape != lab.shape:
            raise ShapeError("prediction and label shapes differ")
        if cls not in taxonomy:
            raise LabelError(f"class {cls} is not in the taxonomy")
        parts = np.asarray(taxonomy[cls])
        if not np.isin(lab, parts).all():
            raise LabelError(f"labels outside the part set of class {cls}")
        ious = []
        for part in parts:
            inter = np.sum((pred == part) & (lab == part))
            union = np.sum((pred == part) | (lab == part))
            ious.append(1.0 if union == 0 else inter / union)
        score = float(np.mean(ious))
        instance.append(score)
        per_cat.setdefault(cls, []).append(score)
    if not instance:
        raise SizeError("no instances to score")
    cat_means = {c: 100.0 * float(np.mean(v)) for c, v in per_cat.items()}
    return float(np.mean(list(cat_means.values()))), 100.0 * float(np.mean(instance)), cat_means
