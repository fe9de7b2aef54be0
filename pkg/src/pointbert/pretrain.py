"""Masked point modeling with point patch mixing and a momentum-contrast term.

The backbone sees corrupted sequences of real and mixed ("virtual") clouds
and predicts the frozen tokenizer's tokens at masked positions. A momentum
copy of the encoder embeds the untouched originals; those keys act as
positives for the query features and are queued as negatives afterwards.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import PointTransformer, assemble_sequence, global_feature
from .errors import NormError, RatioError, ShapeError, SizeError
from .geometry import group_batch, pairwise_sqdist
from .neuralops import MLP, TransformerConfig
from .numcore import AdamW, Linear, LrSchedule, Module, Tensor, concat, lr_at, no_grad, reshape
from .numcore.functional import cross_entropy_logits, l2_normalize, log_softmax
from .numcore.tensor import as_tensor, getitem

NORM_TOL = 1e-4


# -- masks --------------------------------------------------------------------


@dataclass
class MaskSpec:
    indices: np.ndarray  # sorted masked patch indices
    strategy: str
    ratio: float
    num_groups: int
    seed_index: int = None
    neighbor_count: int = None

    def as_bool(self):
        out = np.zeros(self.num_groups, dtype=bool)
        out[self.indices] = True
        return out


def mask_count(g, ratio):
    if not 0.0 < ratio < 1.0:
        raise RatioError(f"mask ratio must lie in (0, 1), got {ratio}")
    count = math.floor(ratio * g)
    if count < 1:
        raise RatioError(f"ratio {ratio} masks no patch out of {g}")
    return count


def make_block_mask(centers, ratio, seed_index=None, rng=None):
    """Mask the seed patch and its nearest ``floor(r g) - 1`` neighbours.

    Distances are Euclidean between centers. The seed always comes first
    even if another center coincides with it; remaining ties go to the
    lower index.
    """
    centers = np.asarray(centers, dtype=np.float64)
    g = centers.shape[0]
    count = mask_count(g, ratio)
    if seed_index is None:
        seed_index = int(rng.integers(g))
    d = pairwise_sqdist(centers[seed_index : seed_index + 1], centers)[0]
    idx = np.arange(g)
    order = np.lexsort((idx, idx != seed_index, d))
    chosen = np.sort(order[:count])
    return MaskSpec(chosen, "block", float(ratio), g, int(seed_index), count - 1)


def make_rand_mask(g, ratio, rng):
    count = mask_count(g, ratio)
    chosen = np.sort(rng.choice(g, size=count, replace=False))
    return MaskSpec(chosen, "random", float(ratio), g)


def mask_batch(centers, strategy, ratio_range, rng):
    """One mask per sample with its ratio drawn uniformly from ``ratio_range``."""
    centers = np.asarray(centers, dtype=np.float64)
    lo, hi = ratio_range
    specs = []
    for c in centers:
        r = float(rng.uniform(lo, hi))
        if strategy == "block":
            specs.append(make_block_mask(c, r, rng=rng))
        elif strategy == "random":
            specs.append(make_rand_mask(c.shape[0], r, rng))
        else:
            raise ValueError(f"unknown mask strategy {strategy!r}")
    return specs


def _mask_array(mask, shape):
    if mask is None:
        return None
    if isinstance(mask, MaskSpec):
        mask = [mask]
    if isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskSpec):
        mask = np.stack([m.as_bool() for m in mask])
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def corrupt_embeddings(bundle, mask):
    """Class token plus point embeddings with masked rows swapped for the mask token."""
    bsz, g = bundle.point_embeddings.shape[:2]
    return assemble_sequence(bundle, _mask_array(mask, (bsz, g)))


# -- point patch mixing ---------------------------------------------------------


@dataclass
class MixSpec:
    partner_index: int
    mix_ratio: float  # realized fraction of patches taken from sample A
    selector: np.ndarray  # (g,) True where the patch comes from A


def point_patch_mix(centers_a, patches_a, centers_b, patches_b, r_mix, rng, partner_index=-1):
    """Index-wise mix of two patch sets; ``round(r_mix g)`` patches come from A.

    Returns ``(centers, patches, MixSpec)``.
    """
    centers_a, patches_a = np.asarray(centers_a), np.asarray(patches_a)
    centers_b, patches_b = np.asarray(centers_b), np.asarray(patches_b)
    if patches_a.shape != patches_b.shape or centers_a.shape != centers_b.shape:
        raise ShapeError(f"cannot mix patch sets shaped {patches_a.shape} and {patches_b.shape}")
    if not 0.0 <= r_mix <= 1.0:
        raise RatioError("mix ratio must lie in [0, 1]")
    g = patches_a.shape[0]
    take = int(round(r_mix * g))
    selector = np.zeros(g, dtype=bool)
    selector[rng.permutation(g)[:take]] = True
    centers = np.where(selector[:, None], centers_a, centers_b)
    patches = np.where(selector[:, None, None], patches_a, patches_b)
    return centers, patches, MixSpec(int(partner_index), take / g, selector)


def mix_batch(centers, patches, tokens, rng):
    """One virtual sample per real sample, mixed with a different partner.

    The number of A-patches is uniform on 1..g-1 so both sources always
    contribute. Virtual token targets follow the patch they came from.
    """
    bsz, g = tokens.shape
    if bsz < 2:
        raise SizeError("patch mixing needs at least two samples")
    shift = int(rng.integers(1, bsz))
    partners = (np.arange(bsz) + shift) % bsz
    out_c, out_p, out_t, specs = [], [], [], []
    for i, j in enumerate(partners):
        r = int(rng.integers(1, g)) / g
        c, p, spec = point_patch_mix(centers[i], patches[i], centers[j], patches[j], r, rng, partner_index=j)
        out_c.append(c)
        out_p.append(p)
        out_t.append(np.where(spec.selector, tokens[i], tokens[j]))
        specs.append(spec)
    return np.stack(out_c), np.stack(out_p), np.stack(out_t), specs


# -- losses ---------------------------------------------------------------------


def mpm_loss(logits, targets, mask=None):
    """Mean token cross-entropy over masked positions.

    ``logits`` may already be restricted to masked rows (M, N) with
    ``targets`` (M,); or be full (B, g, N) with a (B, g) boolean ``mask``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.reshape(-1))
        logits = getitem(reshape(logits, (-1, logits.shape[-1])), rows)
        targets = targets.reshape(-1)[rows]
    if logits.shape[0] == 0:
        raise RatioError("MPM loss needs at least one masked position")
    return cross_entropy_logits(logits, targets)


def _check_unit(name, x, axis=-1):
    norms = np.sqrt((np.asarray(x) ** 2).sum(axis=axis))
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise NormError(f"{name} must be unit-normalized")


def moco_loss(q, k1, k2, bank, r_mix, temperature):
    """Mixed InfoNCE averaged over the batch.

    ``q``, ``k1``, ``k2``: (B, d) unit vectors; ``bank``: (K, d) unit
    negatives or a MemoryBank; ``r_mix``: scalar or (B,). Each term's
    softmax runs over its own positive plus every bank entry.
    """
    q, k1, k2 = as_tensor(q), as_tensor(k1), as_tensor(k2)
    keys = bank.queue if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    for name, x in (("q", q.data), ("k1", k1.data), ("k2", k2.data), ("bank", keys)):
        _check_unit(name, x)
    r = np.broadcast_to(np.asarray(r_mix, dtype=np.float64), (q.shape[0],))
    neg = q @ Tensor(keys.T)

    def term(k):
        pos = (q * k).sum(axis=-1, keepdims=True)
        logits = concat([pos, neg], axis=-1) * (1.0 / temperature)
        return -log_softmax(logits, axis=-1)[:, 0]

    per_sample = term(k1) * r + term(k2) * (1.0 - r)
    return per_sample.mean()


# -- memory bank and momentum encoder -------------------------------------------


class MemoryBank:
    """Fixed-size FIFO of unit keys; starts full of random unit vectors."""

    def __init__(self, size, dim, rng):
        v = rng.normal(size=(size, dim))
        self.queue = v / np.linalg.norm(v, axis=1, keepdims=True)
        self.cursor = 0

    @property
    def size(self):
        return self.queue.shape[0]

    def enqueue(self, keys):
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        b = keys.shape[0]
        if b > self.size:
            raise SizeError(f"cannot enqueue {b} keys into a bank of {self.size}")
        keys = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        slots = (self.cursor + np.arange(b)) % self.size
        self.queue[slots] = keys
        self.cursor = int((self.cursor + b) % self.size)


def bank_enqueue(bank, keys):
    bank.enqueue(keys)


class MomentumEncoder:
    """Gradient-free shadow of an encoder module, updated by EMA."""

    def __init__(self, online, momentum=0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.module = copy.deepcopy(online)
        self.momentum = momentum
        # Forward passes run under no_grad, so the shadow never joins a graph.
        for p in self.module.parameters():
            p.grad = None
        self.module.eval()

    def __call__(self, *args, **kwargs):
        with no_grad():
            return self.module(*args, **kwargs)


def momentum_update(online, momentum_encoder, momentum=None):
    """``shadow <- m shadow + (1 - m) online`` for every parameter, in place."""
    m = momentum_encoder.momentum if momentum is None else momentum
    shadow = dict(momentum_encoder.module.named_parameters())
    mine = list(online.named_parameters())
    if len(mine) != len(shadow):
        raise ShapeError("online and momentum encoders hold different parameter sets")
    for name, p in mine:
        s = shadow.get(name)
        if s is None or s.shape != p.shape:
            raise ShapeError(f"parameter {name!r} does not match the momentum encoder")
        s.data *= m
        s.data += (1.0 - m) * p.data


# -- model and training ------------------------------------------------------------


class ContrastiveEncoder(Module):
    """Backbone plus projection head; the momentum encoder mirrors this module."""

    def __init__(self, cfg, rng, proj_hidden=128, proj_dim=128):
        self.backbone = PointTransformer(cfg, rng)
        self.proj = MLP((2 * cfg.model_dim, proj_hidden, proj_dim), rng)

    def project(self, h):
        return l2_normalize(self.proj(global_feature(h)), axis=-1)

    def __call__(self, patches, centers):
        return self.project(self.backbone(patches, centers))


class PretrainModel(Module):
    def __init__(self, cfg, vocab_size, rng, proj_hidden=128, proj_dim=128):
        self.encoder = ContrastiveEncoder(cfg, rng, proj_hidden, proj_dim)
        self.token_head = Linear(cfg.model_dim, vocab_size, rng)

    def token_logits(self, h):
        return self.token_head(h[:, 1:, :])


@dataclass
class PretrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 10
    mask_strategy: str = "block"
    mask_ratio: tuple = (0.25, 0.45)
    contrastive_weight: float = 1.0
    bank_size: int = 256
    temperature: float = 0.07
    momentum: float = 0.999
    proj_hidden: int = 128
    proj_dim: int = 128
    mix: bool = True
    transformer: TransformerConfig = field(default_factory=TransformerConfig)


LOG_FIELDS = ("step", "mpm_loss", "moco_loss", "masked_acc", "lr")


@dataclass
class PretrainState:
    model: PretrainModel
    momentum: MomentumEncoder
    bank: MemoryBank
    optimizer: AdamW
    step: int = 0


def init_pretrain(cfg, vocab_size, rng):
    model = PretrainModel(cfg.transformer, vocab_size, rng, cfg.proj_hidden, cfg.proj_dim)
    momentum = MomentumEncoder(model.encoder, cfg.momentum)
    bank = MemoryBank(cfg.bank_size, cfg.proj_dim, rng)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return PretrainState(model, momentum, bank, opt)


def masked_accuracy(logits, targets, mask):
    pred = np.argmax(np.asarray(logits), axis=-1)
    mask = np.asarray(mask, dtype=bool)
    return float((pred[mask] == np.asarray(targets)[mask]).mean())


def pretrain_step(state, centers, patches, targets, cfg, streams, lr):
    """One optimization step on a batch of grouped originals.

    ``targets`` are the frozen tokenizer's hard tokens for the originals.
    ``streams`` needs "mask", "mix" and "dropout" generators. Returns a dict
    with the loss components and masked accuracy (before the update).
    """
    model, bank = state.model, state.bank
    model.train()
    if cfg.mix:
        vc, vp, vt, specs = mix_batch(centers, patches, targets, streams["mix"])
        r_mix = np.array([s.mix_ratio for s in specs])
        partners = np.array([s.partner_index for s in specs])
        all_c = np.concatenate([centers, vc])
        all_p = np.concatenate([patches, vp])
        all_t = np.concatenate([targets, vt])
    else:
        all_c, all_p, all_t = centers, patches, targets
    masks = mask_batch(all_c, cfg.mask_strategy, cfg.mask_ratio, streams["mask"])
    mask = np.stack([m.as_bool() for m in masks])

    backbone = model.encoder.backbone
    seq = corrupt_embeddings(backbone.embed(all_p, all_c), mask)
    h = backbone.encode(seq, rng=streams["dropout"])
    logits = model.token_logits(h)
    l_mpm = mpm_loss(logits, all_t, mask)

    keys = state.momentum(patches, centers).data
    bsz = centers.shape[0]
    if cfg.mix:
        idx = np.arange(bsz)
        k1 = np.concatenate([keys, keys])
        k2 = np.concatenate([keys, keys[partners[idx]]])
        r = np.concatenate([np.ones(bsz), r_mix])
    else:
        k1 = k2 = keys
        r = np.ones(bsz)
    q = model.encoder.project(h)
    l_moco = moco_loss(q, k1, k2, bank, r, cfg.temperature)
    loss = l_mpm + l_moco * cfg.contrastive_weight if cfg.contrastive_weight else l_mpm

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step(lr)
    momentum_update(model.encoder, state.momentum)
    bank_enqueue(bank, keys)
    state.step += 1
    return {
        "mpm_loss": float(l_mpm.data),
        "moco_loss": float(l_moco.data),
        "masked_acc": masked_accuracy(logits.data, all_t, mask),
    }


def train_pretrain(clouds, tokenizer, cfg, streams, state=None, log_every=1):
    """Run ``cfg.steps`` MPM steps on (M, N, 3) clouds with a frozen tokenizer.

    ``streams`` maps "init", "batch", "mask", "mix" and "dropout" to numpy
    Generators. Returns ``(state, log_rows)``.
    """
    dcfg = tokenizer.cfg
    clouds = np.asarray(clouds, dtype=np.float64)
    centers, patches = group_batch(clouds, dcfg.num_groups, dcfg.group_size)
    tokens = tokenizer.hard_tokens(patches, centers)
    if state is None:
        state = init_pretrain(cfg, dcfg.vocab_size, streams["init"])
    sched = LrSchedule(cfg.lr, cfg.warmup_steps, max(cfg.steps, 1))
    log = []
    for step in range(cfg.steps):
        if cfg.batch_size >= len(clouds):
            idx = np.arange(len(clouds))
        else:
            idx = np.sort(streams["batch"].choice(len(clouds), cfg.batch_size, replace=False))
        lr = lr_at(sched, step)
        out = pretrain_step(state, centers[idx], patches[idx], tokens[idx], cfg, streams, lr)
        if step % log_every == 0 or step == cfg.steps - 1:
            log.append({"step": step, **out, "lr": lr})
    return state, log


def evaluate_mpm(model, tokenizer, clouds, cfg, rng):
    """Masked-token accuracy on held-out clouds, no mixing, eval mode."""
    dcfg = tokenizer.cfg
    centers, patches = group_batch(np.asarray(clouds, dtype=np.float64), dcfg.num_groups, dcfg.group_size)
    targets = tokenizer.hard_tokens(patches, centers)
    mask = np.stack([m.as_bool() for m in mask_batch(centers, cfg.mask_strategy, cfg.mask_ratio, rng)])
    model.eval()
    with no_grad():
        backbone = model.encoder.backbone
        h = backbone.encode(corrupt_embeddings(backbone.embed(patches, centers), mask))
        logits = model.token_logits(h).data
    model.train()
    return masked_accuracy(logits, targets, mask)
