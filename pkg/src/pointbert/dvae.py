"""Discrete VAE point tokenizer: Gumbel-softmax codebook, EdgeConv encoder/decoder,
folding reconstruction and its training loop."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericsError, SimplexError
from .geometry import chamfer_l1_batch, group_batch
from .neuralops import MLP, EdgeConv, FoldingLayer, MiniPointNet, gumbel_softmax, sample_gumbel
from .numcore import AdamW, Linear, LrSchedule, Module, Tensor, concat, lr_at, no_grad, parameter, reshape
from .numcore.functional import softmax
from .numcore.tensor import as_tensor


@dataclass(frozen=True)
class DvaeConfig:
    vocab_size: int = 128
    code_dim: int = 64
    embed_dim: int = 64
    group_size: int = 16
    num_groups: int = 16
    k: int = 4
    stem_dim: int = 32
    graph_dims: tuple = (32, 64, 64, 128)
    feat_dim: int = 128
    coarse_points: int = 8
    coarse_hidden: int = 128
    fold_hidden: int = 128
    graph_space: str = "centers"  # kNN graphs over patch centers, or "features" for dynamic graphs
    decoder_offsets: bool = True  # decoder edges also carry relative center offsets
    codebook_std: float = 0.1


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (B, g) ints in [0, N)
    soft_assignments: Tensor = None  # (B, g, N) rows on the simplex, soft mode only


@dataclass(frozen=True)
class DvaeSchedules:
    kl_max: float = 0.1
    kl_zero_steps: int = 10_000
    kl_ramp_steps: int = 100_000
    tau_start: float = 1.0
    tau_end: float = 0.0625
    tau_steps: int = 100_000


def schedule_at(schedules, step):
    """KL weight and Gumbel temperature at ``step``; both cosine, clamped at their ends."""
    s = schedules
    if step <= s.kl_zero_steps:
        alpha = 0.0
    elif step >= s.kl_zero_steps + s.kl_ramp_steps:
        alpha = s.kl_max
    else:
        t = (step - s.kl_zero_steps) / s.kl_ramp_steps
        alpha = s.kl_max * 0.5 * (1.0 - math.cos(math.pi * t))
    if step >= s.tau_steps:
        tau = s.tau_end
    else:
        t = step / s.tau_steps
        tau = s.tau_end + (s.tau_start - s.tau_end) * 0.5 * (1.0 + math.cos(math.pi * t))
    return alpha, tau


class GraphStack(Module):
    """Linear stem, EdgeConv layers, concat of every layer, linear projection."""

    def __init__(self, in_dim, stem_dim, graph_dims, out_dim, k, rng, pos_dim=0):
        self.stem = Linear(in_dim, stem_dim, rng)
        dims = (stem_dim,) + tuple(graph_dims)
        self.convs = [EdgeConv(a, b, k, rng, pos_dim=pos_dim) for a, b in zip(dims[:-1], dims[1:])]
        self.proj = Linear(sum(graph_dims), out_dim, rng)

    def __call__(self, x, graph=None):
        h = self.stem(x)
        outs = []
        for conv in self.convs:
            h = conv(h, graph=graph)
            outs.append(h)
        return self.proj(concat(outs, axis=-1))


class DiscreteVAE(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.embedder = MiniPointNet(cfg.embed_dim, rng)
        self.encoder = GraphStack(cfg.embed_dim, cfg.stem_dim, cfg.graph_dims, cfg.vocab_size, cfg.k, rng)
        self.codebook = parameter(rng.normal(0.0, cfg.codebook_std, size=(cfg.vocab_size, cfg.code_dim)))
        pos_dim = 3 if cfg.decoder_offsets else 0
        self.decoder = GraphStack(cfg.code_dim, cfg.stem_dim, cfg.graph_dims, cfg.feat_dim, cfg.k, rng, pos_dim)
        self.coarse = MLP((cfg.feat_dim, cfg.coarse_hidden, 3 * cfg.coarse_points), rng)
        self.fold = FoldingLayer(cfg.feat_dim, cfg.group_size, rng, hidden=cfg.fold_hidden)

    def _graph(self, centers):
        if self.cfg.graph_space == "features" or centers is None:
            return None
        return np.asarray(centers, dtype=np.float64)

    def logits(self, patches, centers=None):
        return self.encoder(self.embedder(patches), self._graph(centers))

    def tokenize(self, patch_embeddings, temperature=1.0, mode="soft", rng=None, noise=None, centers=None):
        """Map (B, g, e) patch embeddings to tokens and (B, g, code_dim) token embeddings.

        Soft mode relaxes the categorical draw with Gumbel-softmax (noise from
        ``rng`` unless ``noise`` is given; zero noise when both are None).
        Hard mode takes the argmax and looks up codebook rows. ``centers``
        (B, g, 3) define the neighbour graph unless the config asks for
        feature-space graphs.
        """
        if temperature <= 0:
            raise DomainError("temperature must be positive")
        logits = self.encoder(patch_embeddings, self._graph(centers))
        if mode == "hard":
            tokens = np.argmax(logits.data, axis=-1)
            return TokenSequence(tokens), self.codebook[tokens], logits
        if noise is None and rng is not None:
            noise = sample_gumbel(logits.shape, rng)
        soft = gumbel_softmax(logits, temperature, noise)
        tokens = np.argmax(soft.data, axis=-1)
        return TokenSequence(tokens, soft), soft @ self.codebook, logits

    def decode(self, token_embeddings, centers=None, translate=True):
        """Coarse (B, g, n_c, 3) and fine (B, g, n, 3) patches.

        ``centers`` supply the neighbour graph and, with ``translate``, move
        each reconstructed patch back to its position.
        """
        feat = self.decoder(token_embeddings, self._graph(centers))
        bsz, g, _ = feat.shape
        coarse = reshape(self.coarse(feat), (bsz, g, self.cfg.coarse_points, 3))
        fine = self.fold(feat)
        if centers is not None and translate:
            shift = np.asarray(centers, dtype=np.float64)[:, :, None, :]
            coarse, fine = coarse + shift, fine + shift
        return coarse, fine

    def hard_tokens(self, patches, centers=None):
        with no_grad():
            seq, _, _ = self.tokenize(self.embedder(patches), mode="hard", centers=centers)
        return seq.tokens


def kl_to_uniform(q):
    """Mean over rows of ``sum_j q_j (log q_j + log N)``; ``0 log 0`` counts as 0."""
    q = as_tensor(q)
    n = q.shape[-1]
    rows = q.data.reshape(-1, n)
    if np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6) or np.any(rows < 0):
        raise SimplexError("rows must lie on the probability simplex")
    pos = q.data > 0
    logq = np.where(pos, np.log(np.where(pos, q.data, 1.0)), 0.0)
    count = rows.shape[0]
    out = (q.data * logq).sum() / count + math.log(n)

    def backward(g):
        return (np.where(pos, g * (logq + 1.0) / count, 0.0),)

    return Tensor.from_op(np.asarray(out), (q,), backward)


def dvae_loss(coarse, fine, target, q, alpha):
    """Fine Chamfer + coarse Chamfer (each averaged over patches) + ``alpha`` * KL.

    Returns the total and a dict of the detached components.
    """
    coarse, fine = as_tensor(coarse), as_tensor(fine)
    gt = np.asarray(target, dtype=np.float64)
    n = gt.shape[-2]
    gt = gt.reshape(-1, n, 3)
    cd_fine = chamfer_l1_batch(reshape(fine, (-1, fine.shape[-2], 3)), gt).mean()
    cd_coarse = chamfer_l1_batch(reshape(coarse, (-1, coarse.shape[-2], 3)), gt).mean()
    total = cd_fine + cd_coarse
    kl = kl_to_uniform(q)
    if alpha:
        total = total + kl * alpha
    parts = {"chamfer_fine": float(cd_fine.data), "chamfer_coarse": float(cd_coarse.data), "kl": float(kl.data)}
    return total, parts


@dataclass
class DvaeTrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 5e-4
    warmup_steps: int = 20
    schedules: DvaeSchedules = field(default_factory=lambda: DvaeSchedules(0.1, 50, 150, 1.0, 0.0625, 200))
    kl_source: str = "probs"  # "probs": softmax(logits), analytic; "sample": the Gumbel soft assignments


LOG_FIELDS = ("step", "lr", "alpha", "tau", "chamfer_fine", "chamfer_coarse", "kl", "tokens_used")


def train_dvae(clouds, cfg, train_cfg, streams, model=None):
    """Train a dVAE on a list/array of (N, 3) clouds.

    ``streams`` maps substream names ("init", "batch", "gumbel") to numpy
    Generators. Returns ``(model, log_rows)``; each log row holds the
    metrics of the step *before* its parameter update.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    centers, patches = group_batch(clouds, cfg.num_groups, cfg.group_size)
    if model is None:
        model = DiscreteVAE(cfg, streams["init"])
    model.train()
    opt = AdamW(model.named_parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    sched = LrSchedule(train_cfg.lr, train_cfg.warmup_steps, max(train_cfg.steps, 1))
    log = []
    last_good = model.state_dict()
    for step in range(train_cfg.steps):
        if train_cfg.batch_size >= len(clouds):
            idx = np.arange(len(clouds))
        else:
            idx = np.sort(streams["batch"].choice(len(clouds), train_cfg.batch_size, replace=False))
        alpha, tau = schedule_at(train_cfg.schedules, step)
        lr = lr_at(sched, step)
        loss, parts, tokens = dvae_step(
            model, patches[idx], centers[idx], alpha, tau, streams["gumbel"], train_cfg.kl_source
        )
        if not np.isfinite(loss.data):
            err = NumericsError(f"non-finite dVAE loss at step {step}")
            err.state = last_good
            raise err
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        last_good = model.state_dict()
        log.append({"step": step, "lr": lr, "alpha": alpha, "tau": tau, **parts,
                    "tokens_used": int(len(np.unique(tokens)))})
    return model, log


def dvae_step(model, patches, centers, alpha, tau, rng, kl_source="probs"):
    emb = model.embedder(patches)
    seq, token_emb, logits = model.tokenize(emb, tau, "soft", rng=rng, centers=centers)
    coarse, fine = model.decode(token_emb, centers, translate=False)
    q = seq.soft_assignments if kl_source == "sample" else softmax(logits, axis=-1)
    loss, parts = dvae_loss(coarse, fine, patches, q, alpha)
    return loss, parts, seq.tokens


def evaluate_dvae(model, clouds):
    """Hard-token reconstruction quality and codebook usage on whole clouds."""
    cfg = model.cfg
    centers, patches = group_batch(np.asarray(clouds, dtype=np.float64), cfg.num_groups, cfg.group_size)
    model.eval()
    with no_grad():
        seq, token_emb, logits = model.tokenize(model.embedder(patches), mode="hard", centers=centers)
        coarse, fine = model.decode(token_emb, centers, translate=False)
        _, parts = dvae_loss(coarse, fine, patches, softmax(logits, axis=-1), 0.0)
    model.train()
    parts["tokens_used"] = int(len(np.unique(seq.tokens)))
    return parts, seq.tokens
