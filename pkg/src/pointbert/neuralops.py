"""Neural building blocks: patch embedder, EdgeConv, attention, folding decoder."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, SizeError
from .geometry import knn_batch
from .numcore import LayerNorm, Linear, Module, Tensor, concat, gelu, leaky_relu, relu, reshape, transpose
from .numcore.functional import dropout, gather_rows, softmax
from .numcore.tensor import as_tensor, broadcast_to, scale

_ACTIVATIONS = {"relu": relu, "gelu": gelu, "leaky_relu": leaky_relu}


@dataclass(frozen=True)
class TransformerConfig:
    depth: int = 4
    model_dim: int = 48
    heads: int = 4
    ffn_dim: int = 192
    drop_path_rate: float = 0.1
    dropout: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ShapeError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")


class MLP(Module):
    """Linear layers with an activation between them (none after the last)."""

    def __init__(self, dims, rng, activation="relu", init="uniform"):
        self.layers = [Linear(a, b, rng, init=init) for a, b in zip(dims[:-1], dims[1:])]
        self._act = _ACTIVATIONS[activation]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x


class MiniPointNet(Module):
    """Shared per-point MLP, max over the points of a patch, then a second MLP."""

    def __init__(self, out_dim, rng, point_dims=(32, 64), head_dims=(64,)):
        self.point_mlp = MLP((3,) + tuple(point_dims), rng, init="he")
        self.head = MLP((point_dims[-1],) + tuple(head_dims) + (out_dim,), rng, init="he")

    def __call__(self, patches):
        # patches: (..., n, 3) -> (..., out_dim)
        h = relu(self.point_mlp(patches))
        return self.head(h.max(axis=-2))


class PositionalEmbedding(Module):
    def __init__(self, out_dim, rng, hidden=64):
        self.mlp = MLP((3, hidden, out_dim), rng, activation="gelu")

    def __call__(self, centers):
        return self.mlp(centers)


class EdgeConv(Module):
    """DGCNN edge convolution with max aggregation over a kNN graph.

    Edge features are ``concat(x_i, x_j - x_i)``. By default the graph is
    rebuilt from the current features (dynamic graph); callers may pass an
    explicit neighbour index, or a separate reference set to gather from.
    With ``pos_dim > 0`` the relative offsets ``graph_j - graph_i`` are
    appended to every edge feature.
    """

    def __init__(self, in_dim, out_dim, k, rng, norm=True, pos_dim=0):
        self.k = k
        self.pos_dim = pos_dim
        self.linear = Linear(2 * in_dim + pos_dim, out_dim, rng)
        self.norm = LayerNorm(out_dim) if norm else None

    def __call__(self, x, ref=None, index=None, graph=None):
        x = as_tensor(x)
        if self.pos_dim and graph is None:
            raise ShapeError("EdgeConv with pos_dim needs graph positions")
        ref = x if ref is None else as_tensor(ref)
        if index is None:
            if self.k > ref.shape[1]:
                raise SizeError(f"k={self.k} exceeds {ref.shape[1]} graph nodes")
            if graph is None:
                index = knn_batch(x.data, ref.data, self.k)
            else:
                index = knn_batch(graph, graph, self.k)
        bsz, m, c = x.shape
        k = index.shape[-1]
        neighbours = gather_rows(ref, index)
        center = broadcast_to(reshape(x, (bsz, m, 1, c)), (bsz, m, k, c))
        edges = [center, neighbours - center]
        if self.pos_dim:
            pos = np.asarray(graph, dtype=np.float64)
            edges.append(Tensor(pos[np.arange(bsz)[:, None, None], index] - pos[:, :, None, :]))
        h = self.linear(concat(edges, axis=-1))
        if self.norm is not None:
            h = self.norm(h)
        return leaky_relu(h, 0.2).max(axis=2)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ShapeError("dim must be divisible by heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x):
        bsz, t, d = x.shape
        return transpose(reshape(x, (bsz, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, h):
        bsz, t, d = h.shape
        dk = d // self.heads
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        scores = scale(q @ transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dk))
        attn = softmax(scores, axis=-1)
        ctx = transpose(attn @ v, (0, 2, 1, 3))
        return self.out(reshape(ctx, (bsz, t, d)))


def stochastic_depth(branch, rate, training, rng):
    """Drop the whole residual branch per sample with probability ``rate``.

    Survivors are rescaled by ``1 / (1 - rate)``; evaluation is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    branch = as_tensor(branch)
    if not training or rate == 0.0:
        return branch
    shape = (branch.shape[0],) + (1,) * (branch.ndim - 1)
    keep = (rng.random(shape) >= rate) / (1.0 - rate)
    return branch * keep


class TransformerBlock(Module):
    """Pre-norm block: ``x + DropPath(MHA(LN(x)))`` then ``x + DropPath(FFN(LN(x)))``."""

    def __init__(self, cfg, rng, drop_path=0.0):
        d = cfg.model_dim
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.ffn_dim, rng)
        self.fc2 = Linear(cfg.ffn_dim, d, rng)
        self.drop_path = drop_path
        self.dropout = cfg.dropout
        self._act = _ACTIVATIONS[cfg.activation]

    def ffn(self, x, rng):
        h = dropout(self._act(self.fc1(x)), self.dropout, rng, self.training)
        return dropout(self.fc2(h), self.dropout, rng, self.training)

    def __call__(self, x, rng=None):
        x = x + stochastic_depth(self.attn(self.norm1(x)), self.drop_path, self.training, rng)
        return x + stochastic_depth(self.ffn(self.norm2(x), rng), self.drop_path, self.training, rng)


def sample_gumbel(shape, rng):
    """Standard Gumbel draws ``-log(-log(u))`` with ``u`` kept inside (0, 1)."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, temperature, noise=None):
    """``softmax((logits + noise) / temperature)`` over the last axis."""
    if temperature <= 0:
        raise DomainError("Gumbel-softmax temperature must be positive")
    logits = as_tensor(logits)
    z = logits if noise is None else logits + np.asarray(noise, dtype=np.float64)
    return softmax(scale(z, 1.0 / temperature), axis=-1)


def folding_grid(n_points):
    """Row-major ``s x s`` grid over [-1, 1]^2, ``s = ceil(sqrt(n))``, cut to ``n`` rows."""
    s = max(1, math.ceil(math.sqrt(n_points)))
    axis = np.linspace(-1.0, 1.0, s) if s > 1 else np.zeros(1)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return grid[:n_points]


class FoldingLayer(Module):
    """Deform a fixed 2-D grid into 3-D points conditioned on a feature vector."""

    def __init__(self, feat_dim, n_points, rng, hidden=128):
        self.n_points = n_points
        self.mlp = MLP((feat_dim + 2, hidden, hidden, 3), rng)
        # Grid rows get their own fan-in bound so the initial fold is not flat.
        first = self.mlp.layers[0].weight
        first.data[-2:] = rng.uniform(-1.0 / math.sqrt(2), 1.0 / math.sqrt(2), size=(2, hidden))
        self._grid = folding_grid(n_points)

    def __call__(self, feature):
        feature = as_tensor(feature)
        lead = feature.shape[:-1]
        c = feature.shape[-1]
        n = self.n_points
        tiled = broadcast_to(reshape(feature, lead + (1, c)), lead + (n, c))
        grid = np.broadcast_to(self._grid, lead + (n, 2))
        return self.mlp(concat([tiled, Tensor(grid)], axis=-1))
