"""Finite-difference gradient suite over every differentiable op and composite.

Each case builds fresh random inputs from a seed and returns the worst
relative error between ``backward()`` and central differences. Non-scalar
outputs are reduced with a fixed random projection so every output entry
contributes to the checked scalar.
"""

import numpy as np

from .backbone import PointTransformer, global_feature
from .dvae import dvae_loss
from .geometry import chamfer_l1_batch
from .neuralops import (
    EdgeConv,
    FoldingLayer,
    MiniPointNet,
    MultiHeadAttention,
    TransformerBlock,
    TransformerConfig,
    gumbel_softmax,
    stochastic_depth,
)
from .numcore import (
    LayerNorm,
    Linear,
    concat,
    cross_entropy_logits,
    dropout,
    gather_rows,
    l2_normalize,
    log_softmax,
    softmax,
    stack,
)
from .numcore import tensor as T
from .numcore.gradcheck import check_gradients, leaf
from .pretrain import moco_loss, mpm_loss

TOLERANCE = 1e-4
SEEDS = (0, 1, 2, 3, 4)


def _project(out, rng):
    w = rng.normal(size=out.shape)
    return lambda t: (t * w).sum()


def _generic(module, rng, std=0.1):
    """Jitter every parameter so zero-initialised biases do not sit on ReLU kinks."""
    for p in module.parameters():
        p.data += rng.normal(0.0, std, size=p.shape)
    return module


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-300) * margin, x)


def _unary(op, positive=False, kinked=False):
    def case(rng):
        if positive:
            data = rng.uniform(0.5, 2.0, size=(3, 4))
        elif kinked:
            data = _away_from_zero(rng, (3, 4))
        else:
            data = rng.normal(size=(3, 4))
        x = leaf(data)
        proj = _project(op(x), rng)
        return check_gradients(lambda: proj(op(x)), [x])

    return case


def _binary(op, shapes=((3, 4), (3, 4)), positive_b=False):
    def case(rng):
        a = leaf(rng.normal(size=shapes[0]))
        b = leaf(rng.uniform(0.5, 2.0, size=shapes[1]) if positive_b else rng.normal(size=shapes[1]))
        proj = _project(op(a, b), rng)
        return check_gradients(lambda: proj(op(a, b)), [a, b])

    return case


def _reduction(kind, axis):
    def case(rng):
        x = leaf(rng.normal(size=(3, 4, 5)))
        fn = lambda: T.reduce(x, kind, axis=axis)  # noqa: E731
        proj = _project(fn(), rng)
        return check_gradients(lambda: proj(fn()), [x])

    return case


def _structural(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    y = leaf(rng.normal(size=(2, 3, 4)))
    idx = np.array([[0, 2, 2], [1, 0, 1]])

    def fn():
        parts = [
            T.reshape(x, (6, 4)).sum(axis=0),
            T.transpose(x, (2, 0, 1)).sum(axis=(1, 2)),
            T.swapaxes(y, 0, 2).sum(axis=(0, 1)),
            x[:, 1, :].sum(axis=0),
            concat([x, y], axis=1).sum(axis=(0, 1)),
            stack([x, y], axis=0).mean(axis=(0, 1, 2)),
            T.broadcast_to(y[:, :1, :], (2, 3, 4)).sum(axis=(0, 1)),
            T.where(x.data > 0, x, y).sum(axis=(0, 1)),
            gather_rows(x, idx).sum(axis=(0, 1)),
        ]
        return concat(parts, axis=0)

    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), [x, y])


def _matmul(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(2, 4, 5)))
    v = leaf(rng.normal(size=(5, 2)))
    fn = lambda: (a @ b) @ v  # noqa: E731
    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), [a, b, v])


def _softmaxes(rng):
    x = leaf(rng.normal(size=(3, 5)))
    fn = lambda: concat([softmax(x, axis=-1), log_softmax(x, axis=0), l2_normalize(x, axis=-1)], axis=1)  # noqa: E731
    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), [x])


def _layernorm(rng):
    x = leaf(rng.normal(size=(4, 6)))
    ln = LayerNorm(6)
    ln.gain.data[:] = rng.normal(1.0, 0.1, size=6)
    ln.bias.data[:] = rng.normal(0.0, 0.1, size=6)
    proj = _project(ln(x), rng)
    return check_gradients(lambda: proj(ln(x)), [x, ln.gain, ln.bias])


def _linear(rng):
    layer = Linear(5, 3, rng)
    x = leaf(rng.normal(size=(4, 5)))
    proj = _project(layer(x), rng)
    return check_gradients(lambda: proj(layer(x)), [x, layer.weight, layer.bias])


def _cross_entropy(rng):
    x = leaf(rng.normal(size=(6, 5)))
    t = rng.integers(0, 5, size=6)
    w = rng.uniform(0.5, 2.0, size=6)
    return max(
        check_gradients(lambda: cross_entropy_logits(x, t), [x]),
        check_gradients(lambda: cross_entropy_logits(x, t, weights=w), [x]),
    )


def _dropouts(rng):
    x = leaf(rng.normal(size=(4, 6)))
    seed = int(rng.integers(1 << 30))

    def fn():
        r = np.random.default_rng(seed)
        return dropout(x, 0.3, r, True) + stochastic_depth(x, 0.4, True, r)

    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), [x])


def _gumbel(rng):
    logits = leaf(rng.normal(size=(3, 7)))
    noise = rng.gumbel(size=(3, 7))
    fn = lambda: gumbel_softmax(logits, 0.7, noise)  # noqa: E731
    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), [logits])


def _chamfer(rng):
    p = leaf(rng.normal(size=(2, 7, 3)))
    g = leaf(rng.normal(size=(2, 9, 3)))
    w = rng.uniform(0.5, 1.5, size=2)
    return check_gradients(lambda: (chamfer_l1_batch(p, g) * w).sum(), [p, g])


def _mini_pointnet(rng):
    net = _generic(MiniPointNet(6, rng, point_dims=(8, 8), head_dims=(8,)), rng)
    x = leaf(rng.normal(size=(2, 3, 5, 3)))
    proj = _project(net(x), rng)
    return check_gradients(lambda: proj(net(x)), net.parameters() + [x], max_coords=24, rng=rng)


def _edgeconv(rng):
    dyn = _generic(EdgeConv(4, 5, 3, rng), rng)
    pos = _generic(EdgeConv(4, 5, 3, rng, pos_dim=3), rng)
    x = leaf(rng.normal(size=(2, 6, 4)))
    ref = leaf(rng.normal(size=(2, 8, 4)))
    graph = rng.normal(size=(2, 6, 3))
    index = np.stack([rng.permutation(8)[:3] for _ in range(12)]).reshape(2, 6, 3)

    def fn():
        return concat([dyn(x), pos(x, graph=graph), dyn(x, ref=ref, index=index)], axis=-1)

    proj = _project(fn(), rng)
    params = dyn.parameters() + pos.parameters() + [x, ref]
    return check_gradients(lambda: proj(fn()), params, max_coords=24, rng=rng)


def _attention(rng):
    mha = _generic(MultiHeadAttention(8, 2, rng), rng)
    h = leaf(rng.normal(size=(2, 5, 8)))
    proj = _project(mha(h), rng)
    return check_gradients(lambda: proj(mha(h)), mha.parameters() + [h], max_coords=24, rng=rng)


def _transformer_block(rng):
    cfg = TransformerConfig(depth=1, model_dim=8, heads=2, ffn_dim=16, drop_path_rate=0.3, dropout=0.1)
    block = _generic(TransformerBlock(cfg, rng, drop_path=0.3), rng)
    h = leaf(rng.normal(size=(3, 4, 8)))
    seed = int(rng.integers(1 << 30))
    fn = lambda: block(h, np.random.default_rng(seed))  # noqa: E731
    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), block.parameters() + [h], max_coords=24, rng=rng)


def _folding(rng):
    fold = _generic(FoldingLayer(6, 9, rng, hidden=8), rng)
    feat = leaf(rng.normal(size=(2, 3, 6)))
    proj = _project(fold(feat), rng)
    return check_gradients(lambda: proj(fold(feat)), fold.parameters() + [feat], max_coords=24, rng=rng)


def _backbone(rng):
    cfg = TransformerConfig(depth=2, model_dim=8, heads=2, ffn_dim=16, drop_path_rate=0.0)
    net = _generic(PointTransformer(cfg, rng, embed_dims=((8,), (8,)), pos_hidden=8), rng)
    patches = rng.normal(size=(2, 4, 5, 3))
    centers = rng.normal(size=(2, 4, 3))
    mask = rng.random((2, 4)) < 0.5
    fn = lambda: global_feature(net(patches, centers, mask=mask))  # noqa: E731
    proj = _project(fn(), rng)
    return check_gradients(lambda: proj(fn()), net.parameters(), max_coords=8, rng=rng)


def _dvae_loss(rng):
    coarse = leaf(rng.normal(size=(2, 3, 4, 3)))
    fine = leaf(rng.normal(size=(2, 3, 6, 3)))
    target = rng.normal(size=(2, 3, 6, 3))
    logits = leaf(rng.normal(size=(2, 3, 7)))
    return check_gradients(lambda: dvae_loss(coarse, fine, target, softmax(logits), 0.1)[0], [coarse, fine, logits])


def _mpm_loss(rng):
    logits = leaf(rng.normal(size=(2, 6, 9)))
    targets = rng.integers(0, 9, size=(2, 6))
    mask = rng.random((2, 6)) < 0.5
    mask[0, 0] = True
    return check_gradients(lambda: mpm_loss(logits, targets, mask), [logits])


def _moco_loss(rng):
    raw = leaf(rng.normal(size=(4, 6)))
    k1 = rng.normal(size=(4, 6))
    k2 = rng.normal(size=(4, 6))
    bank = rng.normal(size=(10, 6))
    k1, k2, bank = (v / np.linalg.norm(v, axis=1, keepdims=True) for v in (k1, k2, bank))
    r = rng.uniform(0.0, 1.0, size=4)
    return check_gradients(lambda: moco_loss(l2_normalize(raw), k1, k2, bank, r, 0.2), [raw])


CASES = {
    "add": _binary(T.add, ((3, 4), (4,))),
    "sub": _binary(T.sub, ((3, 1), (3, 4))),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "sqrt": _unary(T.sqrt, positive=True),
    "tanh": _unary(T.tanh),
    "relu": _unary(T.relu, kinked=True),
    "leaky_relu": _unary(T.leaky_relu, kinked=True),
    "gelu": _unary(T.gelu),
    "sum": _reduction("sum", (0, 2)),
    "mean": _reduction("mean", 1),
    "max": _reduction("max", -1),
    "structural": _structural,
    "matmul": _matmul,
    "softmax": _softmaxes,
    "layernorm": _layernorm,
    "linear": _linear,
    "cross_entropy": _cross_entropy,
    "dropout": _dropouts,
    "gumbel_softmax": _gumbel,
    "chamfer_l1": _chamfer,
    "mini_pointnet": _mini_pointnet,
    "edgeconv": _edgeconv,
    "attention": _attention,
    "transformer_block": _transformer_block,
    "folding_layer": _folding,
    "backbone": _backbone,
    "dvae_loss": _dvae_loss,
    "mpm_loss": _mpm_loss,
    "moco_loss": _moco_loss,
}


def run_case(name, seed):
    return CASES[name](np.random.default_rng([seed, 0x67726164]))


def run_suite(seeds=SEEDS, names=None):
    """``{name: worst relative error over seeds}`` for the selected cases."""
    return {name: max(run_case(name, s) for s in seeds) for name in (names or CASES)}
