import copy
import math

import numpy as np
import pytest

from pointbert.errors import NormError, RatioError, ShapeError, SizeError
from pointbert.neuralops import TransformerConfig
from pointbert.numcore import Tensor, cross_entropy_logits
from pointbert.numcore.gradcheck import check_gradients, leaf
from pointbert.pretrain import (
    ContrastiveEncoder,
    MemoryBank,
    MomentumEncoder,
    PretrainConfig,
    bank_enqueue,
    corrupt_embeddings,
    init_pretrain,
    make_block_mask,
    make_rand_mask,
    mask_batch,
    mix_batch,
    moco_loss,
    momentum_update,
    mpm_loss,
    point_patch_mix,
    pretrain_step,
)

SMALL = TransformerConfig(depth=2, model_dim=8, heads=2, ffn_dim=16, drop_path_rate=0.1)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# -- masks -------------------------------------------------------------------------


def test_mask_counts():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(64, 3))
    assert len(make_block_mask(centers, 0.45, rng=rng).indices) == 28
    assert len(make_block_mask(centers, 0.25, rng=rng).indices) == 16
    for r in np.linspace(0.25, 0.45, 9):
        assert len(make_rand_mask(64, r, rng).indices) == math.floor(r * 64)
        assert len(make_block_mask(centers, r, rng=rng).indices) == math.floor(r * 64)
    with pytest.raises(RatioError):
        make_rand_mask(3, 0.2, rng)


def test_block_mask_is_the_nearest_set_to_the_seed():
    rng = np.random.default_rng(1)
    for trial in range(20):
        centers = rng.normal(size=(32, 3))
        spec = make_block_mask(centers, 0.4, seed_index=trial % 32)
        d = [math.dist(centers[spec.seed_index], c) for c in centers]
        brute = sorted(range(32), key=lambda i: (d[i], i))[: len(spec.indices)]
        assert sorted(brute) == spec.indices.tolist()
        masked = spec.as_bool()
        assert max(np.array(d)[masked]) <= min(np.array(d)[~masked])


def test_rand_mask_uniform_and_without_duplicates():
    rng = np.random.default_rng(2)
    g, r = 16, 0.25
    hits = np.zeros(g)
    for _ in range(10_000):
        idx = make_rand_mask(g, r, rng).indices
        assert len(set(idx.tolist())) == len(idx)
        hits[idx] += 1
    assert np.all(np.abs(hits / 10_000 - r) <= 0.02)
    assert len(make_rand_mask(8, 0.99, rng).indices) == 7


def test_corrupt_embeddings_examples():
    from pointbert.backbone import PointTransformer

    rng = np.random.default_rng(3)
    net = PointTransformer(SMALL, rng)
    bundle = net.embed(rng.normal(size=(1, 6, 4, 3)), rng.normal(size=(1, 6, 3)))
    plain = corrupt_embeddings(bundle, np.zeros((1, 6), dtype=bool)).data
    tokens = bundle.point_embeddings.data + bundle.positional_embeddings.data
    assert np.array_equal(plain[0, 1:], tokens[0])
    mask = np.array([[True, False, False, True, False, False]])
    seq = corrupt_embeddings(bundle, mask).data
    pos = bundle.positional_embeddings.data
    assert np.allclose(seq[0, 1] - pos[0, 0], seq[0, 4] - pos[0, 3], atol=1e-15)
    assert np.array_equal(seq[0, [2, 3, 5, 6]], plain[0, [2, 3, 5, 6]])


# -- mixing --------------------------------------------------------------------------


def test_point_patch_mix_examples():
    rng = np.random.default_rng(4)
    ca, pa = rng.normal(size=(16, 3)), rng.normal(size=(16, 5, 3))
    cb, pb = rng.normal(size=(16, 3)), rng.normal(size=(16, 5, 3))
    c, p, spec = point_patch_mix(ca, pa, cb, pb, 1.0, rng)
    assert np.array_equal(c, ca) and np.array_equal(p, pa)
    c, p, spec = point_patch_mix(ca, pa, cb, pb, 0.5, rng)
    assert spec.selector.sum() == 8
    for i in range(16):
        src = (ca, pa) if spec.selector[i] else (cb, pb)
        assert np.array_equal(c[i], src[0][i]) and np.array_equal(p[i], src[1][i])
    with pytest.raises(ShapeError):
        point_patch_mix(ca, pa, cb, pb[:, :4], 0.5, rng)


def test_mix_batch_targets_follow_their_patches():
    rng = np.random.default_rng(5)
    centers, patches = rng.normal(size=(3, 8, 3)), rng.normal(size=(3, 8, 4, 3))
    tokens = rng.integers(0, 50, size=(3, 8))
    vc, vp, vt, specs = mix_batch(centers, patches, tokens, rng)
    for i, s in enumerate(specs):
        assert s.partner_index != i
        assert 0 < s.selector.sum() < 8
        assert abs(s.mix_ratio - s.selector.mean()) <= 1 / 8
        expect = np.where(s.selector, tokens[i], tokens[s.partner_index])
        assert np.array_equal(vt[i], expect)


# -- losses --------------------------------------------------------------------------


def test_mpm_loss_examples():
    assert float(mpm_loss(np.zeros((5, 128)), np.arange(5)).data) == pytest.approx(math.log(128), abs=1e-12)
    perfect = np.full((3, 4), -1e3)
    perfect[np.arange(3), [1, 2, 3]] = 1e3
    assert float(mpm_loss(perfect, [1, 2, 3]).data) < 1e-12
    with pytest.raises(RatioError):
        mpm_loss(np.zeros((1, 3, 4)), np.zeros((1, 3), dtype=int), np.zeros((1, 3), dtype=bool))


def test_mpm_loss_matches_masked_rows_and_ignores_unmasked_targets():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(2, 5, 7))
    targets = rng.integers(0, 7, size=(2, 5))
    mask = rng.random((2, 5)) < 0.5
    mask[0, 0] = True
    full = float(mpm_loss(logits, targets, mask).data)
    direct = float(cross_entropy_logits(Tensor(logits[mask]), targets[mask]).data)
    assert full == pytest.approx(direct, abs=1e-14)
    # Weighted full-sequence computation with unmasked rows weighted zero.
    lse = np.log(np.exp(logits).sum(-1))
    nll = lse - np.take_along_axis(logits, targets[..., None], -1)[..., 0]
    assert full == pytest.approx((nll * mask).sum() / mask.sum(), abs=1e-12)
    other = targets.copy()
    other[~mask] = (other[~mask] + 3) % 7
    assert float(mpm_loss(logits, other, mask).data) == full
    x = leaf(logits)
    assert check_gradients(lambda: mpm_loss(x, targets, mask), [x]) < 1e-4


def _info_nce(q, k, bank, tau):
    pos = math.exp(float(q @ k) / tau)
    return -math.log(pos / (pos + sum(math.exp(float(q @ n) / tau) for n in bank)))


def test_moco_loss_examples():
    q = np.array([[1.0, 0.0]])
    bank = np.array([[0.0, 1.0]])
    assert float(moco_loss(q, q, q, bank, 1.0, 1.0).data) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert float(moco_loss(q, q, q, bank, 1.0, 1.0).data) == pytest.approx(0.3133, abs=1e-4)
    with pytest.raises(NormError):
        moco_loss(2 * q, q, q, bank, 1.0, 1.0)


def test_moco_loss_matches_direct_sum_and_symmetry():
    rng = np.random.default_rng(7)
    q, k1, k2 = (_unit(rng.normal(size=(3, 6))) for _ in range(3))
    bank = _unit(rng.normal(size=(10, 6)))
    got = float(moco_loss(q, k1, k2, bank, 1.0, 0.2).data)
    assert got == pytest.approx(np.mean([_info_nce(q[i], k1[i], bank, 0.2) for i in range(3)]), abs=1e-10)
    r = np.array([0.3, 0.6, 0.9])
    a = float(moco_loss(q, k1, k2, bank, r, 0.2).data)
    b = float(moco_loss(q, k2, k1, bank, 1 - r, 0.2).data)
    assert a == pytest.approx(b, abs=1e-12)
    direct = np.mean([r[i] * _info_nce(q[i], k1[i], bank, 0.2) + (1 - r[i]) * _info_nce(q[i], k2[i], bank, 0.2)
                      for i in range(3)])
    assert a == pytest.approx(direct, abs=1e-10)


# -- bank and momentum ---------------------------------------------------------------


def test_memory_bank_fifo():
    rng = np.random.default_rng(8)
    bank = MemoryBank(4, 3, rng)
    first = _unit(rng.normal(size=3))
    bank_enqueue(bank, first)
    for _ in range(3):
        bank_enqueue(bank, rng.normal(size=3))
    assert np.any(np.all(bank.queue == first, axis=1))
    bank_enqueue(bank, rng.normal(size=3))
    assert not np.any(np.all(bank.queue == first, axis=1))
    assert np.allclose(np.linalg.norm(bank.queue, axis=1), 1.0, atol=1e-6)
    bank = MemoryBank(10, 3, rng)
    for j in range(1, 8):
        bank_enqueue(bank, rng.normal(size=(3, 3)))
        assert bank.cursor == (3 * j) % 10
    with pytest.raises(SizeError):
        bank_enqueue(bank, rng.normal(size=(11, 3)))


def test_momentum_update_examples():
    rng = np.random.default_rng(9)
    online = ContrastiveEncoder(SMALL, rng, 8, 4)
    shadow = MomentumEncoder(online, 0.999)
    before = [p.data.copy() for p in shadow.module.parameters()]
    for p in online.parameters():
        p.data += 1.0
    momentum_update(online, shadow, momentum=1.0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, shadow.module.parameters()))
    momentum_update(online, shadow, momentum=0.0)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(online.parameters(), shadow.module.parameters()))
    for p in shadow.module.parameters():
        p.data[...] = 0.0
    for p in online.parameters():
        p.data[...] = 1.0
    momentum_update(online, shadow)
    assert all(np.allclose(p.data, 0.001, rtol=0, atol=1e-15) for p in shadow.module.parameters())
    with pytest.raises(ShapeError):
        momentum_update(ContrastiveEncoder(SMALL, rng, 8, 5), shadow)


# -- full step -----------------------------------------------------------------------


def _step_inputs(seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, 8, 3))
    patches = rng.normal(size=(3, 8, 4, 3)) * 0.1
    targets = rng.integers(0, 10, size=(3, 8))
    return centers, patches, targets


def _streams(seed):
    return {k: np.random.default_rng([seed, i]) for i, k in enumerate(("mask", "mix", "dropout"))}


def _cfg(**kw):
    return PretrainConfig(bank_size=16, proj_hidden=8, proj_dim=4, transformer=SMALL, **kw)


def test_pretrain_step_is_reproducible_and_leaves_shadow_gradient_free():
    results = []
    for _ in range(2):
        state = init_pretrain(_cfg(), 10, np.random.default_rng(0))
        out = pretrain_step(state, *_step_inputs(1), _cfg(), _streams(2), 1e-3)
        results.append((out, [p.data.copy() for p in state.model.parameters()], state.bank.queue.copy()))
        assert all(p.grad is None or not np.any(p.grad) for p in state.momentum.module.parameters())
        assert state.bank.cursor == 3
    (o1, p1, b1), (o2, p2, b2) = results
    assert o1 == o2 and np.array_equal(b1, b2)
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_zero_contrastive_weight_gives_mpm_only_gradients():
    cfg = _cfg(contrastive_weight=0.0)
    state = init_pretrain(cfg, 10, np.random.default_rng(0))
    reference = copy.deepcopy(state.model)
    centers, patches, targets = _step_inputs(3)

    # With lr 0 the step leaves the weights alone and the gradients stay readable.
    pretrain_step(state, centers, patches, targets, cfg, _streams(4), 0.0)
    got = {n: p.grad.copy() for n, p in state.model.named_parameters() if p.grad is not None}

    s = _streams(4)
    vc, vp, vt, _ = mix_batch(centers, patches, targets, s["mix"])
    all_c, all_p, all_t = np.concatenate([centers, vc]), np.concatenate([patches, vp]), np.concatenate([targets, vt])
    mask = np.stack([m.as_bool() for m in mask_batch(all_c, cfg.mask_strategy, cfg.mask_ratio, s["mask"])])
    bb = reference.encoder.backbone
    h = bb.encode(corrupt_embeddings(bb.embed(all_p, all_c), mask), rng=s["dropout"])
    mpm_loss(reference.token_logits(h), all_t, mask).backward()
    for name, p in reference.named_parameters():
        expect = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert np.allclose(got.get(name, np.zeros_like(p.data)), expect, rtol=0, atol=1e-12), name
