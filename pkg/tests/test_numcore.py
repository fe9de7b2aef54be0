import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointbert.errors import CheckpointError, DomainError, LabelError, NumericsError, ShapeError
from pointbert.neuralops import MLP
from pointbert.numcore import (
    AdamW,
    LrSchedule,
    OptimState,
    Tensor,
    adamw_step,
    checkpoint,
    cross_entropy_logits,
    layernorm,
    lr_at,
    matmul,
    no_grad,
    reduce,
    softmax,
    tensor_elementwise,
)
from pointbert.numcore.gradcheck import check_gradients, leaf, numeric_grad, relative_error


def test_elementwise_examples():
    assert np.array_equal(tensor_elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert np.array_equal(tensor_elementwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.array_equal(tensor_elementwise("scale", Tensor([1.0, -2.0]), 3.0).data, [3.0, -6.0])


def test_exp_derivative_matches_central_difference():
    x = leaf([1.0])
    y = tensor_elementwise("exp", x).sum()
    y.backward()
    num = numeric_grad(lambda: tensor_elementwise("exp", x).sum(), x, h=1e-5)
    assert relative_error(x.grad, num) < 1e-6
    assert x.grad[0] == pytest.approx(math.e, rel=1e-12)


def test_elementwise_errors():
    with pytest.raises(ShapeError):
        tensor_elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(DomainError):
        tensor_elementwise("log", Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        tensor_elementwise("div", Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))


def test_matmul_examples_and_gradient():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    rng = np.random.default_rng(3)
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    assert check_gradients(lambda: matmul(A, B).sum(), [A, B]) < 1e-6


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, [0.5, 0.5])
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(4, 5)))
    v = rng.normal(size=(4, 5))
    assert check_gradients(lambda: (softmax(x, axis=-1) * v).sum(), [x]) < 1e-5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = softmax(Tensor(x), axis=-1).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert np.allclose(softmax(Tensor(x + c), axis=-1).data, p, atol=1e-9)


def test_layernorm_examples():
    gain, bias = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.array_equal(layernorm(Tensor([[2.0, 2.0, 2.0]]), gain, bias).data, np.zeros((1, 3)))
    out = layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-9)
    rng = np.random.default_rng(1)
    x, g, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    w = rng.normal(size=(3, 4))
    assert check_gradients(lambda: (layernorm(x, g, b) * w).sum(), [x, g, b]) < 1e-5


def test_reduce_examples():
    m = Tensor([[1.0, 5.0], [2.0, 2.0]])
    assert np.array_equal(reduce(m, "max", axis=1).data, [5.0, 2.0])
    assert reduce(Tensor([2.0, 4.0]), "mean").data == 3.0
    x = leaf([[3.0, 7.0, 7.0, 1.0]])
    reduce(x, "max", axis=1).sum().backward()
    # Ties go to the lowest index.
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


def test_cross_entropy_examples():
    assert cross_entropy_logits(Tensor(np.zeros((2, 8))), [3, 5]).data == pytest.approx(math.log(8), abs=1e-12)
    big = np.zeros((1, 4))
    big[0, 2] = 1e3
    assert cross_entropy_logits(Tensor(big), [2]).data < 1e-12
    with pytest.raises(LabelError):
        cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 3])
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(5, 4)))
    t = rng.integers(0, 4, size=5)
    assert check_gradients(lambda: cross_entropy_logits(x, t), [x]) < 1e-5


def test_backward_examples_and_accumulation():
    x = leaf([1.0, -2.0, 3.0])
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.sum().backward()
    assert np.array_equal(x.grad, 2 * np.ones(3))  # no zeroing: gradients accumulate
    s = leaf(1.5)
    (s * s).backward()
    assert s.grad == 3.0
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shared_node_visited_once():
    x = leaf([2.0])
    y = x * x
    (y + y).sum().backward()  # d/dx 2x^2 = 4x
    assert x.grad[0] == 8.0


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(5)
    mlp = MLP((4, 6, 3), rng)
    for p in mlp.parameters():
        p.data += rng.normal(0, 0.1, size=p.shape)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))
    assert check_gradients(lambda: (mlp(x) * w).sum(), mlp.parameters()) < 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(9)
    mlp = MLP((3, 5, 2), rng)
    x = rng.normal(size=(4, 3))
    grads = []
    for _ in range(2):
        mlp.zero_grad()
        mlp(x).sum().backward()
        grads.append([p.grad.copy() for p in mlp.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_adamw_examples():
    p = {"w": np.array([1.0, -2.0])}
    s = OptimState(lr=1e-3, weight_decay=0.0)
    adamw_step(p, {"w": np.zeros(2)}, s)
    assert np.array_equal(p["w"], [1.0, -2.0])

    p = {"w": np.array([0.5])}
    adamw_step(p, {"w": np.array([1.0])}, OptimState(lr=1e-3, betas=(0.9, 0.999), weight_decay=0.0))
    assert p["w"][0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)

    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.zeros(1)}, OptimState(lr=1e-3, weight_decay=0.05))
    assert p["w"][0] == pytest.approx(2.0 * (1 - 1e-3 * 0.05), abs=1e-15)

    with pytest.raises(NumericsError):
        adamw_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, OptimState())


def _adam_reference(p, grads, lr, b1, b2, eps):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = p.copy()
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        out = out - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return out


def test_adamw_without_decay_equals_adam():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=7)
    grads = [rng.normal(size=7) for _ in range(25)]
    p = {"w": p0.copy()}
    state = OptimState(lr=3e-3, weight_decay=0.0)
    for g in grads:
        adamw_step(p, {"w": g}, state)
    assert state.step == 25
    assert np.allclose(p["w"], _adam_reference(p0, grads, 3e-3, 0.9, 0.999, 1e-8), atol=1e-12, rtol=0)


def test_adamw_skips_decay_on_vectors():
    w = leaf(np.ones((2, 2)))
    b = leaf(np.ones(2))
    opt = AdamW([("w", w), ("b", b)], lr=0.1, weight_decay=0.5)
    opt.step()
    assert np.allclose(w.data, 0.95) and np.array_equal(b.data, np.ones(2))


def test_lr_schedule_examples():
    s = LrSchedule(base_lr=5e-4, warmup_steps=10, total_steps=110, floor_lr=0.0)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10) == 5e-4
    assert lr_at(s, 110) == 0.0
    assert lr_at(s, 60) == pytest.approx(2.5e-4, abs=1e-18)
    floor = LrSchedule(1.0, 0, 10, floor_lr=0.1)
    assert lr_at(floor, 10) == 0.1
    with pytest.raises(ValueError):
        lr_at(s, -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 20), st.integers(1, 40), st.integers(0, 80))
def test_lr_schedule_is_bounded_and_monotone_after_warmup(warmup, extra, step):
    s = LrSchedule(1.0, warmup, warmup + extra)
    v = lr_at(s, step)
    assert 0.0 <= v <= 1.0
    if step >= warmup:
        assert lr_at(s, step + 1) <= v + 1e-15


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.normal(size=(3, 4)), "a.count": np.array(7), "z": np.arange(5)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, arrays, {"note": "hi"})
    back, meta = checkpoint.load(path)
    assert list(back) == list(arrays) and meta == {"note": "hi"}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].shape == np.asarray(arrays[k]).shape
    assert checkpoint.dumps(back, meta) == path.read_bytes()
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.ckpt")


def test_module_state_dict_roundtrip():
    a = MLP((3, 4, 2), np.random.default_rng(0))
    b = MLP((3, 4, 2), np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    with pytest.raises(ShapeError):
        MLP((3, 5, 2), np.random.default_rng(0)).load_state_dict(a.state_dict())
