"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic, numeric, floor=1e-8):
    """``||a - n||_2 / max(||a||_2, ||n||_2)``; 0 when both norms are below ``floor``.

    The floor absorbs finite-difference round-off on gradients that vanish
    identically (for example a key bias under softmax attention).
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(fn, tensor, h=1e-5, coords=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``."""
    flat = tensor.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = np.zeros(len(coords))
    with no_grad():
        for j, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            out[j] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(fn, inputs, h=1e-5, max_coords=None, rng=None):
    """Compare backward() with finite differences for every tensor in ``inputs``.

    ``fn`` rebuilds the scalar loss from scratch on each call. When
    ``max_coords`` is set, at most that many entries per tensor (drawn with
    ``rng``) are probed. Returns the worst relative error.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(t.size, max_coords, replace=False))
            numeric = numeric_grad(fn, t, h, list(coords))
            analytic = analytic[coords]
        else:
            numeric = numeric_grad(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def leaf(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
