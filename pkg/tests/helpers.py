"""Independent oracles shared by the test modules."""

from __future__ import annotations

from typing import Callable, Iterable, List, Sequence

import numpy as np
from scipy.signal import correlate

FD_STEP = 1e-5


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / (|a| + 1e-8), the elementwise acceptance metric."""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def grad_errors(loss_fn: Callable[[], "object"], params: Sequence) -> List[float]:
    """Backprop once, then compare each parameter's grad with central differences.

    ``loss_fn`` builds the graph from the current ``param.data`` and returns a
    scalar tensor; each element of ``params`` is a leaf tensor.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    errors = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_grad(lambda: float(loss_fn().data), p.data)
        errors.append(max_rel_error(analytic, numeric))
    return errors


def weighted_sum(t, weights: np.ndarray):
    """sum(t * weights): a scalar loss whose gradient entries are O(1)."""
    from quantnas.tensor import Tensor

    return (t * Tensor(weights)).sum()


def brute_force_front(points: Iterable) -> set:
    """Non-dominated (bitops lower better, psnr higher better) points, O(n^2)."""
    pts = list(points)
    keep = set()
    for i, (b, p) in enumerate(pts):
        beaten = False
        for j, (b2, p2) in enumerate(pts):
            if i != j and b2 <= b and p2 >= p and (b2, p2) != (b, p):
                beaten = True
        if not beaten:
            keep.add(i)
    return keep


def reference_conv(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct correlation with scipy, one (sample, out channel) at a time."""
    n, c, _, _ = x.shape
    co, cg = w.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    per = co // groups
    outs = []
    for i in range(n):
        chans = []
        for o in range(co):
            g = o // per
            acc = sum(correlate(xp[i, g * cg + k], w[o, k], mode="valid") for k in range(cg))
            chans.append(acc[::stride, ::stride] + (0.0 if b is None else b[o]))
        outs.append(np.stack(chans))
    return np.stack(outs)
