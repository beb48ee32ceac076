"""Central finite-difference gradient checks.

Only forward evaluations are used for the numerical side, so the check stays
independent of the backward implementations it validates.
"""

import numpy as np

from .tensor import backward


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn, tensor, coords, eps=1e-5):
    """d fn() / d tensor[coord] for each coord, by central differences on ``tensor.data``."""
    out = []
    data = tensor.data
    for coord in coords:
        old = data[coord]
        data[coord] = old + eps
        up = float(fn().data)
        data[coord] = old - eps
        down = float(fn().data)
        data[coord] = old
        out.append((up - down) / (2 * eps))
    return np.array(out)


def check_gradients(fn, tensors, eps=1e-5, max_coords=None, rng=None, floor=1e-8):
    """Compare backward gradients of scalar ``fn()`` against central differences.

    ``tensors`` are leaves with ``requires_grad``.  With ``max_coords`` set,
    that many coordinates per tensor are sampled with ``rng``; otherwise every
    coordinate is checked.  Returns ``{index: max relative error}``.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]
    errors = {}
    for k, t in enumerate(tensors):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picks]
        num = numeric_gradient(fn, t, coords, eps)
        ana = np.zeros(len(coords)) if analytic[k] is None else np.array([analytic[k][c] for c in coords])
        errors[k] = float(relative_error(ana, num, floor).max())
    return errors
