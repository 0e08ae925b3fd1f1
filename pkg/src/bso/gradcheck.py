"""Central finite-difference gradient verification.

Used by the test suite to check every hand-derived backward pass. Checks
should run on float64 copies of the model so the difference quotients are
not drowned in rounding noise.
"""

from __future__ import annotations

import numpy as np


def numerical_grad(fn, arr, step=1e-3):
    """Central finite differences of scalar fn() w.r.t. arr (in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = fn()
        flat[idx] = orig - step
        fm = fn()
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_param_grads(loss_and_backward, slots, step=1e-3, floor=1e-6):
    """Compare analytic grads against finite differences for every slot.

    ``loss_and_backward()`` must zero grads, run forward+backward, populate
    slot.grad and return the scalar loss. Returns the max relative error
    across all parameters.
    """
    loss_and_backward()
    analytic = {s.name: s.grad.copy() for s in slots}
    worst = 0.0
    for s in slots:
        num = numerical_grad(lambda: loss_and_backward(), s.value, step=step)
        worst = max(worst, max_relative_error(analytic[s.name], num, floor=floor))
    return worst
