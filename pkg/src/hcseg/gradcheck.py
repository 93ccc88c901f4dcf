"""Central finite differences, used as the independent gradient oracle."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def finite_difference_oracle(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f(x)`` returns a scalar Tensor or float.  ``x`` is perturbed in place one
    coordinate at a time, so closures over the same Tensor see the perturbation.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(data)
    flat = data.reshape(-1)
    g = grad.reshape(-1)

    def value():
        with no_grad():
            out = f(x)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-12):
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(f, params, h=1e-5, max_coords=None, rng=None, floor=1e-6):
    """Compare analytic gradients of ``f()`` against finite differences.

    ``params`` is a mapping name -> Tensor (requires_grad).  When
    ``max_coords`` is set, only that many randomly chosen coordinates per tensor
    are perturbed.  Returns {name: relative error}.

    ``floor * max(1, |f|)`` bounds the denominator from below.  Central
    differences carry rounding noise of order ``|f| * 1e-16 / h``, so a
    gradient that is exactly zero (e.g. a bias a softmax is invariant to) can
    only be checked in absolute terms; gradients with norm above the floor get
    the plain relative test.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    floor = floor * max(1.0, abs(float(loss.data)))
    errors = {}
    for name, p in params.items():
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        errors[name] = relative_error(analytic[idx], numeric, floor)
    return errors
