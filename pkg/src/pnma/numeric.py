"""Dense numeric kernels and the gradient-checking harness.

Every layer in this package is built from explicit forward/backward pairs
over plain numpy arrays (row-major, single precision for training, double
precision for verification).  There is no autodiff graph: each backward
function is hand-derived and checked against ``finite_difference_check``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NumericError

#: Denominator floor used by relative-error comparisons.
REL_ERR_FLOOR = 1e-8


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded counter-based generator (Philox), stable across platforms.

    Distinct ``stream`` values give independent streams for the same seed,
    so initialization, sampling and shuffling never share draws.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return np.random.Generator(np.random.Philox(ss))


def linear_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = W x + b for a single vector x."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"linear_affine: W {w.shape} does not conform with x {x.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear_affine: b {b.shape} does not conform with W {w.shape}")
    return w @ x + b


def linear_affine_backward(
    d_y: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_w, d_b) of a scalar loss given d_loss/d_y."""
    d_y, x, w = np.asarray(d_y), np.asarray(x), np.asarray(w)
    if d_y.shape != (w.shape[0],):
        raise DimensionError(f"linear_affine_backward: d_y {d_y.shape} vs W {w.shape}")
    d_x = w.T @ d_y
    d_w = np.outer(d_y, x)
    d_b = d_y.copy()
    return d_x, d_w, d_b


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax via max subtraction."""
    z = np.asarray(z)
    if z.size == 0:
        raise DomainError("softmax: empty input")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(z: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Stable log(sum(exp(z))); always >= max(z)."""
    z = np.asarray(z)
    if z.size == 0:
        raise DomainError("logsumexp: empty input")
    if axis is None:
        m = float(np.max(z))
        return float(np.log(np.sum(np.exp(z - m))) + m)
    m = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return np.abs(a - b) / denom


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-3,
) -> float:
    """Max relative error between central differences of ``f`` and ``analytic_grad``.

    ``f`` must be a scalar function of a parameter tensor; the check perturbs
    one entry at a time.  Run in double precision: the callers' acceptance
    bound is 1e-4 at step 1e-3.
    """
    if step <= 0:
        raise DomainError(f"finite_difference_check: step must be positive, got {step}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(analytic_grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise DimensionError(
            f"finite_difference_check: theta {theta.shape} vs analytic_grad {grad.shape}"
        )
    worst = 0.0
    for i in range(theta.size):
        plus = theta.copy()
        plus.flat[i] += step
        minus = theta.copy()
        minus.flat[i] -= step
        f_plus = float(f(plus))
        f_minus = float(f(minus))
        if not np.isfinite(f_plus) or not np.isfinite(f_minus):
            raise NumericError(f"finite_difference_check: non-finite f at index {i}")
        fd = (f_plus - f_minus) / (2.0 * step)
        g = grad.flat[i]
        err = abs(fd - g) / max(abs(fd), abs(g), REL_ERR_FLOOR)
        worst = max(worst, err)
    return worst


def require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite values")
