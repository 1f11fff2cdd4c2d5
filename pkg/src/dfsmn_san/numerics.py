"""Dense array primitives and the finite-difference gradient oracle.

Every analytic backward pass in the package is checked against
:func:`finite_diff_gradient` through :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Stand-in for log(0) in log-space dynamic programs; far below any reachable log-prob.
LOG_ZERO = -1e30


class NumericsError(ValueError):
    pass


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: int
    analytic: float
    numeric: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilised by subtracting the row max.

    Rows that are entirely ``-inf`` (fully masked) are not supported.
    """
    m = np.asarray(m, dtype=float)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable ``log(sum(exp(a)))`` along ``axis``.

    Slices whose entries are all at or below ``LOG_ZERO`` return ``LOG_ZERO``.
    """
    a = np.asarray(a, dtype=float)
    peak = np.max(a, axis=axis, keepdims=True)
    safe_peak = np.where(peak <= LOG_ZERO, 0.0, peak)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe_peak), axis=axis, keepdims=True)) + safe_peak
    out = np.where(peak <= LOG_ZERO, LOG_ZERO, out)
    return np.squeeze(out, axis=axis)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise each row of ``x`` to zero mean / unit variance, then scale and shift."""
    x = np.asarray(x, dtype=float)
    gain = np.asarray(gain, dtype=float)
    bias = np.asarray(bias, dtype=float)
    if eps <= 0:
        raise NumericsError(f"eps must be positive, got {eps}")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise NumericsError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match {x.shape[-1]} columns"
        )
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=float)
    return _central_differences(lambda: f(theta), theta, eps)


def perturb_in_place(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` with respect to the entries of ``arr``.

    ``f`` closes over whatever owns ``arr`` (a layer, usually), so the array is
    perturbed where it lives and restored afterwards.
    """
    return _central_differences(f, arr, eps)


def _central_differences(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    if not 1e-7 <= eps <= 1e-3:
        raise NumericsError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if arr.size == 0:
        return np.zeros(arr.shape)
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise NumericsError("array must be contiguous to be perturbed in place")
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f())
        flat[i] = orig - eps
        f_minus = float(f())
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericsError(f"non-finite function value while perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(arr.shape)


def grad_check(analytic: np.ndarray, numeric: np.ndarray) -> GradCheckReport:
    a = np.asarray(analytic, dtype=float).reshape(-1)
    n = np.asarray(numeric, dtype=float).reshape(-1)
    if a.shape != n.shape:
        raise NumericsError(f"length mismatch: analytic {a.size} vs numeric {n.size}")
    if a.size == 0:
        return GradCheckReport(0.0, -1, 0.0, 0.0)
    rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel[worst]), worst, float(a[worst]), float(n[worst]))
