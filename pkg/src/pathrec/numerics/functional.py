"""Plain-array numeric kernels: softmax, losses, divergences, grad checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor

PROB_FLOOR = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Exp-normalize along the last axis; shift-invariant, order-preserving."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.shape[-1] == 0:
        raise ValueError("empty-logits")
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax requires finite logits")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class CrossEntropyResult:
    value: float
    clamped: bool  # true when probs[target] hit the 1e-12 floor


def cross_entropy(probs: np.ndarray, target_index: int) -> CrossEntropyResult:
    """Negative log-likelihood of ``target_index`` under ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("cross_entropy expects a probability vector")
    if not (0 <= target_index < p.shape[0]):
        raise ValueError(f"target index {target_index} out of range")
    pt = p[target_index]
    clamped = pt < PROB_FLOOR
    return CrossEntropyResult(float(-np.log(max(pt, PROB_FLOOR))), clamped)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with natural log; zero-mass p entries contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], PROB_FLOOR)))))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence; symmetric, in [0, ln 2] under natural log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("invalid-distribution: shape mismatch")
    for dist in (p, q):
        if np.any(dist < 0.0) or abs(float(dist.sum()) - 1.0) > 1e-9:
            raise ValueError("invalid-distribution")
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray,
               rel_tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a flat parameter tensor to a scalar tensor. Relative error
    uses a 1e-6 denominator floor so exactly-zero gradients compare cleanly.
    """
    x0 = np.asarray(point, dtype=np.float64).reshape(-1).copy()

    x_t = Tensor(x0, requires_grad=True)
    out = fn(x_t)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("non-finite-objective")
    out.backward()
    analytic = (x_t.grad if x_t.grad is not None else np.zeros_like(x0)).copy()

    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        bumped = x0.copy()
        bumped[i] = x0[i] + step
        f_plus = fn(Tensor(bumped)).item()
        bumped[i] = x0[i] - step
        f_minus = fn(Tensor(bumped)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError("non-finite-objective")
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel < rel_tol, max_rel, worst, analytic, numeric)
