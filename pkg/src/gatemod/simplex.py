"""Probability-simplex primitives: softmax, entropy, KL, the entropic prox.

Vectors on the simplex are plain float ndarrays.  ``as_simplex`` is the
constructor used at module boundaries: it renormalizes small drift and
rejects anything that is not close to a probability vector.

Conventions: all logs are natural, 0*ln(0) = 0, and KL of a pair that is
not absolutely continuous is +inf (a value, not an error).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Entries below ZERO_FLOOR are treated as exact zeros inside entropy/KL so
# the 0*ln(0) convention is applied before ln can underflow.
ZERO_FLOOR = 1e-15

# Construction renormalizes mass drift up to RENORM_TOL and rejects beyond;
# membership checks use the tighter SUM_TOL.
SUM_TOL = 1e-9
RENORM_TOL = 1e-6


def as_simplex(values, *, renorm_tol: float = RENORM_TOL) -> np.ndarray:
    """Validate ``values`` as a probability vector, renormalizing small drift.

    Entries in [-renorm_tol, 0) are clamped to 0; a total mass within
    renorm_tol of 1 is rescaled to exactly 1.  Anything further off raises.
    """
    w = np.asarray(values, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("simplex vector must be a nonempty 1-D array")
    if not np.all(np.isfinite(w)):
        raise ValueError("simplex vector must be finite")
    if np.any(w < -renorm_tol):
        raise ValueError(f"negative entry {w.min():.3g} below tolerance {-renorm_tol:.3g}")
    w = np.maximum(w, 0.0)
    total = w.sum()
    if abs(total - 1.0) > renorm_tol:
        raise ValueError(f"entries sum to {total:.12g}, not 1 within {renorm_tol:.3g}")
    return w / total


def is_simplex(w, *, tol: float = SUM_TOL) -> bool:
    w = np.asarray(w, dtype=float)
    return bool(w.ndim == 1 and np.all(w >= -tol) and abs(w.sum() - 1.0) <= tol)


def softmax(x) -> np.ndarray:
    """Shift-stable softmax along the last axis.

    softmax(x + u*1) == softmax(x) up to rounding, and the output lies on
    the simplex for any finite input (entries of magnitude 1e3 included).
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(w) -> float:
    """Shannon entropy in nats; 0*ln(0) = 0."""
    w = np.asarray(w, dtype=float)
    mask = w > ZERO_FLOOR
    return float(-(w[mask] * np.log(w[mask])).sum()) if mask.any() else 0.0


def entropy_rows(w) -> np.ndarray:
    """Entropy along the last axis of a batch of simplex vectors."""
    w = np.asarray(w, dtype=float)
    logs = np.where(w > ZERO_FLOOR, np.log(np.maximum(w, ZERO_FLOOR)), 0.0)
    return -(w * logs).sum(axis=-1)


def cross_entropy(p, q) -> float:
    """H(p, q) = -sum p_i ln q_i; +inf when p puts mass where q has none."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > ZERO_FLOOR
    if np.any(q[mask] <= ZERO_FLOOR):
        return float("inf")
    return float(-(p[mask] * np.log(q[mask])).sum())


def kl_divergence(p, q) -> float:
    """KL(p||q) in nats; +inf when p is not absolutely continuous w.r.t. q."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > ZERO_FLOOR
    if np.any(q[mask] <= ZERO_FLOOR):
        return float("inf")
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def prox_entropic_barrier(x) -> np.ndarray:
    """Prox of (negative entropy + simplex indicator - squared-norm/2).

    Closed form: the softmax.  Equivalently the minimizer over the simplex
    of sum_i z_i ln z_i - x.z  (see oracles.prox_by_definition for the
    brute-force counterpart).
    """
    return softmax(x)


@dataclass(frozen=True)
class GaussianSpec:
    """Multivariate Gaussian with a symmetric positive-definite covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("Gaussian parameters must be finite")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance must be symmetric within 1e-12")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size


def kl_gaussian(p: GaussianSpec, q: GaussianSpec) -> float:
    """KL(p||q) for Gaussians, via Cholesky factors.

    0.5 * (tr(Sq^-1 Sp) + (mq-mp)' Sq^-1 (mq-mp) - d + ln det Sq - ln det Sp);
    for equal covariances this reduces to half the Mahalanobis distance
    between the means.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    lq = q._chol
    lp = p._chol
    d = p.dim
    # tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    m = np.linalg.solve(lq, lp)
    trace_term = float((m * m).sum())
    diff = np.linalg.solve(lq, q.mean - p.mean)
    quad = float(diff @ diff)
    logdet_q = 2.0 * float(np.log(np.diag(lq)).sum())
    logdet_p = 2.0 * float(np.log(np.diag(lp)).sum())
    return 0.5 * (trace_term + quad - d + logdet_q - logdet_p)
