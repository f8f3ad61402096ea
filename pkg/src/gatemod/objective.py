"""Discrete-action gating objective over a column-stochastic primitive matrix.

An instance is (Pi, c, epsilon): Pi holds one pmf over the d_u actions per
primitive (column), c is the per-action cost in nats, epsilon > 0 the
entropy-regularization temperature.  The smooth part is

    F(w) = sum_i (Pi w)_i (ln (Pi w)_i + c_i),

with gradient Pi' (ln(Pi w) + c) + 1 and Hessian
H[a,g] = sum_i Pi[i,a] Pi[i,g] / (Pi w)_i, and the full objective is
F(w) - epsilon * H(w).

``grad_F`` and ``total_objective`` accept batches of weight vectors
(shape (..., n_pi)); evaluation is vectorized over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simplex import SUM_TOL, ZERO_FLOOR, entropy_rows

# Raw primitive densities are clamped at this floor before column
# normalization so every primitive keeps full support over the actions.
DENSITY_FLOOR = 1e-4


@dataclass(frozen=True)
class PrimitiveMatrix:
    """d_u x n_pi column-stochastic matrix of primitive pmfs.

    pi_min/pi_max are the realized extreme entries of the matrix, so the
    smoothness bound computed from them covers the actual instance.
    """

    entries: np.ndarray
    pi_min: float
    pi_max: float

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.size == 0:
            raise ValueError("primitive matrix must be 2-D and nonempty")
        if not np.all(np.isfinite(m)):
            raise ValueError("primitive matrix must be finite")
        if np.max(np.abs(m.sum(axis=0) - 1.0)) > SUM_TOL:
            raise ValueError("every primitive column must sum to 1 within 1e-9")
        if not (0.0 < self.pi_min <= self.pi_max):
            raise ValueError("need 0 < pi_min <= pi_max")
        if m.min() < self.pi_min - 1e-15 or m.max() > self.pi_max + 1e-15:
            raise ValueError("entries outside the recorded [pi_min, pi_max]")
        object.__setattr__(self, "entries", m)

    @property
    def n_actions(self) -> int:
        return self.entries.shape[0]

    @property
    def n_primitives(self) -> int:
        return self.entries.shape[1]


def primitive_matrix(raw_columns, *, floor: float = DENSITY_FLOOR) -> PrimitiveMatrix:
    """Build a PrimitiveMatrix from raw nonnegative densities.

    Each column is clamped at ``floor`` and renormalized, so the result has
    full support even when a density underflows far from its mode.
    """
    m = np.atleast_2d(np.asarray(raw_columns, dtype=float))
    if not np.all(np.isfinite(m)):
        raise ValueError("raw densities must be finite")
    m = np.maximum(m, floor)
    m = m / m.sum(axis=0, keepdims=True)
    return PrimitiveMatrix(m, pi_min=float(m.min()), pi_max=float(m.max()))


def as_cost(values) -> np.ndarray:
    c = np.asarray(values, dtype=float)
    if c.ndim != 1 or not np.all(np.isfinite(c)):
        raise ValueError("cost vector must be a finite 1-D array")
    return c


@dataclass(frozen=True)
class ObjectiveInstance:
    primitives: PrimitiveMatrix
    cost: np.ndarray
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "cost", as_cost(self.cost))
        if self.cost.size != self.primitives.n_actions:
            raise ValueError(
                f"cost length {self.cost.size} != number of actions {self.primitives.n_actions}"
            )
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def n_primitives(self) -> int:
        return self.primitives.n_primitives


def build_cost(per_action_transition_kl, reference_policy) -> np.ndarray:
    """c_i = KL_i - ln q_u(i) for a strictly positive reference policy."""
    kl = as_cost(per_action_transition_kl)
    q = np.asarray(reference_policy, dtype=float)
    if kl.shape != q.shape:
        raise ValueError("KL vector and reference policy lengths differ")
    if np.any(q <= 0.0):
        raise ValueError("reference policy must have full support")
    return kl - np.log(q)


def build_cost_exponentiated(base_transition_kl, base_reference_policy, state_action_cost) -> np.ndarray:
    """Cost for an exponentiated-cost generative model q ~ q_tilde * exp(-c).

    The normalizer ln Z is a constant shift and is omitted; it cannot move
    the gated weights because Pi'(k*1) = k*1 and the softmax is
    translation invariant.
    """
    extra = as_cost(state_action_cost)
    base = build_cost(base_transition_kl, base_reference_policy)
    if extra.shape != base.shape:
        raise ValueError("state/action cost length mismatch")
    return base + extra


def _check_weights(inst: ObjectiveInstance, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != inst.n_primitives:
        raise ValueError(f"weight dimension {w.shape[-1]} != n_pi {inst.n_primitives}")
    return w


def mixture(inst: ObjectiveInstance, w) -> np.ndarray:
    """Pi w, the mixed pmf over actions (batched over leading axes of w)."""
    w = _check_weights(inst, w)
    return w @ inst.primitives.entries.T


def eval_F(inst: ObjectiveInstance, w) -> float:
    """Smooth part F(w) = sum_i (Pi w)_i (ln (Pi w)_i + c_i)."""
    mix = mixture(inst, w)
    mix = np.maximum(mix, ZERO_FLOOR)
    val = (mix * (np.log(mix) + inst.cost)).sum(axis=-1)
    return float(val) if val.ndim == 0 else val


def grad_F(inst: ObjectiveInstance, w) -> np.ndarray:
    """Gradient Pi'(ln(Pi w) + c) + 1 (batched)."""
    mix = mixture(inst, w)
    mix = np.maximum(mix, ZERO_FLOOR)
    return (np.log(mix) + inst.cost) @ inst.primitives.entries + 1.0


def hessian_F(inst: ObjectiveInstance, w) -> np.ndarray:
    """Hessian H[a,g] = sum_i Pi[i,a] Pi[i,g] / (Pi w)_i; symmetric PSD."""
    mix = mixture(inst, np.asarray(w, dtype=float))
    if mix.ndim != 1:
        raise ValueError("hessian_F takes a single weight vector")
    pi = inst.primitives.entries
    return pi.T @ (pi / mix[:, None])


def smoothness_bound(pm: PrimitiveMatrix) -> float:
    """Smoothness constant L_F = n_pi * pi_max^2 / pi_min."""
    return pm.n_primitives * pm.pi_max**2 / pm.pi_min


def total_objective(inst: ObjectiveInstance, w) -> float:
    """F(w) - epsilon * H(w) (batched)."""
    val = eval_F(inst, w) - inst.epsilon * entropy_rows(_check_weights(inst, w))
    return float(val) if np.ndim(val) == 0 else val
