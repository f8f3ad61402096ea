"""Softmax gradient flow for the entropy-regularized gating objective.

Dynamics:  tau * dw/dt = -w + softmax(-eps^-1 * Pi'(ln(Pi w) + c)).
The "+1" gradient component is dropped inside the softmax (translation
invariance).  The flow keeps the simplex forward invariant, its unique
equilibrium is the optimum of the regularized objective, and any two
trajectories approach each other at rate 1/tau in the Euclidean norm.

``solve_equilibrium`` computes the fixed point directly.  Initial descent
uses entropic mirror steps - the full step eta = 1/eps IS the Picard map
w -> softmax(-eps^-1 grad F(w)) - with backtracking on the objective, then
a damped Picard phase polishes the fixed-point residual (the Picard
Jacobian -eps^-1 * Dsoftmax * Hess has real nonpositive eigenvalues, so a
small enough damping always contracts locally).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError
from .objective import ObjectiveInstance, grad_F, smoothness_bound, total_objective
from .simplex import ZERO_FLOOR, as_simplex, entropy_rows, softmax

# Post-step guards on integrated states (invariance holds exactly only in
# exact arithmetic).
MASS_DRIFT_TOL = 1e-6
NEG_CLAMP = 1e-12

EQUILIBRIUM_TOL = 1e-10
TRAJECTORY_STOP_TOL = 1e-8


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings.  The temperature lives on ObjectiveInstance."""

    tau: float = 1.0
    integrator: str = "rk4"
    dt: float = 0.01
    horizon: float = 10.0
    record_every: int = 1
    stop_residual: float | None = None

    def __post_init__(self):
        if self.tau <= 0 or self.dt <= 0 or self.horizon < 0:
            raise ConfigError("tau and dt must be positive, horizon nonnegative")
        if self.integrator not in ("rk4", "euler"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.record_every < 1:
            raise ConfigError("record_every must be a positive integer")
        if self.horizon > 0 and self.dt > self.horizon:
            raise ConfigError("dt must not exceed the horizon")


@dataclass(frozen=True)
class FlowTrajectory:
    times: np.ndarray
    weights: np.ndarray  # (n_records, n_pi)
    energy: np.ndarray
    residual: np.ndarray  # ||flow_rhs||_2 along the path

    @property
    def final(self) -> np.ndarray:
        return self.weights[-1]


def as_bias(values) -> np.ndarray:
    """Strictly positive simplex vector (ln of it must be finite)."""
    b = as_simplex(values)
    if np.any(b <= 0.0):
        raise ValueError("bias vector must be strictly positive")
    return b


def _softmax_argument(inst: ObjectiveInstance, w) -> np.ndarray:
    """-eps^-1 * Pi'(ln(Pi w) + c), batched over leading axes of w."""
    pi = inst.primitives.entries
    mix = np.maximum(w @ pi.T, ZERO_FLOOR)
    return -((np.log(mix) + inst.cost) @ pi) / inst.epsilon


def flow_rhs(inst: ObjectiveInstance, cfg: FlowConfig, w) -> np.ndarray:
    """(1/tau) * (-w + softmax(-eps^-1 Pi'(ln(Pi w)+c))); batched."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != inst.n_primitives:
        raise ValueError("weight dimension mismatch")
    return (softmax(_softmax_argument(inst, w)) - w) / cfg.tau


def flow_rhs_biased(inst: ObjectiveInstance, cfg: FlowConfig, bias, w) -> np.ndarray:
    """Flow biased toward ``bias``: the entropy regularizer becomes
    KL(w || bias), so the softmax argument gains ln(bias) and the
    equilibrium satisfies w*_a proportional to bias_a * exp(eps^-1 g_a(w*)).
    Uniform bias reproduces the unbiased flow exactly.
    """
    bias = as_bias(bias)
    w = np.asarray(w, dtype=float)
    arg = np.log(bias) + _softmax_argument(inst, w)
    return (softmax(arg) - w) / cfg.tau


def euler_step_bounds(tau: float, epsilon: float, l_f: float) -> tuple[float, float]:
    """(max_step, optimal_step) for forward Euler: 2*tau/(1+L_F/eps)^2 and half."""
    if tau <= 0 or epsilon <= 0 or l_f < 0:
        raise ValueError("tau, epsilon must be positive and L_F nonnegative")
    max_step = 2.0 * tau / (1.0 + l_f / epsilon) ** 2
    return max_step, max_step / 2.0


def _guard(w: np.ndarray, step: int) -> np.ndarray:
    """Renormalize float drift after a step; fail loudly on real violations."""
    if not np.all(np.isfinite(w)):
        raise NumericalError(f"non-finite state at step {step}", step=step)
    total = w.sum(axis=-1, keepdims=True)
    if np.max(np.abs(total - 1.0)) > MASS_DRIFT_TOL:
        raise NumericalError(f"mass drift beyond {MASS_DRIFT_TOL} at step {step}", step=step)
    if w.min() < -MASS_DRIFT_TOL:
        raise NumericalError(f"negative weight beyond tolerance at step {step}", step=step)
    w = np.where((w < 0.0) & (w >= -NEG_CLAMP), 0.0, w)
    w = np.maximum(w, 0.0)
    return w / w.sum(axis=-1, keepdims=True)


def _check_euler_step(inst: ObjectiveInstance, cfg: FlowConfig) -> None:
    l_f = smoothness_bound(inst.primitives)
    max_step, _ = euler_step_bounds(cfg.tau, inst.epsilon, l_f)
    if cfg.dt >= max_step:
        raise ConfigError(
            f"euler step {cfg.dt:.3g} exceeds the contraction bound {max_step:.3g} "
            f"(tau={cfg.tau}, eps={inst.epsilon}, L_F={l_f:.3g})"
        )


def _integrate_batch(rhs: Callable, w0: np.ndarray, cfg: FlowConfig):
    """Fixed-step integration of dw/dt = rhs(t, w) for a (B, n) batch.

    Yields (step_index, t, w) after step 0 (initial state) and after every
    subsequent step; the caller handles recording and stopping.
    """
    w = w0.copy()
    dt = cfg.dt
    n_steps = int(round(cfg.horizon / dt)) if cfg.horizon > 0 else 0
    yield 0, 0.0, w
    for k in range(1, n_steps + 1):
        t = (k - 1) * dt
        if cfg.integrator == "euler":
            w = w + dt * rhs(t, w)
        else:
            k1 = rhs(t, w)
            k2 = rhs(t + dt / 2.0, w + (dt / 2.0) * k1)
            k3 = rhs(t + dt / 2.0, w + (dt / 2.0) * k2)
            k4 = rhs(t + dt, w + dt * k3)
            w = w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        w = _guard(w, k)
        yield k, k * dt, w


def _record_run(cfg, w0_batch, rhs):
    times, weights = [], []
    stop = cfg.stop_residual
    n_steps = int(round(cfg.horizon / cfg.dt)) if cfg.horizon > 0 else 0
    for k, t, w in _integrate_batch(rhs, w0_batch, cfg):
        recorded = k % cfg.record_every == 0 or k == n_steps
        if recorded:
            times.append(t)
            weights.append(w.copy())
        if stop is not None and np.abs(rhs(t, w) * cfg.tau).max() <= stop:
            if not recorded:
                times.append(t)
                weights.append(w.copy())
            break
    tarr = np.array(times)
    warr = np.stack(weights)  # (n_rec, B, n)
    return tarr, warr


def integrate(inst: ObjectiveInstance, cfg: FlowConfig, w0) -> FlowTrajectory:
    """Integrate the autonomous flow from w0; returns the recorded trajectory.

    Euler steps are validated against the contraction bound.  Recorded
    states are guarded (mass drift <= 1e-6 renormalized, tiny negatives
    clamped); the energy series along the exact flow is non-increasing and
    the integrator is expected to preserve that within discretization noise.
    """
    w0 = as_simplex(w0)
    if w0.size != inst.n_primitives:
        raise ValueError("w0 dimension mismatch")
    if cfg.integrator == "euler":
        _check_euler_step(inst, cfg)
    rhs = lambda t, w: flow_rhs(inst, cfg, w)
    tarr, warr = _record_run(cfg, w0[None, :], rhs)
    weights = warr[:, 0, :]
    energy = np.array([total_objective(inst, w) for w in weights])
    residual = np.linalg.norm(flow_rhs(inst, cfg, weights), axis=-1)
    return FlowTrajectory(tarr, weights, energy, residual)


def integrate_time_varying(
    inst: ObjectiveInstance,
    cost_at: Callable[[float], np.ndarray],
    cfg: FlowConfig,
    w0,
) -> FlowTrajectory:
    """Integrate with a time-varying cost c(t); primitives and epsilon come
    from ``inst``.  For a T-periodic cost the trajectory entrains to a
    unique T-periodic orbit after the transient.
    """
    w0 = as_simplex(w0)
    pi = inst.primitives.entries

    def rhs(t, w):
        c = np.asarray(cost_at(t), dtype=float)
        mix = np.maximum(w @ pi.T, ZERO_FLOOR)
        arg = -((np.log(mix) + c) @ pi) / inst.epsilon
        return (softmax(arg) - w) / cfg.tau

    tarr, warr = _record_run(cfg, w0[None, :], rhs)
    weights = warr[:, 0, :]
    energy = np.empty(len(tarr))
    residual = np.empty(len(tarr))
    for i, (t, w) in enumerate(zip(tarr, weights)):
        ci = ObjectiveInstance(inst.primitives, np.asarray(cost_at(t), dtype=float), inst.epsilon)
        energy[i] = total_objective(ci, w)
        residual[i] = np.linalg.norm(flow_rhs(ci, cfg, w))
    return FlowTrajectory(tarr, weights, energy, residual)


def contraction_report(inst, cfg: FlowConfig, w0a, w0b) -> list[tuple[float, float, float]]:
    """Distance ratio between two trajectories vs the e^{-t/tau} bound.

    Returns (t, ||wa(t)-wb(t)|| / ||wa(0)-wb(0)||, exp(-t/tau)) rows; the
    ratio is 0 for identical starts.  Both trajectories share one grid.
    """
    w0 = np.stack([as_simplex(w0a), as_simplex(w0b)])
    if cfg.integrator == "euler":
        _check_euler_step(inst, cfg)
    rhs = lambda t, w: flow_rhs(inst, cfg, w)
    d0 = float(np.linalg.norm(w0[0] - w0[1]))
    rows = []
    for k, t, w in _integrate_batch(rhs, w0, cfg):
        if k % cfg.record_every:
            continue
        d = float(np.linalg.norm(w[0] - w[1]))
        ratio = 0.0 if d0 == 0.0 else d / d0
        rows.append((t, ratio, float(np.exp(-t / cfg.tau))))
    return rows


def euler_pair_ratios(inst, cfg: FlowConfig, w0a, w0b, n_steps: int) -> np.ndarray:
    """Per-step distance ratios of the raw forward-Euler map (no guards).

    Used to check the discretization step bound: within the bound the map
    contracts; well beyond it expansion (ratio >= 1) becomes observable.
    NaN is returned for steps where the state diverged.
    """
    w = np.stack([np.asarray(w0a, float), np.asarray(w0b, float)])
    ratios = np.empty(n_steps)
    for k in range(n_steps):
        d_before = np.linalg.norm(w[0] - w[1])
        w = w + cfg.dt * flow_rhs(inst, cfg, w)
        d_after = np.linalg.norm(w[0] - w[1])
        ratios[k] = d_after / d_before if (np.isfinite(d_after) and d_before > 0) else np.nan
    return ratios


# -- Equilibrium solving ----------------------------------------------------


def _batch_objective(pi, cost, eps, w):
    mix = np.maximum(np.einsum("bdn,bn->bd", pi, w), ZERO_FLOOR)
    f = (mix * (np.log(mix) + cost)).sum(axis=-1)
    return f - eps * entropy_rows(w)


def _batch_picard(pi, cost, eps, w):
    """softmax(-eps^-1 Pi'(ln(Pi w)+c)) and the pre-softmax Pi'(ln(Pi w)+c)."""
    mix = np.maximum(np.einsum("bdn,bn->bd", pi, w), ZERO_FLOOR)
    g = np.einsum("bdn,bd->bn", pi, np.log(mix) + cost)
    return softmax(-g / eps), g


def solve_equilibrium_batch(
    pi: np.ndarray,
    cost: np.ndarray,
    eps: float,
    *,
    tol: float = EQUILIBRIUM_TOL,
    max_iter: int = 100_000,
    w0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve w = softmax(-eps^-1 Pi'(ln(Pi w)+c)) for a batch of instances.

    pi: (B, d_u, n_pi) column-stochastic stacks, cost: (B, d_u).  Returns
    (weights (B, n_pi), fixed-point residuals (B,)).

    Phase 1 walks the convex objective downhill with entropic mirror steps
    (log-space, so saturated weights that underflow to 0 stay representable)
    and per-instance backtracking; phase 2 polishes with damped Picard
    iterations, halving the damping whenever a residual fails to decrease.
    """
    pi = np.asarray(pi, dtype=float)
    cost = np.asarray(cost, dtype=float)
    b, _, n = pi.shape
    if n == 1:
        return np.ones((b, 1)), np.zeros(b)
    if w0 is None:
        w = np.full((b, n), 1.0 / n)
    else:
        w = np.asarray(w0, dtype=float).copy()

    t_w, g = _batch_picard(pi, cost, eps, w)
    res = np.abs(w - t_w).max(axis=-1)

    # Phase 1: monotone mirror descent in log space until residual 1e-6
    # (rows whose backtracking exhausts are at the objective noise floor
    # and are left for phase 2).
    switch = max(tol, 1e-6)
    obj = _batch_objective(pi, cost, eps, w)
    eta = np.full(b, 1.0 / eps)
    stalled = np.zeros(b, dtype=bool)
    budget = min(max_iter, 5000)
    for _ in range(budget):
        active = (res > switch) & ~stalled
        if not np.any(active):
            break
        ell = np.log(np.maximum(w, 1e-300))
        accepted = np.zeros(b, dtype=bool)
        for _bt in range(60):
            trying = active & ~accepted
            if not np.any(trying):
                break
            prop = (1.0 - eta[:, None] * eps) * ell - eta[:, None] * g
            prop = prop - prop.max(axis=-1, keepdims=True)
            w_prop = np.exp(prop)
            w_prop /= w_prop.sum(axis=-1, keepdims=True)
            obj_prop = _batch_objective(pi, cost, eps, w_prop)
            good = trying & (obj_prop <= obj + 1e-12)
            w = np.where(good[:, None], w_prop, w)
            obj = np.where(good, obj_prop, obj)
            accepted |= good
            shrink = trying & ~good
            eta[shrink] *= 0.5
            newly_stalled = shrink & (eta < 1e-18)
            stalled |= newly_stalled
            accepted |= newly_stalled
        eta = np.minimum(eta * 1.5, 1.0 / eps)
        t_w, g = _batch_picard(pi, cost, eps, w)
        res = np.abs(w - t_w).max(axis=-1)

    # Phase 2: damped Picard with revert; the local Jacobian of the Picard
    # map has real nonpositive eigenvalues, so small enough damping always
    # contracts and the residual decreases monotonically per row.
    lam = np.full(b, 1.0)
    for _ in range(max_iter):
        active = res > tol
        if not np.any(active):
            break
        w_new = np.where(
            active[:, None], (1.0 - lam[:, None]) * w + lam[:, None] * t_w, w
        )
        t_new, _ = _batch_picard(pi, cost, eps, w_new)
        res_new = np.abs(w_new - t_new).max(axis=-1)
        accept = active & (res_new <= res)
        w = np.where(accept[:, None], w_new, w)
        t_w = np.where(accept[:, None], t_new, t_w)
        res = np.where(accept, res_new, res)
        lam = np.where(accept, np.minimum(lam * 1.3, 1.0), lam)
        lam = np.where(active & ~accept, lam * 0.5, lam)
        if np.all(lam[active] < 1e-15):
            break
    return w, res


def solve_equilibrium(
    inst: ObjectiveInstance,
    cfg: FlowConfig | None = None,
    *,
    tol: float = EQUILIBRIUM_TOL,
    max_iter: int = 100_000,
    w0=None,
) -> np.ndarray:
    """Equilibrium weights w* = softmax(-eps^-1 grad F(w*)).

    ``cfg`` is accepted for interface symmetry; the equilibrium does not
    depend on the flow time constant.  Raises NumericalError with the last
    residual if the tolerance is not met.
    """
    del cfg
    w0b = None if w0 is None else as_simplex(w0)[None, :]
    w, res = solve_equilibrium_batch(
        inst.primitives.entries[None, :, :],
        inst.cost[None, :],
        inst.epsilon,
        tol=tol,
        max_iter=max_iter,
        w0=w0b,
    )
    if res[0] > tol:
        raise NumericalError(
            f"equilibrium solve stalled at residual {res[0]:.3g} (tol {tol:.3g})",
            residual=float(res[0]),
        )
    return w[0]


def solve_equilibrium_biased(
    inst: ObjectiveInstance,
    bias,
    *,
    tol: float = EQUILIBRIUM_TOL,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Equilibrium of the biased flow: w*_a proportional to
    bias_a * exp(eps^-1 g_a(w*)).

    Reduces to the unbiased problem with cost shifted so that
    Pi'(ln(Pi w)+c_biased) = Pi'(ln(Pi w)+c) - eps ln(bias): the KL(w||bias)
    regularizer is entropy plus the linear term -w.ln(bias).
    """
    bias = as_bias(bias)
    pi = inst.primitives.entries
    # Solve min F(w) - w.(eps ln bias) - eps H(w) by absorbing the linear
    # term into the Picard map directly.
    b, n = 1, inst.n_primitives
    w = np.full((b, n), 1.0 / n)
    log_bias = np.log(bias)

    def picard(wv):
        mix = np.maximum(wv @ pi.T, ZERO_FLOOR)
        g = (np.log(mix) + inst.cost) @ pi
        return softmax(log_bias - g / inst.epsilon)

    lam = 1.0
    t_w = picard(w)
    res = np.abs(w - t_w).max()
    for _ in range(max_iter):
        if res <= tol:
            return w[0]
        w_new = (1.0 - lam) * w + lam * t_w
        t_new = picard(w_new)
        res_new = np.abs(w_new - t_new).max()
        lam = max(lam * 0.5, 1.0 / 1024.0) if res_new > res else min(lam * 1.25, 1.0)
        w, t_w, res = w_new, t_new, res_new
    raise NumericalError(f"biased equilibrium stalled at residual {res:.3g}", residual=float(res))


def export_trajectory_csv(traj: FlowTrajectory, path) -> None:
    """CSV with header t,w_1,...,w_n,energy,residual at 17 significant digits."""
    n = traj.weights.shape[1]
    header = "t," + ",".join(f"w_{i + 1}" for i in range(n)) + ",energy,residual"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for t, w, e, r in zip(traj.times, traj.weights, traj.energy, traj.residual):
            cells = [format(t, ".17g")] + [format(x, ".17g") for x in w]
            cells += [format(e, ".17g"), format(r, ".17g")]
            fh.write(",".join(cells) + "\n")
