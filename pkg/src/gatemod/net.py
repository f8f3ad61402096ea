"""Multi-timescale neural circuit that realizes the softmax gradient flow.

Fast unit (gradient):      tau_g  da = -a + Pi w
                           tau_g  db = -b + ln a
                           tau_gt dy = -eps y - Pi'(b + c)
Slow unit (softmax):       tau_s  dm = -m + sum_a exp(y_a)
                           tau_s  dr = -r + y - 1 ln m
                           tau    dw = -w + exp(r)

With tau_g << tau_gt << tau_s << tau the circuit tracks the flow and its
steady state satisfies the same fixed-point equation, so the output
weights converge to the optimum.  All neural variables stay positive from
positive initial conditions (a and m are additionally floored at 1e-12
during integration, with a diagnostic count, so transient undershoot can
never feed a log).

The normalizer neuron stores sum(exp(y)); keep the temperature moderate
(eps not far below ~0.1 for unit-scale costs) or that sum overflows -
a genuine stiffness of the circuit, not of the integrator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .flow import FlowConfig, _integrate_batch, flow_rhs, solve_equilibrium
from .objective import ObjectiveInstance

POSITIVITY_FLOOR = 1e-12


@dataclass(frozen=True)
class Timescales:
    """tau_g << tau_g_tilde << tau_s << tau; each ratio at most max_ratio."""

    tau_g: float = 1e-3
    tau_g_tilde: float = 1e-2
    tau_s: float = 1e-1
    tau: float = 1.0
    max_ratio: float = 0.2

    def __post_init__(self):
        chain = (self.tau_g, self.tau_g_tilde, self.tau_s, self.tau)
        if any(t <= 0 for t in chain):
            raise ConfigError("all time constants must be positive")
        for fast, slow in zip(chain, chain[1:]):
            if fast / slow > self.max_ratio + 1e-12:
                raise ConfigError(
                    f"timescale ratio {fast / slow:.3g} exceeds max_ratio {self.max_ratio}"
                )

    @classmethod
    def from_ratio(cls, ratio: float, tau: float = 1.0) -> "Timescales":
        return cls(tau * ratio**3, tau * ratio**2, tau * ratio, tau, max_ratio=ratio)


@dataclass
class NetState:
    """Neural variables: a, b (per action), y, r, w (per primitive), m scalar."""

    a: np.ndarray
    b: np.ndarray
    y: np.ndarray
    m: float
    r: np.ndarray
    w: np.ndarray

    def validate(self) -> "NetState":
        if np.any(self.a <= 0.0) or self.m <= 0.0:
            raise NumericalError("a and m must stay strictly positive (ln is taken)")
        if np.any(self.w < 0.0):
            raise ValueError("w entries must be nonnegative (firing rates)")
        return self


@dataclass(frozen=True)
class NetTrajectory:
    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    y: np.ndarray
    m: np.ndarray
    r: np.ndarray
    w: np.ndarray
    floor_hits: int = 0

    def state_at(self, idx: int) -> NetState:
        return NetState(self.a[idx], self.b[idx], self.y[idx], float(self.m[idx]), self.r[idx], self.w[idx])

    @property
    def final(self) -> NetState:
        return self.state_at(-1)


def quasi_steady_state(inst: ObjectiveInstance, w0=None) -> NetState:
    """Initialize every layer on its quasi-steady manifold for the given w.

    Avoids ln-of-near-zero transients: a = Pi w, b = ln a,
    y = -eps^-1 Pi'(b+c), m = sum exp(y), r = y - ln m, w as given (uniform
    by default).
    """
    n = inst.n_primitives
    w = np.full(n, 1.0 / n) if w0 is None else np.asarray(w0, dtype=float)
    pi = inst.primitives.entries
    a = pi @ w
    b = np.log(a)
    y = -(pi.T @ (b + inst.cost)) / inst.epsilon
    m = float(np.exp(y).sum())
    r = y - np.log(m)
    return NetState(a, b, y, m, r, w).validate()


def net_rhs(inst: ObjectiveInstance, ts: Timescales, s: NetState) -> NetState:
    """Time derivative of every neural variable at state ``s``."""
    s.validate()
    pi = inst.primitives.entries
    da = (-s.a + pi @ s.w) / ts.tau_g
    db = (-s.b + np.log(s.a)) / ts.tau_g
    dy = (-inst.epsilon * s.y - pi.T @ (s.b + inst.cost)) / ts.tau_g_tilde
    dm = (-s.m + float(np.exp(s.y).sum())) / ts.tau_s
    dr = (-s.r + s.y - np.log(s.m)) / ts.tau_s
    dw = (-s.w + np.exp(s.r)) / ts.tau
    return NetState(da, db, dy, float(dm), dr, dw)


class _BatchNet:
    """Packed batched rhs for B instances sharing (d_u, n_pi) and timescales."""

    def __init__(self, pis: np.ndarray, costs: np.ndarray, eps: float, ts: Timescales):
        self.pi = pis  # (B, d, n)
        self.cost = costs  # (B, d)
        self.eps = eps
        self.ts = ts
        self.b, self.d, self.n = pis.shape
        self.floor_hits = 0

    def pack(self, states: list[NetState]) -> np.ndarray:
        rows = [np.concatenate([s.a, s.b, s.y, [s.m], s.r, s.w]) for s in states]
        return np.stack(rows)

    def unpack(self, x: np.ndarray, i: int) -> NetState:
        d, n = self.d, self.n
        a = x[i, :d]
        b = x[i, d : 2 * d]
        y = x[i, 2 * d : 2 * d + n]
        m = float(x[i, 2 * d + n])
        r = x[i, 2 * d + n + 1 : 2 * d + 2 * n + 1]
        w = x[i, 2 * d + 2 * n + 1 :]
        return NetState(a, b, y, m, r, w)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        d, n, ts = self.d, self.n, self.ts
        a = x[:, :d]
        b = x[:, d : 2 * d]
        y = x[:, 2 * d : 2 * d + n]
        m = x[:, 2 * d + n : 2 * d + n + 1]
        r = x[:, 2 * d + n + 1 : 2 * d + 2 * n + 1]
        w = x[:, 2 * d + 2 * n + 1 :]
        low_a = a < POSITIVITY_FLOOR
        low_m = m < POSITIVITY_FLOOR
        if low_a.any() or low_m.any():
            self.floor_hits += int(low_a.sum() + low_m.sum())
            a = np.maximum(a, POSITIVITY_FLOOR)
            m = np.maximum(m, POSITIVITY_FLOOR)
        out = np.empty_like(x)
        out[:, :d] = (-a + np.einsum("bdn,bn->bd", self.pi, w)) / ts.tau_g
        out[:, d : 2 * d] = (-b + np.log(a)) / ts.tau_g
        out[:, 2 * d : 2 * d + n] = (
            -self.eps * y - np.einsum("bdn,bd->bn", self.pi, b + self.cost)
        ) / ts.tau_g_tilde
        out[:, 2 * d + n : 2 * d + n + 1] = (-m + np.exp(y).sum(axis=-1, keepdims=True)) / ts.tau_s
        out[:, 2 * d + n + 1 : 2 * d + 2 * n + 1] = (-r + y - np.log(m)) / ts.tau_s
        out[:, 2 * d + 2 * n + 1 :] = (-w + np.exp(r)) / ts.tau
        return out


def _simulate_batch(bn: _BatchNet, x0: np.ndarray, horizon: float, dt: float, record_every: int):
    n_steps = int(round(horizon / dt))
    times, states = [0.0], [x0.copy()]
    x = x0.copy()
    for k in range(1, n_steps + 1):
        k1 = bn.rhs(x)
        k2 = bn.rhs(x + (dt / 2.0) * k1)
        k3 = bn.rhs(x + (dt / 2.0) * k2)
        k4 = bn.rhs(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite circuit state at step {k}", step=k)
        if k % record_every == 0 or k == n_steps:
            times.append(k * dt)
            states.append(x.copy())
    return np.array(times), np.stack(states)


def simulate(
    inst: ObjectiveInstance,
    ts: Timescales,
    s0: NetState | None = None,
    horizon: float = 10.0,
    dt: float | None = None,
    record_every: int = 100,
) -> NetTrajectory:
    """Integrate the circuit with rk4; dt defaults to tau_g/20.

    A step above tau_g/10 would leave the fast unit unresolved and is a
    configuration error.
    """
    if dt is None:
        dt = ts.tau_g / 20.0
    if dt > ts.tau_g / 10.0:
        raise ConfigError(f"dt={dt:.3g} too coarse for tau_g={ts.tau_g:.3g} (need <= tau_g/10)")
    if s0 is None:
        s0 = quasi_steady_state(inst)
    s0.validate()
    bn = _BatchNet(inst.primitives.entries[None], inst.cost[None], inst.epsilon, ts)
    times, xs = _simulate_batch(bn, bn.pack([s0]), horizon, dt, record_every)
    d, n = bn.d, bn.n
    return NetTrajectory(
        times=times,
        a=xs[:, 0, :d],
        b=xs[:, 0, d : 2 * d],
        y=xs[:, 0, 2 * d : 2 * d + n],
        m=xs[:, 0, 2 * d + n],
        r=xs[:, 0, 2 * d + n + 1 : 2 * d + 2 * n + 1],
        w=xs[:, 0, 2 * d + 2 * n + 1 :],
        floor_hits=bn.floor_hits,
    )


def compare_to_gateflow(
    inst: ObjectiveInstance,
    ts: Timescales,
    horizon: float = 3.0,
    burn_in: float = 0.0,
    dt: float | None = None,
) -> float:
    """sup over t >= burn_in of ||w_net(t) - w_flow(t)||_inf on a shared grid.

    Both systems start from uniform weights (the circuit on its
    quasi-steady manifold), so the reported deviation is the tracking lag,
    which shrinks as the timescale ratios shrink.
    """
    if dt is None:
        dt = ts.tau_g / 20.0
    record_every = max(1, int(round((ts.tau / 50.0) / dt)))
    net = simulate(inst, ts, horizon=horizon, dt=dt, record_every=record_every)
    cfg = FlowConfig(tau=ts.tau, dt=dt * record_every, horizon=horizon, record_every=1)
    n = inst.n_primitives
    w = np.full((1, n), 1.0 / n)
    dev = 0.0
    idx = 0
    rhs = lambda t, wv: flow_rhs(inst, cfg, wv)
    for k, t, wv in _integrate_batch(rhs, w, cfg):
        if idx < len(net.times) and abs(net.times[idx] - t) < 1e-9:
            if t >= burn_in:
                dev = max(dev, float(np.abs(net.w[idx] - wv[0]).max()))
            idx += 1
    return dev


def steady_state_gap(inst: ObjectiveInstance, ts: Timescales, horizon: float = 12.0) -> float:
    """||w_net(horizon) - w*||_inf against the equilibrium solver."""
    traj = simulate(inst, ts, horizon=horizon, record_every=1000)
    w_star = solve_equilibrium(inst)
    return float(np.abs(traj.w[-1] - w_star).max())


def export_net_csv(traj: NetTrajectory, path) -> None:
    """CSV: t,a_1..a_du,b_1..b_du,y_1..y_npi,m,r_1..r_npi,w_1..w_npi."""
    d = traj.a.shape[1]
    n = traj.y.shape[1]
    cols = (
        ["t"]
        + [f"a_{i+1}" for i in range(d)]
        + [f"b_{i+1}" for i in range(d)]
        + [f"y_{i+1}" for i in range(n)]
        + ["m"]
        + [f"r_{i+1}" for i in range(n)]
        + [f"w_{i+1}" for i in range(n)]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i, t in enumerate(traj.times):
            row = np.concatenate(
                [[t], traj.a[i], traj.b[i], traj.y[i], [traj.m[i]], traj.r[i], traj.w[i]]
            )
            fh.write(",".join(format(x, ".17g") for x in row) + "\n")
