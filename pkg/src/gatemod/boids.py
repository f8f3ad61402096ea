"""Flocking simulator where each boid gates separation/alignment/cohesion
primitives through the simplex solver.

Per step and per boid: collect zone neighbors inside the vision cone,
compute the three social forces, turn them into Gaussian action primitives
over a ring of candidate accelerations, score actions against the boid's
generative model (Gaussian KL on the predicted next state), solve the
gating weights, sample an acceleration from the mixed policy, and apply
the second-order update p += v dt, v += u dt with the speed clamp.

Updates are synchronous: every boid reads the same pre-step snapshot.
Action sampling draws from per-(seed, step, boid) streams, so results do
not depend on evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .flow import solve_equilibrium_batch
from .objective import DENSITY_FLOOR, PrimitiveMatrix, primitive_matrix

PRIMITIVE_NAMES = ("sep", "ali", "coh")
WEIGHT_RESIDUAL_TOL = 1e-8
_SPEED_EPS = 1e-12


@dataclass(frozen=True)
class FlockConfig:
    """Simulation parameters; defaults follow the reference experiments."""

    dt: float = 0.05
    n_boids: int = 40
    n_actions: int = 30
    v_max: float = 1.0
    u_max: float = 3.0
    vision_angle: float = 320.0  # degrees
    r_sep: float = 1.0
    r_ali: float = 3.0
    r_coh: float = 12.0
    sigma_sep: float = 0.1  # isotropic primitive covariances (x I_2)
    sigma_ali: float = 0.1
    sigma_coh: float = 0.1
    sigma_p: float = 0.01  # transition covariance (x I_4)
    sigma_q: float = 0.01  # generative covariance (x I_4)
    epsilon: float = 0.5
    tau: float = 1.0
    informed_fraction: float = 0.0
    goal: tuple[float, float] | None = None
    seed: int = 0
    sample_actions: bool = True  # False: apply the mixture-expected action
    init_box_center: tuple[float, float] = (0.0, 0.0)
    init_box_half: float = 2.0
    init_speed_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if not (0.0 < self.r_sep < self.r_ali < self.r_coh):
            raise ConfigError("need 0 < r_sep < r_ali < r_coh")
        if self.dt <= 0 or self.n_boids < 1 or self.n_actions < 1:
            raise ConfigError("dt, n_boids, n_actions must be positive")
        if not (0.0 <= self.informed_fraction <= 1.0):
            raise ConfigError("informed_fraction must lie in [0, 1]")
        if self.informed_fraction > 0 and self.goal is None:
            raise ConfigError("informed boids need a goal position")
        if min(self.sigma_sep, self.sigma_ali, self.sigma_coh, self.sigma_p, self.sigma_q) <= 0:
            raise ConfigError("covariance scales must be positive")

    @property
    def n_informed(self) -> int:
        return math.ceil(self.informed_fraction * self.n_boids)


@dataclass(frozen=True)
class BoidState:
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class FlockState:
    """Positions and velocities of the whole flock, (N, 2) each."""

    positions: np.ndarray
    velocities: np.ndarray

    def boid(self, i: int) -> BoidState:
        return BoidState(self.positions[i].copy(), self.velocities[i].copy())

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class StepDiagnostics:
    coincident_skips: int = 0
    zero_speed_boids: int = 0
    max_weight_residual: float = 0.0


@dataclass(frozen=True)
class ActionGrid:
    """Candidate accelerations; all norms bounded by u_max."""

    actions: np.ndarray  # (d_u, 2)

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        object.__setattr__(self, "actions", a)

    def clamped(self, u_max: float) -> "ActionGrid":
        """Rescale any point past u_max back onto the cap (float rounding)."""
        a = self.actions.copy()
        norms = np.linalg.norm(a, axis=1)
        over = norms > u_max
        if over.any():
            a[over] *= (u_max / norms[over])[:, None]
        return ActionGrid(a)


def action_ring(config: FlockConfig) -> ActionGrid:
    """d_u headings at magnitude u_max; magnitude modulation would have to
    come from the mixture probabilities.  Kept for reference: with the
    default primitive covariance (0.1 I_2) any force center of magnitude
    below ~u_max - 1.4 underflows against every ring point, the column
    floors to uniform, and the gate loses the signal."""
    theta = 2.0 * np.pi * np.arange(config.n_actions) / config.n_actions
    ring = ActionGrid(config.u_max * np.column_stack([np.cos(theta), np.sin(theta)]))
    return ring.clamped(config.u_max)


def action_disk(config: FlockConfig) -> ActionGrid:
    """Default grid: the zero action, an inner ring at 0.4 u_max and a dense
    outer ring at 0.8 u_max (7 + 22 headings for d_u = 30).

    Rationale: with the default primitive covariance (0.1 I_2) a
    single-magnitude ring leaves every moderate-magnitude force center
    more than ~1.4 away from all grid points, the density floors out, the
    column goes uniform, and the gate loses the signal.  This layout keeps
    all three primitives informative for centers anywhere in the disk; the
    dense outer ring also spreads a peaked alignment column over several
    points, and staying inside u_max trims the quadratic action cost every
    peaked column pays, both of which the near-uniform gating regime at
    high polarization is sensitive to."""
    n = config.n_actions
    if n < 8:
        return action_ring(config)
    inner = max(4, round((n - 1) * 0.24))
    outer = n - 1 - inner
    pts = [np.zeros((1, 2))]
    for radius_frac, cnt in ((0.4, inner), (0.8, outer)):
        theta = 2.0 * np.pi * np.arange(cnt) / cnt
        pts.append(
            config.u_max * radius_frac * np.column_stack([np.cos(theta), np.sin(theta)])
        )
    return ActionGrid(np.concatenate(pts, axis=0)).clamped(config.u_max)


def visible_neighbors(i: int, state: FlockState, config: FlockConfig):
    """(sep, ali, coh) index arrays: disjoint annuli intersected with the
    vision cone.  A boid with zero speed sees every neighbor (the cone is
    undefined); a coincident neighbor lands in the separation set and is
    skipped later by the force computation."""
    diff = state.positions - state.positions[i]
    dist = np.linalg.norm(diff, axis=1)
    dist[i] = np.inf  # self is never a neighbor
    v = state.velocities[i]
    speed = np.linalg.norm(v)
    if speed < _SPEED_EPS:
        in_cone = np.ones(state.n, dtype=bool)
    else:
        cos_half = math.cos(math.radians(config.vision_angle) / 2.0)
        with np.errstate(invalid="ignore"):
            cosang = (diff @ v) / (dist * speed)
        in_cone = (cosang >= cos_half) | (dist == 0.0)
    sep = np.nonzero(in_cone & (dist <= config.r_sep))[0]
    ali = np.nonzero(in_cone & (dist > config.r_sep) & (dist <= config.r_ali))[0]
    coh = np.nonzero(in_cone & (dist > config.r_ali) & (dist <= config.r_coh))[0]
    return sep, ali, coh


def g_modulation(d: float, config: FlockConfig) -> float:
    """Distance gain on the social forces: decays over the separation zone,
    flat across alignment, decays to zero at the cohesion edge.  As written
    the formula is discontinuous at r_sep (left limit 0, right value u_max);
    ties at r_sep take the first branch."""
    if d < 0.0 or d > config.r_coh:
        raise ValueError(f"distance {d} outside [0, r_coh]")
    if d <= config.r_sep:
        return config.u_max * (1.0 - d / config.r_sep)
    if d <= config.r_ali:
        return config.u_max
    return config.u_max * (config.r_coh - d) / (config.r_coh - config.r_ali)


def _g_vec(d: np.ndarray, config: FlockConfig) -> np.ndarray:
    out = np.where(
        d <= config.r_sep,
        config.u_max * (1.0 - d / config.r_sep),
        np.where(
            d <= config.r_ali,
            config.u_max,
            config.u_max * (config.r_coh - d) / (config.r_coh - config.r_ali),
        ),
    )
    return out


def social_forces(i: int, state: FlockState, config: FlockConfig, diag: StepDiagnostics | None = None):
    """(u_sep, u_ali, u_coh) centers.  Empty separation/cohesion sets give a
    zero force; an empty alignment set keeps the current heading at full
    gain.  Neighbors at exactly zero distance are skipped (counted)."""
    sep, ali, coh = visible_neighbors(i, state, config)
    p_i = state.positions[i]
    v_i = state.velocities[i]

    def _distance_force(idx, sign):
        diff = state.positions[idx] - p_i
        d = np.linalg.norm(diff, axis=1)
        ok = d > 0.0
        if diag is not None:
            diag.coincident_skips += int((~ok).sum())
        if not ok.any():
            return np.zeros(2)
        units = diff[ok] / d[ok, None]
        return sign * (_g_vec(d[ok], config)[:, None] * units).mean(axis=0)

    u_sep = _distance_force(sep, -1.0) if sep.size else np.zeros(2)
    u_coh = _distance_force(coh, 1.0) if coh.size else np.zeros(2)
    if ali.size:
        vel = state.velocities[ali]
        speeds = np.linalg.norm(vel, axis=1)
        ok = speeds > 0.0
        if diag is not None:
            diag.zero_speed_boids += int((~ok).sum())
        if ok.any():
            d = np.linalg.norm(state.positions[ali][ok] - p_i, axis=1)
            u_ali = (_g_vec(d, config)[:, None] * vel[ok] / speeds[ok, None]).mean(axis=0)
        else:
            u_ali = np.zeros(2)
    else:
        speed = np.linalg.norm(v_i)
        u_ali = config.u_max * v_i / speed if speed > _SPEED_EPS else np.zeros(2)
    return u_sep, u_ali, u_coh


def primitive_matrix_for_boid(
    i: int, state: FlockState, grid: ActionGrid, config: FlockConfig,
    diag: StepDiagnostics | None = None,
) -> PrimitiveMatrix:
    """Columns: normalized Gaussian densities over the action grid centered
    at the three social forces (floored for full support)."""
    centers = social_forces(i, state, config, diag)
    sigmas = (config.sigma_sep, config.sigma_ali, config.sigma_coh)
    cols = np.empty((grid.actions.shape[0], 3))
    for a, (center, sig) in enumerate(zip(centers, sigmas)):
        d2 = ((grid.actions - center) ** 2).sum(axis=1)
        cols[:, a] = np.exp(-0.5 * d2 / sig)
    return primitive_matrix(cols, floor=DENSITY_FLOOR)


def _predicted_states(i: int, state: FlockState, grid: ActionGrid, config: FlockConfig) -> np.ndarray:
    """Mean next state [p + v dt, v + u dt] per candidate action, (d_u, 4)."""
    p = state.positions[i] + state.velocities[i] * config.dt
    v = state.velocities[i] + grid.actions * config.dt
    out = np.empty((grid.actions.shape[0], 4))
    out[:, :2] = p
    out[:, 2:] = v
    return out


def generative_center(i: int, state: FlockState, config: FlockConfig, model: str) -> np.ndarray:
    """Mean of the generative Gaussian over the next state.

    polarization: [mean position of cohesion neighbors, mean velocity of
    alignment neighbors]; a missing set falls back to the boid's own
    zero-acceleration prediction for that block.
    goal: [goal position, unit vector from the boid to the goal].
    """
    if model == "goal":
        if config.goal is None:
            raise ConfigError("goal model requires a goal position")
        goal = np.asarray(config.goal, dtype=float)
        to_goal = goal - state.positions[i]
        norm = np.linalg.norm(to_goal)
        heading = to_goal / norm if norm > 0 else np.zeros(2)
        return np.concatenate([goal, heading])
    if model != "polarization":
        raise ConfigError(f"unknown generative model {model!r}")
    _, ali, coh = visible_neighbors(i, state, config)
    pos = (
        state.positions[coh].mean(axis=0)
        if coh.size
        else state.positions[i] + state.velocities[i] * config.dt
    )
    vel = state.velocities[ali].mean(axis=0) if ali.size else state.velocities[i]
    return np.concatenate([pos, vel])


def generative_cost(
    i: int,
    state: FlockState,
    grid: ActionGrid,
    config: FlockConfig,
    model: str = "polarization",
    action_penalty=None,
) -> np.ndarray:
    """Per-action KL between the predicted transition Gaussian and the
    generative Gaussian.  With the default equal covariances this is half
    the scaled squared distance between the means; the -ln(q_u) term is a
    constant for the uniform reference policy and is omitted.

    ``action_penalty(i, state, grid) -> (d_u,)`` injects an extra
    state/action cost (e.g. collision-avoidance shaping).
    """
    mu_p = _predicted_states(i, state, grid, config)
    mu_q = generative_center(i, state, config, model)
    diff = mu_p - mu_q
    if config.sigma_p == config.sigma_q:
        c = 0.5 * (diff**2).sum(axis=1) / config.sigma_q
    else:
        ratio = config.sigma_p / config.sigma_q
        const = 0.5 * (4.0 * ratio - 4.0 + 4.0 * math.log(1.0 / ratio))
        c = const + 0.5 * (diff**2).sum(axis=1) / config.sigma_q
    if action_penalty is not None:
        c = c + np.asarray(action_penalty(i, state, grid), dtype=float)
    return c


def init_flock(config: FlockConfig) -> FlockState:
    """Random positions in a box, random headings, speeds in the given range."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    half = config.init_box_half
    pos = rng.uniform(-half, half, size=(config.n_boids, 2)) + np.asarray(config.init_box_center)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=config.n_boids)
    lo, hi = config.init_speed_range
    speed = rng.uniform(lo, hi, size=config.n_boids)
    vel = speed[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])
    return FlockState(pos, vel)


def step_flock(
    state: FlockState,
    config: FlockConfig,
    step_index: int,
    grid: ActionGrid | None = None,
    action_penalty=None,
) -> tuple[FlockState, np.ndarray, StepDiagnostics]:
    """One synchronous step.  Returns (next state, (N, 3) gating weights,
    diagnostics).  Aborts with the boid index if any per-boid solve fails.
    """
    if grid is None:
        grid = action_disk(config)
    n = state.n
    diag = StepDiagnostics()
    pis = np.empty((n, grid.actions.shape[0], 3))
    costs = np.empty((n, grid.actions.shape[0]))
    n_inf = config.n_informed
    for i in range(n):
        pis[i] = primitive_matrix_for_boid(i, state, grid, config, diag).entries
        model = "goal" if i < n_inf else "polarization"
        costs[i] = generative_cost(i, state, grid, config, model, action_penalty)
    weights, residuals = solve_equilibrium_batch(pis, costs, config.epsilon, tol=1e-10)
    bad = np.nonzero(residuals > WEIGHT_RESIDUAL_TOL)[0]
    if bad.size:
        raise NumericalError(
            f"gating solve failed for boid {bad[0]} at step {step_index}",
            step=step_index,
            residual=float(residuals[bad[0]]),
        )
    diag.max_weight_residual = float(residuals.max())
    policies = np.einsum("ndk,nk->nd", pis, weights)
    policies = np.maximum(policies, 0.0)
    policies /= policies.sum(axis=1, keepdims=True)
    if config.sample_actions:
        u = np.empty((n, 2))
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, step_index + 1, i]))
            j = int(np.searchsorted(np.cumsum(policies[i]), rng.uniform()))
            u[i] = grid.actions[min(j, grid.actions.shape[0] - 1)]
    else:
        u = policies @ grid.actions
    new_pos = state.positions + state.velocities * config.dt
    new_vel = state.velocities + u * config.dt
    speed = np.linalg.norm(new_vel, axis=1)
    over = speed > config.v_max
    if over.any():
        new_vel[over] *= (config.v_max / speed[over])[:, None]
    return FlockState(new_pos, new_vel), weights, diag


def polarization(state: FlockState, diag: StepDiagnostics | None = None) -> float:
    """Norm of the mean unit-velocity vector; zero-speed boids excluded."""
    speeds = np.linalg.norm(state.velocities, axis=1)
    ok = speeds > _SPEED_EPS
    if diag is not None:
        diag.zero_speed_boids += int((~ok).sum())
    if not ok.any():
        return 0.0
    units = state.velocities[ok] / speeds[ok, None]
    return float(np.linalg.norm(units.mean(axis=0)))


def goal_distance(state: FlockState, goal) -> float:
    """Mean distance of the flock from the goal point."""
    goal = np.asarray(goal, dtype=float)
    return float(np.linalg.norm(state.positions - goal, axis=1).mean())


@dataclass
class FlockRun:
    states: list[FlockState] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    polarization: list[float] = field(default_factory=list)
    goal_distance: list[float] = field(default_factory=list)


def simulate_flock(config: FlockConfig, n_steps: int, action_penalty=None) -> FlockRun:
    """Run the flock for ``n_steps``; records state, weights, and metrics
    per step (step 0 metrics are from the initial state, weights from the
    first solve)."""
    grid = action_disk(config)
    state = init_flock(config)
    run = FlockRun()
    for k in range(n_steps):
        run.states.append(state)
        run.polarization.append(polarization(state))
        run.goal_distance.append(
            goal_distance(state, config.goal) if config.goal is not None else float("nan")
        )
        state, weights, _ = step_flock(state, config, k, grid, action_penalty)
        run.weights.append(weights)
    run.states.append(state)
    run.polarization.append(polarization(state))
    run.goal_distance.append(
        goal_distance(state, config.goal) if config.goal is not None else float("nan")
    )
    return run
