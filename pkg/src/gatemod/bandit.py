"""Two-armed bandit harness: Kalman beliefs, behavioral primitives, the
gated per-trial policy, probit baselines, likelihood scoring, synthetic
data, and CSV ingestion.

Belief updates follow the classic Kalman form with learning rate
alpha = s^2/(s^2 + tau_obs^2).  The reference equations apply the update
literally to the spread s (``spread_semantics='std'``); the standard
posterior-variance reading updates s^2 instead (``'variance'``).  Both are
available; the spread stored in Belief.s is always the quantity the
primitive and policy formulas consume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from .errors import ConfigError
from .flow import solve_equilibrium_batch
from .objective import PrimitiveMatrix

GATEMOD_EPSILON = 0.01
FROZEN_ARM_SPREAD = 1e-3
_PROB_FLOOR = 1e-300
_PROB_CEIL = 1.0 - 1e-16


@dataclass(frozen=True)
class Belief:
    """Posterior mean and spread per arm (spread strictly positive)."""

    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if mu.shape != s.shape or mu.ndim != 1:
            raise ValueError("mu and s must be 1-D arrays of equal length")
        if np.any(s <= 0.0):
            raise ValueError("belief spread must stay positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "s", s)


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str  # 'exp1' | 'exp2'
    s0_sq: float
    tau_obs_sq: float = 10.0
    blocks: int = 20
    trials_per_block: int = 10
    spread_semantics: str = "std"

    def __post_init__(self):
        if self.variant not in ("exp1", "exp2"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.spread_semantics not in ("std", "variance"):
            raise ConfigError(f"unknown spread semantics {self.spread_semantics!r}")
        if min(self.s0_sq, self.tau_obs_sq) <= 0:
            raise ConfigError("variances must be positive")
        if min(self.blocks, self.trials_per_block) < 1:
            raise ConfigError("blocks and trials_per_block must be positive")


def experiment_config(variant: str, spread_semantics: str = "std") -> ExperimentConfig:
    """Defaults: exp1 has one stochastic arm (s0^2=10) and one deterministic
    zero arm; exp2 has two stochastic arms (s0^2=100).  tau_obs^2=10, 20
    blocks of 10 trials."""
    if variant == "exp1":
        return ExperimentConfig("exp1", s0_sq=10.0, spread_semantics=spread_semantics)
    if variant == "exp2":
        return ExperimentConfig("exp2", s0_sq=100.0, spread_semantics=spread_semantics)
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class TrialRecord:
    subject_id: int
    block: int
    trial: int
    choice: int  # arm index in {1, 2}
    reward: float

    def __post_init__(self):
        if self.choice not in (1, 2):
            raise ValueError(f"choice must be 1 or 2, got {self.choice}")


def initial_belief(config: ExperimentConfig) -> Belief:
    """Prior: zero means; spread sqrt(s0^2) for stochastic arms.  In exp1
    the deterministic second arm is pinned at (0, 1e-3)."""
    s0 = math.sqrt(config.s0_sq)
    if config.variant == "exp1":
        return Belief(np.zeros(2), np.array([s0, FROZEN_ARM_SPREAD]))
    return Belief(np.zeros(2), np.array([s0, s0]))


def kalman_update(belief: Belief, arm: int, reward: float, config: ExperimentConfig) -> Belief:
    """Update the chosen arm only: alpha = s^2/(s^2+tau^2), mu += alpha (r - mu),
    and s shrinks by (1-alpha) ('std') or sqrt(1-alpha) ('variance')."""
    if arm not in (1, 2):
        raise ValueError("arm must be 1 or 2")
    i = arm - 1
    mu = belief.mu.copy()
    s = belief.s.copy()
    alpha = s[i] ** 2 / (s[i] ** 2 + config.tau_obs_sq)
    mu[i] = mu[i] + alpha * (reward - mu[i])
    if config.spread_semantics == "std":
        s[i] = s[i] - alpha * s[i]
    else:
        s[i] = s[i] * math.sqrt(1.0 - alpha)
    return Belief(mu, np.maximum(s, 1e-12))


def _frozen_arm(config: ExperimentConfig) -> int | None:
    return 2 if config.variant == "exp1" else None


def replay_beliefs(trials: list[TrialRecord], config: ExperimentConfig) -> list[Belief]:
    """Belief *before* each trial, resetting at block boundaries; the exp1
    deterministic arm never updates."""
    out = []
    belief = initial_belief(config)
    current_block = None
    frozen = _frozen_arm(config)
    for rec in trials:
        if rec.block != current_block:
            belief = initial_belief(config)
            current_block = rec.block
        out.append(belief)
        if rec.choice != frozen:
            belief = kalman_update(belief, rec.choice, rec.reward, config)
    return out


def primitives(belief: Belief) -> PrimitiveMatrix:
    """N_arms x 3 primitive matrix: exploitation (0.99 on the argmax mean,
    ties to the lowest index), uncertainty seeking (s_i / sum s), risk
    aversion (softmax of -s)."""
    n = belief.mu.size
    if n < 2:
        raise ValueError("need at least two arms")
    cols = np.empty((n, 3))
    best = int(np.argmax(belief.mu))  # argmax takes the lowest index on ties
    cols[:, 0] = 0.01 / (n - 1)
    cols[best, 0] = 0.99
    cols[:, 1] = belief.s / belief.s.sum()
    z = np.exp(-belief.s + belief.s.min())
    cols[:, 2] = z / z.sum()
    return PrimitiveMatrix(cols, pi_min=float(cols.min()), pi_max=float(cols.max()))


def norm_cdf(x) -> np.ndarray | float:
    """Standard normal CDF (erf-based, exact to double precision)."""
    return ndtr(x)


def hybrid_policy(belief: Belief, gamma: float, beta: float) -> float:
    """P(arm 1) = Phi(gamma (s1 - s2) + beta (mu1 - mu2)/sqrt(s1^2 + s2^2))."""
    mu, s = belief.mu, belief.s
    x = gamma * (s[0] - s[1]) + beta * (mu[0] - mu[1]) / math.sqrt(s[0] ** 2 + s[1] ** 2)
    return float(np.clip(ndtr(x), _PROB_FLOOR, _PROB_CEIL))


def baseline_policy(kind: str, belief: Belief, params: dict) -> float:
    """P(arm 1) under the probit baselines.

    ucb:      Phi(beta ((mu1 + gamma s1) - (mu2 + gamma s2)))
    thompson: Phi((mu1 - mu2)/sqrt(s1^2 + s2^2))
    value:    Phi(beta (mu1 - mu2))
    """
    mu, s = belief.mu, belief.s
    if kind == "ucb":
        x = params["beta"] * ((mu[0] + params["gamma"] * s[0]) - (mu[1] + params["gamma"] * s[1]))
    elif kind == "thompson":
        x = (mu[0] - mu[1]) / math.sqrt(s[0] ** 2 + s[1] ** 2)
    elif kind == "value":
        x = params["beta"] * (mu[0] - mu[1])
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return float(np.clip(ndtr(x), _PROB_FLOOR, _PROB_CEIL))


def gatemod_trial_policy(
    belief: Belief, hybrid_params: tuple[float, float], epsilon: float = GATEMOD_EPSILON
):
    """(policy over arms, weights over the three primitives) for one trial.

    The generative action model is the hybrid policy itself, so the cost is
    -ln q_u per arm (the transition-model KL cancels); the weights solve
    the gated objective at the given temperature.
    """
    gamma, beta = hybrid_params
    q1 = hybrid_policy(belief, gamma, beta)
    q = np.array([q1, 1.0 - q1])
    pm = primitives(belief)
    cost = -np.log(np.clip(q, _PROB_FLOOR, None))
    w, res = solve_equilibrium_batch(pm.entries[None], cost[None], epsilon, tol=1e-10)
    if res[0] > 1e-8:
        raise RuntimeError(f"trial gating solve stalled at residual {res[0]:.3g}")
    policy = pm.entries @ w[0]
    policy = np.maximum(policy, 0.0)
    return policy / policy.sum(), w[0]


def log_likelihood(policy_sequence, choices) -> float:
    """Sum of ln P(chosen arm); -inf if any chosen-arm probability is zero."""
    policies = np.asarray(policy_sequence, dtype=float)
    choices = np.asarray(choices, dtype=int)
    if policies.shape[0] != choices.size:
        raise ValueError("policy and choice sequences differ in length")
    probs = policies[np.arange(choices.size), choices - 1]
    if np.any(probs <= 0.0):
        return float("-inf")
    return float(np.log(probs).sum())


def bic(k_params: int, n_obs: int, loglik: float) -> float:
    return k_params * math.log(n_obs) - 2.0 * loglik


# -- fitting -----------------------------------------------------------------


def _choice_features(trials, config):
    """Per-trial (ds, z, sign): ds = s1-s2, z = (mu1-mu2)/sqrt(s1^2+s2^2),
    sign +1 when arm 1 was chosen."""
    beliefs = replay_beliefs(trials, config)
    ds = np.array([b.s[0] - b.s[1] for b in beliefs])
    z = np.array([(b.mu[0] - b.mu[1]) / math.sqrt(b.s[0] ** 2 + b.s[1] ** 2) for b in beliefs])
    dmu = np.array([b.mu[0] - b.mu[1] for b in beliefs])
    sign = np.array([1.0 if t.choice == 1 else -1.0 for t in trials])
    return ds, z, dmu, sign


def _probit_loglik(x, sign):
    p = np.clip(ndtr(sign * x), _PROB_FLOOR, _PROB_CEIL)
    return float(np.log(p).sum())


def _grid_then_polish(loglik_fn, n_params, grid_step=0.25, bound=5.0):
    """Coarse grid over [-bound, bound]^n then Nelder-Mead refinement."""
    axis = np.arange(-bound, bound + grid_step / 2, grid_step)
    if n_params == 0:
        return np.empty(0), loglik_fn(np.empty(0))
    if n_params == 1:
        vals = [loglik_fn(np.array([a])) for a in axis]
        best = np.array([axis[int(np.argmax(vals))]])
    else:
        best, best_val = None, -np.inf
        for a in axis:
            for b in axis:
                v = loglik_fn(np.array([a, b]))
                if v > best_val:
                    best, best_val = np.array([a, b]), v
    res = optimize.minimize(
        lambda p: -loglik_fn(p),
        best,
        method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 2000},
    )
    return res.x, float(-res.fun)


def fit_hybrid(trials, config) -> tuple[float, float, float]:
    """Maximum-likelihood (gamma, beta) of the hybrid model on one
    subject's trials, beliefs replayed via the Kalman filter."""
    if not trials:
        raise ValueError("need at least one trial")
    ds, z, _, sign = _choice_features(trials, config)
    fn = lambda p: _probit_loglik(p[0] * ds + p[1] * z, sign)
    (gamma, beta), loglik = _grid_then_polish(fn, 2)
    return float(gamma), float(beta), loglik


def fit_baseline(kind: str, trials, config):
    """Fit a probit baseline; returns (params dict, loglik, n_params)."""
    ds, z, dmu, sign = _choice_features(trials, config)
    if kind == "thompson":
        return {}, _probit_loglik(z, sign), 0
    if kind == "value":
        fn = lambda p: _probit_loglik(p[0] * dmu, sign)
        (beta,), loglik = _grid_then_polish(fn, 1)
        return {"beta": float(beta)}, loglik, 1
    if kind == "ucb":
        fn = lambda p: _probit_loglik(p[1] * (dmu + p[0] * ds), sign)
        (gamma, beta), loglik = _grid_then_polish(fn, 2)
        return {"gamma": float(gamma), "beta": float(beta)}, loglik, 2
    raise ValueError(f"unknown baseline {kind!r}")


def _gatemod_policies(trials, config, gamma, beta, epsilon):
    """Batched per-trial gated policies and weights, (T, 2) and (T, 3)."""
    beliefs = replay_beliefs(trials, config)
    t = len(beliefs)
    pis = np.empty((t, 2, 3))
    costs = np.empty((t, 2))
    for i, b in enumerate(beliefs):
        pis[i] = primitives(b).entries
        q1 = hybrid_policy(b, gamma, beta)
        costs[i] = -np.log(np.clip([q1, 1.0 - q1], _PROB_FLOOR, None))
    w, res = solve_equilibrium_batch(pis, costs, epsilon, tol=1e-10)
    if res.max() > 1e-8:
        raise RuntimeError(f"gating solve stalled (worst residual {res.max():.3g})")
    pol = np.einsum("tdk,tk->td", pis, w)
    pol = np.maximum(pol, 0.0)
    pol /= pol.sum(axis=1, keepdims=True)
    return pol, w


def fit_gatemod(trials, config, epsilon: float = GATEMOD_EPSILON):
    """Fit (gamma, beta) of the embedded generative model by maximizing the
    gated policy's likelihood (coarser grid; each evaluation solves every
    trial's instance in one batch)."""
    choices = np.array([t.choice for t in trials])

    def fn(p):
        pol, _ = _gatemod_policies(trials, config, p[0], p[1], epsilon)
        return log_likelihood(pol, choices)

    (gamma, beta), loglik = _grid_then_polish(fn, 2, grid_step=0.5)
    return {"gamma": float(gamma), "beta": float(beta)}, loglik, 2


def gatemod_weights_series(trials, config, gamma, beta, epsilon=GATEMOD_EPSILON) -> np.ndarray:
    """(T, 3) gating weights replayed along a subject's trials."""
    _, w = _gatemod_policies(trials, config, gamma, beta, epsilon)
    return w


# -- synthetic data ----------------------------------------------------------


def _policy_prob(kind: str, belief: Belief, params, epsilon) -> float:
    if kind == "hybrid":
        return hybrid_policy(belief, params["gamma"], params["beta"])
    if kind == "gatemod":
        pol, _ = gatemod_trial_policy(belief, (params["gamma"], params["beta"]), epsilon)
        return float(pol[0])
    return baseline_policy(kind, belief, params)


def synthesize_experiment(
    config: ExperimentConfig,
    policy_kind: str,
    params: dict,
    seed: int,
    subject_id: int = 1,
    epsilon: float = GATEMOD_EPSILON,
) -> list[TrialRecord]:
    """Simulate one subject: per block draw latent means (exp1: arm 1 from
    the prior, arm 2 fixed at zero reward; exp2: both drawn), run the named
    policy with replayed beliefs, rewards Normal(latent, tau_obs^2).
    Deterministic per (seed, subject)."""
    records = []
    for block in range(1, config.blocks + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, subject_id, block]))
        if config.variant == "exp1":
            latent = np.array([rng.normal(0.0, math.sqrt(config.s0_sq)), 0.0])
        else:
            latent = rng.normal(0.0, math.sqrt(config.s0_sq), size=2)
        belief = initial_belief(config)
        frozen = _frozen_arm(config)
        for trial in range(1, config.trials_per_block + 1):
            p1 = _policy_prob(policy_kind, belief, params, epsilon)
            choice = 1 if rng.uniform() < p1 else 2
            if config.variant == "exp1" and choice == 2:
                reward = 0.0
            else:
                reward = float(rng.normal(latent[choice - 1], math.sqrt(config.tau_obs_sq)))
            records.append(TrialRecord(subject_id, block, trial, choice, reward))
            if choice != frozen:
                belief = kalman_update(belief, choice, reward, config)
    return records


# -- CSV ---------------------------------------------------------------------

CSV_COLUMNS = ("subject", "block", "trial", "choice", "reward")


def ingest_csv(path) -> list[TrialRecord]:
    """Read `subject,block,trial,choice,reward` rows (header required);
    malformed rows raise ConfigError naming the line."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty file, expected header {','.join(CSV_COLUMNS)}")
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                subject = int(row["subject"])
                block = int(row["block"])
                trial = int(row["trial"])
                choice = int(row["choice"])
                reward = float(row["reward"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{line}: non-numeric field ({exc})") from None
            if choice not in (1, 2):
                raise ConfigError(f"{path}:{line}: choice must be 1 or 2, got {choice}")
            records.append(TrialRecord(subject, block, trial, choice, reward))
    return records


def write_trials_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.subject_id, r.block, r.trial, r.choice, format(r.reward, ".17g")])


def group_by_subject(records) -> dict[int, list[TrialRecord]]:
    out: dict[int, list[TrialRecord]] = {}
    for r in records:
        out.setdefault(r.subject_id, []).append(r)
    return out
