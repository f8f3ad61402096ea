"""Independent brute-force verifiers: lattice search, projected gradient,
finite differences, and the definition-based prox.

These are first-principles implementations used to certify the solver;
they never run in the hot path.  Lattice enumeration streams bounded-size
chunks so memory stays flat even for ~5e7-point grids, and the minimum
reduction is order-independent (ties broken by lexicographic lattice
order).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .objective import ObjectiveInstance, grad_F, total_objective
from .simplex import entropy_rows

_CHUNK = 200_000


@dataclass(frozen=True)
class GridSpec:
    """Simplex lattice: compositions of round(1/resolution) into n parts."""

    resolution: float
    dimension: int
    max_points: float = 1e7

    def __post_init__(self):
        if not (0 < self.resolution < 1):
            raise ValueError("resolution must be in (0, 1)")
        if not (1 <= self.dimension <= 4):
            raise ValueError("dimension must be between 1 and 4")
        if self.n_points > self.max_points:
            raise ValueError(
                f"lattice has {self.n_points:.3g} points, above the cap {self.max_points:.3g}"
            )

    @property
    def levels(self) -> int:
        return round(1.0 / self.resolution)

    @property
    def n_points(self) -> int:
        m, n = self.levels, self.dimension
        return math.comb(m + n - 1, n - 1)


def worker_count() -> int:
    """Worker cap from GATEMOD_THREADS (0 or unset = auto)."""
    raw = os.environ.get("GATEMOD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"GATEMOD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("GATEMOD_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _lattice_chunks(grid: GridSpec):
    """Yield lattice points (as float arrays summing to 1) in lex order."""
    m, n = grid.levels, grid.dimension
    if n == 1:
        yield np.array([[1.0]])
        return
    if n == 2:
        i = np.arange(m + 1)
        for start in range(0, m + 1, _CHUNK):
            blk = i[start : start + _CHUNK]
            yield np.column_stack([blk, m - blk]) / m
        return
    # n in {3, 4}: iterate the leading coordinate(s), vectorize the last two.
    buf = []
    size = 0
    lead_shape = (m + 1,) if n == 3 else None

    def flush():
        nonlocal buf, size
        if buf:
            yield_val = np.concatenate(buf, axis=0)
            buf = []
            size = 0
            return yield_val
        return None

    heads = [(i,) for i in range(m + 1)] if n == 3 else [
        (i, j) for i in range(m + 1) for j in range(m - i + 1)
    ]
    for head in heads:
        used = sum(head)
        j = np.arange(m - used + 1)
        block = np.empty((j.size, n))
        for k, h in enumerate(head):
            block[:, k] = h
        block[:, n - 2] = j
        block[:, n - 1] = m - used - j
        buf.append(block)
        size += j.size
        if size >= _CHUNK:
            out = flush()
            if out is not None:
                yield out / m
    out = flush()
    if out is not None:
        yield out / m


def grid_search_simplex(inst: ObjectiveInstance, grid: GridSpec):
    """Exhaustive minimum of the total objective over the simplex lattice.

    Returns (w_best, value).  Order-independent: the first minimizer in
    lexicographic lattice order wins ties.
    """
    if grid.dimension != inst.n_primitives:
        raise ValueError("grid dimension must match the number of primitives")
    best_val = np.inf
    best_w = None
    for chunk in _lattice_chunks(grid):
        vals = total_objective(inst, chunk)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = float(vals[k])
            best_w = chunk[k].copy()
    return best_w, best_val


def project_simplex(x) -> np.ndarray:
    """Euclidean projection onto the simplex (sort-and-threshold)."""
    x = np.asarray(x, dtype=float)
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, x.size + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(x - theta, 0.0)


def projected_gradient(inst: ObjectiveInstance, step: float, iters: int, w0) -> np.ndarray:
    """Projected gradient descent on the total objective.

    The entropy term is handled through its interior gradient, so iterates
    are nudged off exact zeros before each gradient evaluation.  Raises on
    sustained objective increase (divergence guard).
    """
    w = np.asarray(w0, dtype=float).copy()
    last = np.inf
    bad = 0
    for _ in range(iters):
        wi = np.maximum(w, 1e-12)
        wi = wi / wi.sum()
        g = grad_F(inst, wi) + inst.epsilon * (1.0 + np.log(wi))
        w = project_simplex(w - step * g)
        val = total_objective(inst, np.maximum(w, 0.0) / max(w.sum(), 1e-300))
        if val > last + 1e-12:
            bad += 1
            if bad >= 100:
                raise RuntimeError("projected gradient diverged (objective rose 100 steps)")
        else:
            bad = 0
            last = min(last, val)
    return w


def finite_difference_gradient(f, w, h: float = 1e-6) -> np.ndarray:
    """Central differences (f(w+h e_i) - f(w-h e_i)) / 2h at an interior point."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 2 * h) :
        raise ValueError("point too close to the simplex boundary for central differences")
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2.0 * h)
    return g


def prox_by_definition(x, grid: GridSpec) -> np.ndarray:
    """Minimize sum_i z_i ln z_i - x.z over the simplex lattice."""
    x = np.asarray(x, dtype=float)
    if grid.dimension != x.size:
        raise ValueError("grid dimension must match the input length")
    if grid.dimension > 3:
        raise ValueError("definition-based prox oracle supports dimension <= 3")
    best_val = np.inf
    best_z = None
    for chunk in _lattice_chunks(grid):
        vals = -entropy_rows(chunk) - chunk @ x
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = float(vals[k])
            best_z = chunk[k].copy()
    return best_z


def kkt_residual(inst: ObjectiveInstance, w) -> float:
    """Spread of grad_F(w) + eps(1 + ln w) across coordinates.

    At the optimum the stationarity condition makes all coordinates equal
    to a common multiplier, so the max-min spread measures KKT violation.
    """
    w = np.asarray(w, dtype=float)
    g = grad_F(inst, w) + inst.epsilon * (1.0 + np.log(np.maximum(w, 1e-300)))
    return float(g.max() - g.min())
