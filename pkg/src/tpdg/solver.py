"""Conic solve of the landing SOCP: fixed horizon, free horizon, reduced."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import clarabel
import numpy as np
import scipy.sparse as sp

from .lcvx import (
    DiscretizedSocp,
    FuelExhaustionError,
    Strategy,
    build_socp,
    check_feasibility,
    max_burn_time,
    reduce_problem,
)
from .problem import MissionConfig, ProblemParameters

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"

_STATUS = {
    "Solved": OPTIMAL,
    "AlmostSolved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostDualInfeasible": UNBOUNDED,
}


@dataclass
class SolveResult:
    status: str
    x: Optional[np.ndarray]
    cost: float
    t_f: float
    wall_time: float  # ms
    N: int
    message: str = ""
    iterations: int = 0
    inner_times: list = field(default_factory=list)
    inner_t: list = field(default_factory=list)  # horizons tried by the line search

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def trajectory(self) -> dict:
        if self.x is None:
            return {}
        X = self.x.reshape(self.N, -1)
        return {"r": X[:, 0:3], "v": X[:, 3:6], "z": X[:, 6], "u": X[:, 7:10], "xi": X[:, 10]}

    def final_mass(self) -> float:
        return float(math.exp(self.trajectory["z"][-1]))

    def summary(self) -> dict:
        return {
            "status": self.status,
            "cost": self.cost if math.isfinite(self.cost) else None,
            "t_f": self.t_f,
            "wall_time_ms": self.wall_time,
            "iterations": self.iterations,
            "message": self.message,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)

    def write_csv(self, path) -> None:
        if self.x is None:
            raise ValueError("no trajectory to write")
        tr = self.trajectory
        t = np.linspace(0.0, self.t_f, self.N)
        cols = ["k", "t", "rx", "ry", "rz", "vx", "vy", "vz", "z", "mass", "ux", "uy", "uz", "xi"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.N):
                row = [k, t[k], *tr["r"][k], *tr["v"][k], tr["z"][k], math.exp(tr["z"][k]), *tr["u"][k], tr["xi"][k]]
                fh.write(",".join(repr(float(v)) if i else str(v) for i, v in enumerate(row)) + "\n")


def _failed(status: str, N: int, t_f: float, start: float, message: str) -> SolveResult:
    cost = math.inf
    return SolveResult(status, None, cost, t_f, (time.perf_counter() - start) * 1e3, N, message)


def to_conic_form(socp: DiscretizedSocp):
    """Stack blocks into Clarabel's ``A x + s = b, s in K`` layout."""
    blocks = list(socp.equalities) + list(socp.inequalities)
    offsets = np.cumsum([0] + [blk.m for blk in blocks])
    rows = np.concatenate([blk.rows + off for blk, off in zip(blocks, offsets)])
    cols = np.concatenate([blk.cols for blk in blocks])
    vals = np.concatenate([blk.vals for blk in blocks])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(int(offsets[-1]), socp.n_vars))
    b = np.concatenate([blk.b for blk in blocks])
    cones = []
    for blk in blocks:
        m = blk.m
        if blk.kind == "soc":
            cones.append(clarabel.SecondOrderConeT(m))
            continue
        cls = clarabel.ZeroConeT if blk.kind == "zero" else clarabel.NonnegativeConeT
        if cones and isinstance(cones[-1], cls):
            cones[-1] = cls(cones[-1].dim + m)
        else:
            cones.append(cls(m))
    return A, b, cones


def solve_conic(socp: DiscretizedSocp, max_iter: Optional[int] = None, tol: Optional[float] = None) -> SolveResult:
    """Solve one fixed-horizon problem with the embedded interior-point solver."""
    start = time.perf_counter()
    cfg = socp.mission.solver
    A, b, cones = to_conic_form(socp)
    n = socp.n_vars
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter or cfg.max_iter
    eps = tol or cfg.tol
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = eps
    settings.max_threads = 1
    P = sp.csc_matrix((n, n))
    solver = clarabel.DefaultSolver(P, socp.cost, A, b, cones, settings)
    sol = solver.solve()
    raw = str(sol.status)
    status = _STATUS.get(raw, NUMERICAL_FAILURE)
    elapsed = (time.perf_counter() - start) * 1e3
    if status != OPTIMAL:
        cost = -math.inf if status == UNBOUNDED else math.inf
        return SolveResult(status, None, cost, socp.t_f, elapsed, socp.N, raw, sol.iterations)
    x = np.array(sol.x)
    if raw == "AlmostSolved" and not check_feasibility(socp, x).feasible:
        return SolveResult(NUMERICAL_FAILURE, None, math.inf, socp.t_f, elapsed, socp.N, raw, sol.iterations)
    return SolveResult(OPTIMAL, x, float(socp.cost @ x), socp.t_f, elapsed, socp.N, raw, sol.iterations)


def solve_fixed(mission: MissionConfig, params: ProblemParameters, t_f: float) -> SolveResult:
    start = time.perf_counter()
    try:
        socp = build_socp(mission, params, t_f)
    except FuelExhaustionError as exc:
        return _failed(INFEASIBLE, mission.N, t_f, start, str(exc))
    res = solve_conic(socp)
    res.wall_time = (time.perf_counter() - start) * 1e3
    return res


@dataclass(frozen=True)
class LineSearchConfig:
    t_lo: float = 5.0
    t_hi: Optional[float] = None  # None: fuel-exhaustion horizon
    coarse_grid: int = 20
    refine_tol: float = 0.1

    def __post_init__(self):
        if not self.t_lo > 0:
            raise ValueError("t_lo must be positive")
        if self.t_hi is not None and not self.t_hi > self.t_lo:
            raise ValueError("t_hi must exceed t_lo")
        if self.coarse_grid < 3:
            raise ValueError("coarse_grid must be at least 3")

    def bounds(self, mission: MissionConfig, params: ProblemParameters) -> tuple[float, float]:
        hi = max_burn_time(mission, params) if self.t_hi is None else self.t_hi
        return self.t_lo, hi


GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def full_solve(
    mission: MissionConfig,
    params: ProblemParameters,
    ls: LineSearchConfig = LineSearchConfig(),
    hint: Optional[float] = None,
) -> SolveResult:
    """Free-final-time solve: coarse grid over t_f, then golden-section refinement.

    ``hint`` adds one extra grid point (e.g. a predicted horizon); the result
    does not depend on it beyond that extra sample.
    """
    start = time.perf_counter()
    t_lo, t_hi = ls.bounds(mission, params)
    burn = max_burn_time(mission, params)
    cache: dict = {}

    def evaluate(t: float) -> SolveResult:
        if t not in cache:
            if t > burn:
                cache[t] = _failed(INFEASIBLE, mission.N, t, time.perf_counter(), "beyond fuel-exhaustion horizon")
            else:
                cache[t] = solve_fixed(mission, params, t)
        return cache[t]

    def score(t: float) -> float:
        r = evaluate(t)
        return r.cost if r.status == OPTIMAL else math.inf

    grid = [float(t) for t in np.linspace(t_lo, t_hi, ls.coarse_grid) if t <= burn]
    if hint is not None and t_lo <= hint <= min(t_hi, burn):
        grid = sorted(set(grid) | {float(hint)})
    values = [score(t) for t in grid]
    finite = [i for i, v in enumerate(values) if math.isfinite(v)]
    if not finite:
        res = _failed(INFEASIBLE, mission.N, math.nan, start, "no feasible final time on the search grid")
        res.inner_times = [r.wall_time for r in cache.values()]
        res.inner_t = list(cache)
        return res
    _warn_if_irregular(grid, values)

    best = min(finite, key=lambda i: (values[i], grid[i]))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = score(c), score(d)
    while b - a > ls.refine_tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = score(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = score(d)

    feasible = [r for r in cache.values() if r.status == OPTIMAL]
    res = min(feasible, key=lambda r: (r.cost, r.t_f))
    out = SolveResult(
        res.status, res.x, res.cost, res.t_f, (time.perf_counter() - start) * 1e3, res.N, res.message, res.iterations
    )
    out.inner_times = [r.wall_time for r in cache.values()]
    out.inner_t = list(cache)
    return out


def _warn_if_irregular(grid, values) -> None:
    finite = np.isfinite(values)
    idx = np.flatnonzero(finite)
    if idx.size and not finite[idx[0] : idx[-1] + 1].all():
        log.warning("feasible final times are not contiguous on the coarse grid")
    v = np.asarray(values)[idx[0] : idx[-1] + 1] if idx.size else np.array([])
    if v.size >= 3 and np.all(np.isfinite(v)):
        dv = np.sign(np.diff(v))
        dv = dv[dv != 0]
        if np.count_nonzero(np.diff(dv)) > 1:
            log.warning("fuel cost is not unimodal in t_f on the coarse grid")


def reduced_solve(mission: MissionConfig, params: ProblemParameters, strategy: Strategy) -> SolveResult:
    """Single fixed-horizon solve of the strategy-reduced problem."""
    start = time.perf_counter()
    try:
        socp = build_socp(mission, params, strategy.t_f_star)
    except FuelExhaustionError as exc:
        return _failed(INFEASIBLE, mission.N, strategy.t_f_star, start, str(exc))
    res = solve_conic(reduce_problem(socp, strategy))
    res.wall_time = (time.perf_counter() - start) * 1e3
    return res
