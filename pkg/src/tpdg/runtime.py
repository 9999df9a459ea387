"""Online guidance: predicted strategy, reduced solve, feasibility check, fallback."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Optional

from .lcvx import FEAS_TOL, FuelExhaustionError, FeasibilityReport, Strategy, build_socp, check_feasibility
from .problem import MissionConfig, ProblemParameters
from .solver import LineSearchConfig, SolveResult, full_solve, reduced_solve, solve_fixed

REDUCED_ACCEPTED = "reduced_accepted"
FALLBACK_INFEASIBLE_REDUCED = "fallback_after_infeasible_reduced"
FALLBACK_FAILED_CHECK = "fallback_after_failed_feasibility_check"
FULL_INFEASIBLE = "full_infeasible"

STAGES = ("prediction", "reduced_solve", "feasibility_check", "full_solve")

CHECK_RESIDUAL = "residual"
CHECK_RESOLVE = "resolve"


@dataclass
class TpdgOutcome:
    solution: SolveResult
    path_taken: str
    timings: dict  # ms per stage; stages that did not run are absent
    strategy: Optional[Strategy] = None
    feasibility: Optional[FeasibilityReport] = None
    total_ms: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.solution.optimal

    def record(self) -> dict:
        rep = self.feasibility
        return {
            "path_taken": self.path_taken,
            "status": self.solution.status,
            "cost": self.solution.cost if math.isfinite(self.solution.cost) else None,
            "t_f": self.solution.t_f,
            "timings_ms": self.timings,
            "total_ms": self.total_ms,
            "predicted_t_f": self.strategy.t_f_star if self.strategy else None,
            "predicted_tight": int(self.strategy.tau.sum()) if self.strategy else None,
            "feasibility": None
            if rep is None
            else {
                "feasible": rep.feasible,
                "worst_violation": rep.worst_violation,
                "equality_residual": rep.equality_residual,
                "violated_families": rep.violated_families,
            },
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.record(), fh, indent=2)


def tpdg(
    mission: MissionConfig,
    params: ProblemParameters,
    models=None,
    ls: LineSearchConfig = LineSearchConfig(),
    strategy: Optional[Strategy] = None,
    tau_on: float = 0.5,
    t_margin: float = 1.0,
    check: str = CHECK_RESIDUAL,
    tol: float = FEAS_TOL,
) -> TpdgOutcome:
    """Solve with a predicted strategy, falling back to the full solve.

    ``models`` is a (constraint_model, time_model) pair; ``strategy`` bypasses
    prediction. The returned solution is either feasible for the full problem
    or the full problem has no solution.
    """
    if check not in (CHECK_RESIDUAL, CHECK_RESOLVE):
        raise ValueError(f"unknown check mode {check!r}")
    start = time.perf_counter()
    timings: dict = {}

    t0 = time.perf_counter()
    if strategy is None:
        if models is None:
            raise ValueError("either trained models or an explicit strategy is required")
        from .nn import predict_strategy

        cm, tm = models
        strategy = predict_strategy(cm, tm, params, mission, tau_on=tau_on, t_bounds=ls.bounds(mission, params), t_margin=t_margin)
    elif t_margin != 1.0:
        strategy = Strategy(strategy.tau, strategy.t_f_star * t_margin)
    timings["prediction"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    reduced = reduced_solve(mission, params, strategy)
    timings["reduced_solve"] = (time.perf_counter() - t0) * 1e3

    report = None
    if reduced.optimal:
        t0 = time.perf_counter()
        report, accepted = _check(mission, params, strategy, reduced, check, tol)
        timings["feasibility_check"] = (time.perf_counter() - t0) * 1e3
        if accepted is not None:
            return _done(accepted, REDUCED_ACCEPTED, timings, strategy, report, start)
        path = FALLBACK_FAILED_CHECK
    else:
        path = FALLBACK_INFEASIBLE_REDUCED

    t0 = time.perf_counter()
    full = full_solve(mission, params, ls, hint=strategy.t_f_star)
    timings["full_solve"] = (time.perf_counter() - t0) * 1e3
    if not full.optimal:
        path = FULL_INFEASIBLE
    return _done(full, path, timings, strategy, report, start)


def _check(mission, params, strategy, reduced, mode, tol):
    """Returns (report, accepted solution or None)."""
    try:
        socp = build_socp(mission, params, strategy.t_f_star)
    except FuelExhaustionError:
        return None, None
    report = check_feasibility(socp, reduced, tol=tol)
    if mode == CHECK_RESIDUAL:
        return report, reduced if report.feasible else None
    # re-solve the full fixed-horizon problem; accept the candidate only if it
    # is feasible and matches that optimum
    full = solve_fixed(mission, params, strategy.t_f_star)
    if not (report.feasible and full.optimal):
        return report, None
    rel = abs(reduced.cost - full.cost) / max(1.0, abs(full.cost))
    return report, reduced if rel <= 1e-4 else None


def _done(sol, path, timings, strategy, report, start) -> TpdgOutcome:
    return TpdgOutcome(sol, path, timings, strategy, report, (time.perf_counter() - start) * 1e3)

