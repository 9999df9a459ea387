import json
import math

import numpy as np
import pytest

from oracles import solve_fixed_cvxpy
from tpdg.lcvx import Strategy, build_socp, check_feasibility, max_burn_time, reduce_problem
from tpdg.problem import MissionConfig, make_theta, reference_theta
from tpdg.solver import (
    INFEASIBLE,
    OPTIMAL,
    LineSearchConfig,
    full_solve,
    reduced_solve,
    solve_conic,
    solve_fixed,
    to_conic_form,
)

deg = math.radians


@pytest.mark.parametrize("t_f", [35.0, 40.0, 52.5, 80.0])
def test_fixed_horizon_cost_matches_independent_formulation(mission, ref_params, t_f):
    ours = solve_fixed(mission, ref_params, t_f)
    ref, _ = solve_fixed_cvxpy(mission, ref_params, t_f)
    assert ours.optimal == math.isfinite(ref)
    if ours.optimal:
        assert ours.cost == pytest.approx(ref, rel=1e-6)


def test_glideslope_violating_start_matches_independent_verdict(mission):
    p = make_theta(deg(10), deg(30), deg(60), (2000, 2000, 100), (0, 0, 0))
    ref, _ = solve_fixed_cvxpy(mission, p, 50.0)
    res = solve_fixed(mission, p, 50.0)
    assert math.isinf(ref) and res.status == INFEASIBLE


def test_conic_form_dimensions(ref_socp):
    A, b, cones = to_conic_form(ref_socp)
    assert A.shape == (b.size, ref_socp.n_vars)
    assert sum(c.dim for c in cones) == b.size


def test_reference_at_oracle_horizon_is_optimal(mission, ref_params, ref_full):
    res = solve_fixed(mission, ref_params, ref_full.t_f)
    assert res.optimal and math.isfinite(res.cost)
    assert res.cost == pytest.approx(ref_full.cost, rel=1e-9)


def test_full_solve_is_feasible_and_beats_grid(mission, ref_params, ref_full, ref_socp):
    assert check_feasibility(ref_socp, ref_full).feasible
    assert ref_full.final_mass() >= mission.vehicle.m_dry
    for t in (30.0, 45.0, 60.0, 75.0):
        r = solve_fixed(mission, ref_params, t)
        if r.optimal:
            assert ref_full.cost <= r.cost + 1e-9


def test_full_solve_deterministic(mission, ref_params, ref_full):
    again = full_solve(mission, ref_params)
    assert again.status == ref_full.status
    assert again.cost == pytest.approx(ref_full.cost, abs=1e-9)
    assert again.t_f == ref_full.t_f


def test_wall_time_dominates_inner_solves(ref_full):
    assert ref_full.wall_time >= max(ref_full.inner_times)


def test_grid_beyond_fuel_exhaustion_is_skipped(mission):
    p = make_theta(deg(27), deg(80), deg(60), (2000, 2000, 1000), (-15, -15, -30))
    burn = max_burn_time(mission, p)
    assert burn == pytest.approx(160.9, abs=0.05)
    res = full_solve(mission, p, LineSearchConfig(t_hi=400.0))
    assert res.optimal and res.t_f <= burn
    assert max(res.inner_t) <= burn
    assert len(res.inner_t) < LineSearchConfig().coarse_grid + 20


def test_hopeless_start_is_infeasible(mission):
    p = make_theta(deg(10), deg(80), deg(60), (0, 0, 10), (0, 0, -500))
    assert full_solve(mission, p).status == INFEASIBLE


def test_one_second_horizon_is_infeasible(mission, ref_params):
    # every thrust bound retained: braking from |v0| within rho_max is impossible
    assert reduced_solve(mission, ref_params, Strategy(np.ones(397, dtype=np.uint8), 1.0)).status == INFEASIBLE


def test_all_zero_strategy_relaxes(mission, ref_params, ref_full):
    res = reduced_solve(mission, ref_params, Strategy(np.zeros(397, dtype=np.uint8), ref_full.t_f))
    assert res.cost <= ref_full.cost


def test_line_search_config_validation():
    with pytest.raises(ValueError):
        LineSearchConfig(t_lo=0.0)
    with pytest.raises(ValueError):
        LineSearchConfig(t_lo=10.0, t_hi=5.0)
    with pytest.raises(ValueError):
        LineSearchConfig(coarse_grid=2)


def test_default_bounds_use_fuel_horizon(mission, ref_params):
    lo, hi = LineSearchConfig().bounds(mission, ref_params)
    assert lo == 5.0 and hi == pytest.approx(max_burn_time(mission, ref_params))


def test_hint_only_adds_a_grid_point(mission, ref_params, ref_full):
    res = full_solve(mission, ref_params, hint=ref_full.t_f + 0.7)
    assert res.cost == pytest.approx(ref_full.cost, rel=1e-4)


def test_result_serialization(tmp_path, ref_full):
    ref_full.write_json(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["status"] == "optimal" and doc["cost"] == ref_full.cost
    ref_full.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 51 and lines[0].startswith("k,t,rx")


def test_iteration_cap_reports_failure(ref_socp):
    assert solve_conic(ref_socp, max_iter=2).status == "numerical_failure"
