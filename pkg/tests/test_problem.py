import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpdg.problem import (
    THETA_NAMES,
    DomainError,
    MissionConfig,
    PlanetConfig,
    ProblemParameters,
    VehicleConfig,
    cos_extrema,
    dump_mission,
    effective_thrust_bounds,
    load_mission,
    make_theta,
    omega_vector,
    reference_theta,
    validate_lcvx_assumptions,
)

deg = math.radians


def test_reference_theta_vector():
    th = reference_theta().vector()
    np.testing.assert_allclose(th, [deg(10), deg(80), deg(60), 2000, 2000, 1000, -15, -15, -30])
    assert len(THETA_NAMES) == 9


def test_below_surface_start_rejected_with_field_name():
    with pytest.raises(DomainError) as exc:
        make_theta(deg(10), deg(80), deg(60), (0, 0, -5), (0, 0, 0))
    assert exc.value.field == "r0_z"


def test_range_corner_is_valid():
    p = make_theta(0.0, deg(90), deg(50), (1500, 1500, 500), (-115, -115, -101.7))
    assert p.gamma_gs == pytest.approx(math.pi / 2)


@pytest.mark.parametrize(
    "kw,field",
    [
        (dict(phi=deg(90)), "phi"),
        (dict(phi=-0.1), "phi"),
        (dict(gamma_gs=0.0), "gamma_gs"),
        (dict(gamma_gs=deg(91)), "gamma_gs"),
        (dict(gamma_p=deg(90)), "gamma_p"),
        (dict(gamma_p=0.0), "gamma_p"),
    ],
)
def test_domain_violations(kw, field):
    base = dict(phi=deg(10), gamma_gs=deg(80), gamma_p=deg(60), r0=(1, 1, 1), v0=(0, 0, 0))
    base.update(kw)
    with pytest.raises(DomainError) as exc:
        make_theta(**base)
    assert exc.value.field == field


finite = st.floats(-1e4, 1e4, allow_nan=False)


@given(
    phi=st.floats(0, 1.5),
    gs=st.floats(1e-3, math.pi / 2),
    gp=st.floats(1e-3, 1.5),
    r=st.tuples(finite, finite, st.floats(1e-3, 1e4)),
    v=st.tuples(finite, finite, finite),
)
def test_make_theta_round_trip_is_exact(phi, gs, gp, r, v):
    p = make_theta(phi, gs, gp, r, v)
    q = ProblemParameters.from_vector(p.vector())
    assert q == p
    assert p.vector().tolist() == [phi, gs, gp, *r, *v]


def test_omega_magnitude_oracle():
    w = omega_vector(PlanetConfig())
    assert np.linalg.norm(w) == pytest.approx(7.0882e-5, rel=1e-4)


@given(st.floats(10.0, 1e9), st.floats(-math.pi / 2, math.pi / 2))
def test_omega_norm_times_period_is_two_pi(T, lat):
    w = omega_vector(PlanetConfig(sidereal_period=T, latitude=lat))
    assert np.linalg.norm(w) * T == pytest.approx(2 * math.pi, rel=1e-12)


def test_omega_vanishes_for_slow_rotation():
    assert np.linalg.norm(omega_vector(PlanetConfig(sidereal_period=1e300))) < 1e-299


def test_pole_fails_assumption_two():
    m = MissionConfig(planet=PlanetConfig(latitude=math.pi / 2))
    rep = validate_lcvx_assumptions(m, reference_theta())
    assert rep["2"].passed is False


def test_omega_override_along_vertical_fails_assumption_two():
    m = MissionConfig(omega_override=(0.0, 0.0, 1e-4))
    assert validate_lcvx_assumptions(m, reference_theta())["2"].passed is False


@pytest.mark.parametrize(
    "phi_deg,expected",
    [
        (0.0, (5580.0, 14880.0)),
        # 6 * 930 * cos(27 deg), 6 * 2480 * cos(27 deg)
        (27.0, (4971.816404971093, 13258.177079922914)),
        (10.0, (5495.227261808121, 14653.939364821656)),
    ],
)
def test_effective_thrust_bounds(phi_deg, expected):
    lo, hi = effective_thrust_bounds(VehicleConfig(), deg(phi_deg))
    assert lo == pytest.approx(expected[0], rel=1e-12)
    assert hi == pytest.approx(expected[1], rel=1e-12)


@given(st.floats(0, 1.5), st.floats(1e-6, 0.05))
def test_thrust_bounds_strictly_decreasing(phi, step):
    a = effective_thrust_bounds(VehicleConfig(), phi)
    b = effective_thrust_bounds(VehicleConfig(), min(phi + step, math.pi / 2 - 1e-9))
    assert b[0] < a[0] and b[1] < a[1]


def test_reference_assumptions():
    rep = validate_lcvx_assumptions(MissionConfig(), reference_theta())
    assert rep["1"].passed
    assert rep["2"].passed
    assert rep["3"].passed is None and rep["5"].passed is None


def _assumption4_grid_oracle(gs, gp, phi, m=MissionConfig()):
    veh = m.vehicle
    ang = np.linspace(math.pi / 2 - gp - gs, math.pi / 2 + gp - gs, 200001)
    c = np.cos(ang)
    g = np.linalg.norm(m.gravity)
    rmin, rmax = veh.n_eng * veh.T1 * math.cos(phi), veh.n_eng * veh.T2 * math.cos(phi)
    return rmin * c.max() < veh.m_dry * g * math.sin(gs), rmax * c.min() > veh.m_wet * g * math.sin(gs)


@pytest.mark.parametrize("gs,gp,phi", [(80, 60, 10), (70, 50, 0), (90, 70, 20), (30, 10, 5), (85, 20, 0)])
def test_assumption_four_matches_grid_oracle(gs, gp, phi):
    p = make_theta(deg(phi), deg(gs), deg(gp), (1, 1, 1), (0, 0, 0))
    rep = validate_lcvx_assumptions(MissionConfig(), p)
    a, b = _assumption4_grid_oracle(deg(gs), deg(gp), deg(phi))
    assert rep["4a"].passed == a
    assert rep["4b"].passed == b


@given(st.floats(-3, 3), st.floats(0, 3))
def test_cos_extrema_matches_sampling(lo, width):
    hi = min(lo + width, math.pi)
    lo = max(lo, -math.pi)
    cmin, cmax = cos_extrema(lo, hi)
    c = np.cos(np.linspace(lo, hi, 2001))
    assert cmin <= c.min() + 1e-12 and cmax >= c.max() - 1e-12
    assert cmin == pytest.approx(c.min(), abs=1e-5) and cmax == pytest.approx(c.max(), abs=1e-5)


@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
@settings(max_examples=30)
def test_controllability_invariant_under_rotation(a, b, c):
    from scipy.spatial.transform import Rotation

    base = MissionConfig().omega
    w = Rotation.from_euler("xyz", [a, b, c]).apply(base)
    m = MissionConfig(omega_override=tuple(w))
    assert validate_lcvx_assumptions(m, reference_theta())["1"].passed


def test_mission_defaults_and_invariants():
    m = MissionConfig()
    assert m.N == 50
    assert np.array_equal(m.r_f, np.zeros(3)) and np.array_equal(m.v_f, np.zeros(3))
    with pytest.raises(DomainError):
        MissionConfig(N=1)
    with pytest.raises(DomainError):
        VehicleConfig(m_dry=2000.0)
    with pytest.raises(DomainError):
        VehicleConfig(T1=3000.0)


def test_mission_file_round_trip(tmp_path):
    m = MissionConfig(N=30, vehicle=VehicleConfig(isp=230.0), planet=PlanetConfig(latitude=deg(12.5)))
    path = tmp_path / "mission.cfg"
    dump_mission(m, path)
    assert load_mission(path) == m
    assert load_mission(path).hash() == m.hash()


def test_mission_file_overrides_and_unknown_keys(tmp_path):
    path = tmp_path / "m.cfg"
    path.write_text("# comment\nN = 20\nlatitude = 45\nsolver_tol = 1e-9\n")
    m = load_mission(path)
    assert m.N == 20 and m.planet.latitude == pytest.approx(deg(45)) and m.solver.tol == 1e-9
    path.write_text("bogus = 1\n")
    with pytest.raises(ValueError):
        load_mission(path)


def test_hash_changes_with_config():
    assert MissionConfig().hash() != MissionConfig(N=40).hash()
    assert MissionConfig().hash() == MissionConfig().hash()
