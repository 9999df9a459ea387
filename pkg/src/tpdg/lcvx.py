"""Discretized lossless-convexification SOCP for fuel-optimal landing.

Decision vector, node-major with 11 scalars per node k::

    [r_k (3), v_k (3), z_k, u_k (3), xi_k]

Dynamics are propagated exactly with a first-order hold on (u, xi): the
piecewise-linear inputs make the trapezoidal fuel cost the exact integral of
xi and tie every node's control, including the last, to the state.

Every inequality is grouped into a (family, node) block.  One block owns one
entry of the strategy vector; a block may expand to several scalar rows (the
glideslope polygon) or one conic row (thrust norm, speed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .problem import MissionConfig, ProblemParameters, effective_thrust_bounds, skew

LAYOUT_VERSION = "v1"
NV = 11  # scalars per node
IR, IV, IZ, IU, IXI = 0, 3, 6, 7, 10

TIGHT_TOL = 1e-4  # scaled slack below which a block counts as tight
FEAS_TOL = 1e-5
FEAS_TOL_EQ = 1e-6

NODE_FAMILIES = ("thrust_lower", "thrust_upper", "thrust_cone", "pointing")
STATE_FAMILIES = ("glideslope", "velocity", "mass_lower", "mass_upper")
FINAL_FAMILIES = ("dry_mass",)
FAMILIES = NODE_FAMILIES + STATE_FAMILIES + FINAL_FAMILIES


class FuelExhaustionError(ValueError):
    """Requested horizon outlasts the propellant at full throttle."""


# -- layout ----------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintIndex:
    N: int
    family: tuple
    node: tuple
    version: str = LAYOUT_VERSION

    def __len__(self) -> int:
        return len(self.family)

    def block(self, family: str) -> np.ndarray:
        """Flag ids owned by ``family`` (contiguous)."""
        return np.array([i for i, f in enumerate(self.family) if f == family], dtype=int)

    def flag_id(self, family: str, node: int) -> int:
        for i, (f, k) in enumerate(zip(self.family, self.node)):
            if f == family and k == node:
                return i
        raise KeyError((family, node))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["flag_id", "family", "node"])
            for i, (f, k) in enumerate(zip(self.family, self.node)):
                w.writerow([i, f, k])


def constraint_layout(N: int) -> ConstraintIndex:
    """Canonical ordering of the 8N-3 strategy flags.

    Control families cover every node (4N), state families every node after
    the fixed initial state (4(N-1)), and the dry-mass bound the final node.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    fam, node = [], []
    for f in NODE_FAMILIES:
        fam += [f] * N
        node += list(range(N))
    for f in STATE_FAMILIES:
        fam += [f] * (N - 1)
        node += list(range(1, N))
    fam.append("dry_mass")
    node.append(N - 1)
    return ConstraintIndex(N, tuple(fam), tuple(node))


def n_flags(N: int) -> int:
    return 8 * N - 3


# -- physics helpers -------------------------------------------------------


@dataclass(frozen=True)
class GlideslopeHalfspaces:
    H: np.ndarray
    h: np.ndarray


def glideslope_matrix(gamma_gs: float, faces: int = 4) -> GlideslopeHalfspaces:
    """Inscribed polyhedral approximation of the glideslope cone.

    The true cone is ``|r_xy| <= tan(gamma_gs) r_z`` (gamma_gs measured from
    the vertical).  Face i has horizontal normal at psi_i = 2 pi i / faces and
    passes through the cone's generators at psi_i +- pi/faces, so the polygon
    is contained in the cone.  Rows are scaled by cos(gamma_gs) so that
    gamma_gs = pi/2 degenerates smoothly to the half-space r_z >= 0.
    """
    if not 0 < gamma_gs <= math.pi / 2:
        raise ValueError("gamma_gs must lie in (0, pi/2]")
    if faces < 3:
        raise ValueError("need at least three faces")
    psi = 2.0 * math.pi * np.arange(faces) / faces
    cg, sg = math.cos(gamma_gs), math.sin(gamma_gs)
    if gamma_gs == math.pi / 2:
        cg = 0.0
    H = np.column_stack([np.cos(psi) * cg, np.sin(psi) * cg, np.full(faces, -math.cos(math.pi / faces) * sg)])
    return GlideslopeHalfspaces(H, np.zeros(faces))


def mass_envelope(mission: MissionConfig, params: ProblemParameters, t):
    """Reference log-mass profile and acceleration bounds at time(s) ``t``.

    Returns ``(z0, mu_min, mu_max)`` with z0 = ln(m_wet - alpha rho_max t).
    """
    veh = mission.vehicle
    rho_min, rho_max = effective_thrust_bounds(veh, params.phi)
    t = np.asarray(t, dtype=float)
    arg = veh.m_wet - veh.alpha * rho_max * t
    if np.any(arg <= 0):
        raise FuelExhaustionError(
            f"t = {float(np.max(t)):.3f} s exceeds the full-throttle burn time {veh.m_wet / (veh.alpha * rho_max):.3f} s"
        )
    z0 = np.log(arg)
    e = np.exp(-z0)
    return z0, rho_min * e, rho_max * e


def z_upper(mission: MissionConfig, params: ProblemParameters, t):
    veh = mission.vehicle
    rho_min, _ = effective_thrust_bounds(veh, params.phi)
    arg = veh.m_wet - veh.alpha * rho_min * np.asarray(t, dtype=float)
    if np.any(arg <= 0):
        raise FuelExhaustionError("horizon exceeds the minimum-throttle burn time")
    return np.log(arg)


def max_burn_time(mission: MissionConfig, params: Optional[ProblemParameters] = None) -> float:
    """Longest horizon before the minimum-thrust burn empties the tanks."""
    phi = 0.0 if params is None else params.phi
    rho_min, _ = effective_thrust_bounds(mission.vehicle, phi)
    veh = mission.vehicle
    return (veh.m_wet - veh.m_dry) / (veh.alpha * rho_min)


def foh_matrices(mission: MissionConfig, dt: float):
    """Exact first-order-hold transition for state (r, v, z), input (u, xi).

    Returns (Phi, Bm, Bp, c) with
    ``x[k+1] = Phi x[k] + Bm w[k] + Bp w[k+1] + c``.
    """
    S = skew(mission.omega)
    A = np.zeros((7, 7))
    A[0:3, 3:6] = np.eye(3)
    A[3:6, 0:3] = -S @ S
    A[3:6, 3:6] = -2.0 * S
    B = np.zeros((7, 5))
    B[3:6, 0:3] = np.eye(3)
    B[6, 3] = -mission.vehicle.alpha
    B[3:6, 4] = mission.gravity  # constant unit input carries gravity
    M = np.zeros((17, 17))
    M[:7, :7] = A
    M[:7, 7:12] = B
    M[7:12, 12:17] = np.eye(5)
    E = scipy.linalg.expm(M * dt)
    Phi = E[:7, :7]
    P0 = E[:7, 7:12]
    P1 = E[:7, 12:17] / dt
    Bm = (P0 - P1)[:, :4]
    Bp = P1[:, :4]
    c = P0[:, 4]
    return Phi, Bm, Bp, c


# -- problem container -----------------------------------------------------


@dataclass(frozen=True)
class Block:
    """One labeled group of rows ``s = b - A x`` with ``s`` in a cone.

    ``A`` is kept as COO triplets with block-local row indices.
    """

    family: str
    node: int
    kind: str  # "zero" | "nonneg" | "soc"
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    b: np.ndarray

    @property
    def m(self) -> int:
        return self.b.size

    def matrix(self, n_vars: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.m, n_vars))


@dataclass(frozen=True)
class DiscretizedSocp:
    mission: MissionConfig
    params: ProblemParameters
    N: int
    t_f: float
    dt: float
    times: np.ndarray
    cost: np.ndarray
    equalities: tuple
    inequalities: tuple
    z0: np.ndarray
    mu_min: np.ndarray
    mu_max: np.ndarray
    z_max: np.ndarray
    glideslope: GlideslopeHalfspaces
    foh: tuple
    retained: Optional[np.ndarray] = field(default=None)  # flag mask when reduced

    @property
    def n_vars(self) -> int:
        return NV * self.N

    @property
    def layout(self) -> ConstraintIndex:
        return constraint_layout(self.N)

    def bookkeeping_count(self) -> int:
        """Constraint bookkeeping in the 12N+5 / 3N+5 accounting.

        3N dynamics, 5 boundary conditions and 9N inequality rows pro-rated by
        the fraction of strategy flags retained.
        """
        kept = n_flags(self.N) if self.retained is None else int(self.retained.sum())
        return 3 * self.N + 5 + round(9 * self.N * kept / n_flags(self.N))

    def objective(self, x) -> float:
        return float(self.cost @ np.asarray(x))

    def unpack(self, x) -> dict:
        X = np.asarray(x, dtype=float).reshape(self.N, NV)
        return {
            "r": X[:, IR : IR + 3],
            "v": X[:, IV : IV + 3],
            "z": X[:, IZ],
            "u": X[:, IU : IU + 3],
            "xi": X[:, IXI],
        }


def _block(family: str, node: int, kind: str, dense: np.ndarray, offset: int, b) -> Block:
    """Block from a dense local matrix whose column 0 is variable ``offset``."""
    r, c = np.nonzero(dense)
    return Block(family, node, kind, r, c + offset, dense[r, c], np.atleast_1d(np.asarray(b, dtype=float)))


def build_socp(mission: MissionConfig, params: ProblemParameters, t_f: float) -> DiscretizedSocp:
    """Assemble the full fixed-final-time problem."""
    if not t_f > 0:
        raise ValueError("t_f must be positive")
    N = mission.N
    n = NV * N
    dt = t_f / (N - 1)
    times = np.linspace(0.0, t_f, N)
    z0, mu_min, mu_max = mass_envelope(mission, params, times)
    zmax = z_upper(mission, params, times)
    gs = glideslope_matrix(params.gamma_gs, mission.glideslope_faces)
    veh = mission.vehicle

    cost = np.zeros(n)
    w = np.full(N, dt)
    w[0] = w[-1] = dt / 2
    cost[NV * np.arange(N) + IXI] = w

    # dynamics: x[k+1] - Phi x[k] - Bm w[k] - Bp w[k+1] = c, over nodes k, k+1
    Phi, Bm, Bp, c = foh_matrices(mission, dt)
    dyn = np.zeros((7, 2 * NV))
    dyn[:, 0:7] = -Phi
    dyn[:, 7:11] = -Bm
    dyn[:, NV : NV + 7] = np.eye(7)
    dyn[:, NV + 7 : NV + 11] = -Bp
    dyn[np.abs(dyn) < 1e-300] = 0.0
    eqs = [_block("dynamics", k, "zero", dyn, NV * k, c) for k in range(N - 1)]

    r0, v0 = np.asarray(params.r0), np.asarray(params.v0)
    eqs.append(_block("initial", 0, "zero", np.eye(7, NV), 0, np.concatenate([r0, v0, [math.log(veh.m_wet)]])))
    eqs.append(_block("final", N - 1, "zero", np.eye(6, NV), NV * (N - 1), np.concatenate([mission.r_f, mission.v_f])))

    cos_p = math.cos(params.gamma_p)
    lower = np.zeros((3, NV))
    cone = np.zeros((4, NV))
    cone[0, IXI] = -1.0
    cone[1:, IU : IU + 3] = -np.eye(3)
    point = np.zeros((1, NV))
    point[0, IU + 2], point[0, IXI] = -1.0, cos_p
    upper = np.zeros((1, NV))
    glide = np.zeros((len(gs.h), NV))
    glide[:, IR : IR + 3] = gs.H
    speed = np.zeros((4, NV))
    speed[1:, IV : IV + 3] = -np.eye(3)
    zrow = np.zeros((1, NV))
    zrow[0, IZ] = 1.0
    speed_b = np.array([veh.v_max, 0.0, 0.0, 0.0])

    ineqs = []
    layout = constraint_layout(N)
    for fam, k in zip(layout.family, layout.node):
        off = NV * k
        if fam == "thrust_lower":
            # a(1 - d + d^2/2) <= xi  <=>  ||(2d, w-1)|| <= w+1,  w = 2 xi/a - 2 + 2d
            a = mu_min[k]
            lower[:, IZ] = -2.0
            lower[0, IXI] = lower[2, IXI] = -2.0 / a
            b = [-(2 * z0[k] + 1), -2 * z0[k], -(2 * z0[k] + 3)]
            ineqs.append(_block(fam, k, "soc", lower, off, b))
        elif fam == "thrust_upper":
            upper[0, IZ], upper[0, IXI] = mu_max[k], 1.0
            ineqs.append(_block(fam, k, "nonneg", upper, off, mu_max[k] * (1 + z0[k])))
        elif fam == "thrust_cone":
            ineqs.append(_block(fam, k, "soc", cone, off, np.zeros(4)))
        elif fam == "pointing":
            ineqs.append(_block(fam, k, "nonneg", point, off, 0.0))
        elif fam == "glideslope":
            ineqs.append(_block(fam, k, "nonneg", glide, off, gs.h))
        elif fam == "velocity":
            ineqs.append(_block(fam, k, "soc", speed, off, speed_b))
        elif fam == "mass_lower":
            ineqs.append(_block(fam, k, "nonneg", -zrow, off, -z0[k]))
        elif fam == "mass_upper":
            ineqs.append(_block(fam, k, "nonneg", zrow, off, zmax[k]))
        elif fam == "dry_mass":
            ineqs.append(_block(fam, k, "nonneg", -zrow, off, -math.log(veh.m_dry)))

    return DiscretizedSocp(
        mission=mission,
        params=params,
        N=N,
        t_f=float(t_f),
        dt=dt,
        times=times,
        cost=cost,
        equalities=tuple(eqs),
        inequalities=tuple(ineqs),
        z0=z0,
        mu_min=mu_min,
        mu_max=mu_max,
        z_max=zmax,
        glideslope=gs,
        foh=(Phi, Bm, Bp, c),
    )


def reduce_problem(socp: DiscretizedSocp, strategy) -> DiscretizedSocp:
    """Keep dynamics and boundary rows plus the inequality blocks flagged in
    ``strategy.tau``; the horizon is fixed to ``strategy.t_f_star``."""
    tau = np.asarray(strategy.tau, dtype=bool)
    if tau.shape != (n_flags(socp.N),):
        raise ValueError(f"strategy has {tau.size} flags, expected {n_flags(socp.N)}")
    if not math.isclose(socp.t_f, strategy.t_f_star, rel_tol=0.0, abs_tol=1e-12):
        socp = build_socp(socp.mission, socp.params, strategy.t_f_star)
    kept = tuple(b for b, keep in zip(socp.inequalities, tau) if keep)
    return DiscretizedSocp(**{**socp.__dict__, "inequalities": kept, "retained": tau.copy()})


# -- strategy and residual evaluation --------------------------------------


@dataclass(frozen=True)
class Strategy:
    tau: np.ndarray
    t_f_star: float

    def __post_init__(self):
        if not self.t_f_star > 0:
            raise ValueError("t_f_star must be positive")
        N = (len(self.tau) + 3) / 8
        if N != int(N) or N < 2:
            raise ValueError(f"flag vector length {len(self.tau)} is not 8N-3")

    @property
    def N(self) -> int:
        return (len(self.tau) + 3) // 8


def constraint_slacks(socp: DiscretizedSocp, x) -> tuple[np.ndarray, np.ndarray]:
    """Signed slack ``rhs - lhs`` and scale ``max(1, |rhs|)`` per flag.

    Evaluated from the physical constraint forms, independent of the conic
    rewrite used by the solver.  Negative slack is a violation.
    """
    s = socp.unpack(x)
    N = socp.N
    p = socp.params
    d = s["z"] - socp.z0
    inner = slice(1, N)
    slack, scale = [], []

    def add(lhs, rhs):
        rhs = np.asarray(rhs, dtype=float)
        slack.append(rhs - lhs)
        scale.append(np.maximum(1.0, np.abs(rhs)))

    add(socp.mu_min * (1 - d + 0.5 * d**2), s["xi"])
    add(s["xi"], socp.mu_max * (1 - d))
    add(np.linalg.norm(s["u"], axis=1), s["xi"])
    add(s["xi"] * math.cos(p.gamma_p), s["u"][:, 2])
    H = socp.glideslope.H
    r = s["r"][inner]
    add(np.max(r[:, :2] @ H[:, :2].T, axis=1), -H[0, 2] * r[:, 2])
    add(np.linalg.norm(s["v"][inner], axis=1), np.full(N - 1, socp.mission.vehicle.v_max))
    add(socp.z0[inner], s["z"][inner])
    add(s["z"][inner], socp.z_max[inner])
    add(np.array([math.log(socp.mission.vehicle.m_dry)]), s["z"][-1:])
    return np.concatenate(slack), np.concatenate(scale)


def equality_residuals(socp: DiscretizedSocp, x) -> dict:
    """Scaled absolute residuals of dynamics and boundary equalities."""
    X = np.asarray(x, dtype=float).reshape(socp.N, NV)
    Phi, Bm, Bp, c = socp.foh
    st, w = X[:, :7], X[:, 7:]
    pred = st[:-1] @ Phi.T + w[:-1] @ Bm.T + w[1:] @ Bp.T + c
    dyn = np.abs(st[1:] - pred) / np.maximum(1.0, np.abs(st[1:]))
    p, veh = socp.params, socp.mission.vehicle
    x0 = np.concatenate([p.r0, p.v0, [math.log(veh.m_wet)]])
    init = np.abs(st[0] - x0) / np.maximum(1.0, np.abs(x0))
    fin = np.abs(st[-1, :6] - np.concatenate([socp.mission.r_f, socp.mission.v_f]))
    return {
        "dynamics": float(dyn.max(initial=0.0)),
        "initial": float(init.max()),
        "final": float(fin.max()),
    }


def _vector_of(candidate) -> np.ndarray:
    x = getattr(candidate, "x", candidate)
    if x is None:
        raise ValueError("candidate carries no primal solution")
    return np.asarray(x, dtype=float)


def extract_tight_constraints(socp: DiscretizedSocp, solution, tol: float = TIGHT_TOL) -> np.ndarray:
    """Flag vector: 1 where the scaled slack of a block is at most ``tol``."""
    status = getattr(solution, "status", "optimal")
    if status != "optimal":
        raise ValueError(f"cannot extract tight constraints from a {status} solution")
    x = _vector_of(solution)
    slack, scale = constraint_slacks(socp, x)
    return (slack / scale <= tol).astype(np.uint8)


@dataclass
class FeasibilityReport:
    feasible: bool
    worst_violation: float
    family_violation: dict
    equality_residual: dict
    tol: float
    tol_eq: float

    @property
    def violated_families(self) -> list:
        return [f for f, v in self.family_violation.items() if v > self.tol]


def check_feasibility(socp_full: DiscretizedSocp, candidate, tol: float = FEAS_TOL, tol_eq: float = FEAS_TOL_EQ) -> FeasibilityReport:
    """Evaluate every constraint of the full problem at ``candidate``."""
    x = _vector_of(candidate)
    if x.shape != (socp_full.n_vars,):
        raise ValueError(f"candidate has {x.size} entries, problem expects {socp_full.n_vars}")
    if not np.all(np.isfinite(x)):
        nan = {f: math.inf for f in FAMILIES}
        return FeasibilityReport(False, math.inf, nan, {"dynamics": math.inf}, tol, tol_eq)
    slack, scale = constraint_slacks(socp_full, x)
    viol = np.maximum(0.0, -slack / scale)
    fams = np.array(socp_full.layout.family)
    per_family = {f: float(viol[fams == f].max()) for f in FAMILIES}
    eq = equality_residuals(socp_full, x)
    worst_ineq = float(viol.max())
    worst_eq = max(eq.values())
    feasible = worst_ineq <= tol and worst_eq <= tol_eq
    # report the larger of the two ratios in units of its own tolerance
    worst = max(worst_ineq, worst_eq * tol / tol_eq)
    return FeasibilityReport(bool(feasible), worst, per_family, eq, tol, tol_eq)


def relaxation_gap(socp: DiscretizedSocp, x, floor: float = 1e-8) -> np.ndarray:
    """Relative gap ``(xi - |u|) / xi`` at nodes with xi above ``floor``
    (floor in units of rho_min / m_wet)."""
    s = socp.unpack(x)
    scale = socp.mu_min[0]
    mask = s["xi"] > floor * scale
    gap = np.zeros(socp.N)
    gap[mask] = (s["xi"][mask] - np.linalg.norm(s["u"][mask], axis=1)) / s["xi"][mask]
    return gap


def count_active_runs(flags: np.ndarray) -> int:
    """Number of maximal runs of consecutive ones."""
    f = np.asarray(flags, dtype=int)
    return int(np.sum((f[1:] == 1) & (f[:-1] == 0)) + (f[0] == 1 if f.size else 0))


def post_solve_assumptions(socp: DiscretizedSocp, solution, tol: float = TIGHT_TOL) -> dict:
    """Trajectory-dependent LCvx conditions from the tight-flag pattern.

    Glideslope activation must be instantaneous and velocity-bound activation
    isolated: both pass when no run of consecutive tight nodes exceeds one.
    The glideslope at the landing node is excluded since r_f lies on the apex.
    """
    tau = extract_tight_constraints(socp, solution, tol)
    layout = socp.layout
    out = {}
    for name, fam, drop_last in (("3", "glideslope", True), ("5", "velocity", False)):
        flags = tau[layout.block(fam)]
        if drop_last:
            flags = flags[:-1]
        longest = _longest_run(flags)
        out[name] = {"passed": longest <= 1, "runs": count_active_runs(flags), "longest_run": longest}
    return out


def _longest_run(flags) -> int:
    best = cur = 0
    for f in flags:
        cur = cur + 1 if f else 0
        best = max(best, cur)
    return best
