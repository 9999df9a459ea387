"""Mission, vehicle and parameter types for the 3-DoF landing problem.

Defaults describe a Mars lander with the standard benchmark vehicle values.  Angles are radians everywhere inside the package; the config file
and the CLI take degrees.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

THETA_NAMES = ("phi", "gamma_gs", "gamma_p", "r0x", "r0y", "r0z", "v0x", "v0y", "v0z")


class DomainError(ValueError):
    """A parameter lies outside its admissible domain."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class PlanetConfig:
    gravity: tuple = (0.0, 0.0, -3.7114)
    sidereal_period: float = 88642.44
    latitude: float = math.radians(30.0)
    g_e: float = 9.807

    def __post_init__(self):
        if not self.sidereal_period > 0:
            raise DomainError("sidereal_period", "must be positive")
        if not np.linalg.norm(self.gravity) > 0:
            raise DomainError("gravity", "must be nonzero")


@dataclass(frozen=True)
class VehicleConfig:
    m_dry: float = 1505.0
    m_wet: float = 1905.0
    isp: float = 225.0
    n_eng: int = 6
    T1: float = 930.0
    T2: float = 2480.0
    v_max: float = 138.89
    alpha: float = 0.0005

    def __post_init__(self):
        if not 0 < self.m_dry < self.m_wet:
            raise DomainError("m_dry", "need 0 < m_dry < m_wet")
        if not 0 < self.T1 < self.T2:
            raise DomainError("T1", "need 0 < T1 < T2")
        if not self.v_max > 0:
            raise DomainError("v_max", "must be positive")
        if not self.alpha > 0:
            raise DomainError("alpha", "must be positive")
        if self.n_eng < 1:
            raise DomainError("n_eng", "need at least one engine")


@dataclass(frozen=True)
class SolverSettings:
    max_iter: int = 200
    tol: float = 1e-10


@dataclass(frozen=True)
class MissionConfig:
    planet: PlanetConfig = field(default_factory=PlanetConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    N: int = 50
    glideslope_faces: int = 4
    omega_override: Optional[tuple] = None
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.N < 2:
            raise DomainError("N", "need at least two nodes")
        if self.glideslope_faces < 3:
            raise DomainError("glideslope_faces", "need at least three faces")

    @property
    def omega(self) -> np.ndarray:
        if self.omega_override is not None:
            return np.asarray(self.omega_override, dtype=float)
        return omega_vector(self.planet)

    @property
    def gravity(self) -> np.ndarray:
        return np.asarray(self.planet.gravity, dtype=float)

    @property
    def r_f(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def v_f(self) -> np.ndarray:
        return np.zeros(3)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Short digest identifying this configuration in output files."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ProblemParameters:
    """The nine sampled scalars of one landing instance."""

    phi: float
    gamma_gs: float
    gamma_p: float
    r0: tuple
    v0: tuple

    def __post_init__(self):
        if not 0 <= self.phi < math.pi / 2:
            raise DomainError("phi", "need 0 <= phi < pi/2")
        if not 0 < self.gamma_gs <= math.pi / 2:
            raise DomainError("gamma_gs", "need 0 < gamma_gs <= pi/2")
        if not 0 < self.gamma_p < math.pi / 2:
            raise DomainError("gamma_p", "need 0 < gamma_p < pi/2")
        if len(self.r0) != 3 or len(self.v0) != 3:
            raise DomainError("r0", "r0 and v0 must be 3-vectors")
        if not self.r0[2] > 0:
            raise DomainError("r0_z", "initial altitude must be positive")
        if not all(math.isfinite(x) for x in self.vector()):
            raise DomainError("theta", "non-finite entry")

    def vector(self) -> np.ndarray:
        return np.array([self.phi, self.gamma_gs, self.gamma_p, *self.r0, *self.v0], dtype=float)

    @classmethod
    def from_vector(cls, theta) -> "ProblemParameters":
        theta = [float(x) for x in theta]
        if len(theta) != 9:
            raise DomainError("theta", f"expected 9 entries, got {len(theta)}")
        return cls(theta[0], theta[1], theta[2], tuple(theta[3:6]), tuple(theta[6:9]))

    @classmethod
    def from_degrees(cls, phi, gamma_gs, gamma_p, r0, v0) -> "ProblemParameters":
        return make_theta(math.radians(phi), math.radians(gamma_gs), math.radians(gamma_p), r0, v0)


def make_theta(phi, gamma_gs, gamma_p, r0, v0) -> ProblemParameters:
    """Build a validated parameter set; angles in radians."""
    return ProblemParameters(
        float(phi),
        float(gamma_gs),
        float(gamma_p),
        tuple(float(x) for x in r0),
        tuple(float(x) for x in v0),
    )


def reference_theta() -> ProblemParameters:
    """Seed instance of the benchmark dataset."""
    return ProblemParameters.from_degrees(10.0, 80.0, 60.0, (2000.0, 2000.0, 1000.0), (-15.0, -15.0, -30.0))


def omega_vector(planet: PlanetConfig) -> np.ndarray:
    """Planet rotation rate in the landing frame.

    The spin axis lies in the x-z plane, tilted from the local vertical by the
    site colatitude: ``|w| * (cos(lat), 0, sin(lat))``.
    """
    if not planet.sidereal_period > 0:
        raise DomainError("sidereal_period", "must be positive")
    rate = 2.0 * math.pi / planet.sidereal_period
    lat = planet.latitude
    return rate * np.array([math.cos(lat), 0.0, math.sin(lat)])


def effective_thrust_bounds(vehicle: VehicleConfig, phi: float) -> tuple[float, float]:
    """Net vertical-axis thrust bounds (rho_min, rho_max) for canted engines."""
    c = math.cos(phi)
    return vehicle.n_eng * vehicle.T1 * c, vehicle.n_eng * vehicle.T2 * c


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def state_matrices(omega) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (A, B) of the rotating-frame double integrator, state (r, v)."""
    S = skew(omega)
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3:, :3] = -S @ S
    A[3:, 3:] = -2.0 * S
    B = np.vstack([np.zeros((3, 3)), np.eye(3)])
    return A, B


@dataclass
class AssumptionCheck:
    name: str
    passed: Optional[bool]
    detail: str


@dataclass
class AssumptionReport:
    checks: list

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def all_passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)


def cos_extrema(lo: float, hi: float) -> tuple[float, float]:
    """(min, max) of cos over [lo, hi] for an interval inside [-pi, pi]."""
    cmax = 1.0 if lo <= 0.0 <= hi else max(math.cos(lo), math.cos(hi))
    cmin = min(math.cos(lo), math.cos(hi))
    return cmin, cmax


def validate_lcvx_assumptions(mission: MissionConfig, params: ProblemParameters) -> AssumptionReport:
    omega = mission.omega
    A, B = state_matrices(omega)
    ctrb = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(6)])
    rank = int(np.linalg.matrix_rank(ctrb))
    checks = [AssumptionCheck("1", rank == 6, f"controllability rank {rank}")]

    wz = np.cross(omega, [0.0, 0.0, 1.0])
    checks.append(AssumptionCheck("2", bool(np.linalg.norm(wz) > 1e-15), f"|w x e_z| = {np.linalg.norm(wz):.3e}"))
    checks.append(AssumptionCheck("3", None, "trajectory-dependent, checked post-solve"))

    veh = mission.vehicle
    rho_min, rho_max = effective_thrust_bounds(veh, params.phi)
    g = float(np.linalg.norm(mission.gravity))
    lo = math.pi / 2 - params.gamma_p - params.gamma_gs
    hi = math.pi / 2 + params.gamma_p - params.gamma_gs
    cmin, cmax = cos_extrema(lo, hi)
    sgs = math.sin(params.gamma_gs)
    lhs_a, rhs_a = rho_min * cmax, veh.m_dry * g * sgs
    lhs_b, rhs_b = rho_max * cmin, veh.m_wet * g * sgs
    checks.append(AssumptionCheck("4a", lhs_a < rhs_a, f"{lhs_a:.2f} < {rhs_a:.2f}"))
    checks.append(AssumptionCheck("4b", lhs_b > rhs_b, f"{lhs_b:.2f} > {rhs_b:.2f}"))
    checks.append(AssumptionCheck("5", None, "trajectory-dependent, checked post-solve"))
    return AssumptionReport(checks)


# -- config file -------------------------------------------------------------

_DEG_KEYS = {"latitude"}


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_mission(path) -> MissionConfig:
    """Read a ``key = value`` mission file; unknown keys are an error.

    Vector values are JSON lists, angles are degrees.  Any key may be omitted
    and falls back to the benchmark default.
    """
    groups = {"planet": {}, "vehicle": {}, "solver": {}, "mission": {}}
    targets = {f.name: "planet" for f in fields(PlanetConfig)}
    targets.update({f.name: "vehicle" for f in fields(VehicleConfig)})
    targets.update({f"solver_{f.name}": "solver" for f in fields(SolverSettings)})
    targets.update({"N": "mission", "glideslope_faces": "mission", "omega": "mission"})

    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in targets:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        value = _parse_value(value)
        if key in _DEG_KEYS:
            value = math.radians(value)
        if isinstance(value, list):
            value = tuple(float(v) for v in value)
        groups[targets[key]][key.removeprefix("solver_")] = value

    mission = groups["mission"]
    return MissionConfig(
        planet=PlanetConfig(**groups["planet"]),
        vehicle=VehicleConfig(**groups["vehicle"]),
        N=int(mission.get("N", 50)),
        glideslope_faces=int(mission.get("glideslope_faces", 4)),
        omega_override=mission.get("omega"),
        solver=SolverSettings(**groups["solver"]),
    )


def dump_mission(mission: MissionConfig, path) -> None:
    lines = ["# mission configuration (angles in degrees)"]
    for f in fields(PlanetConfig):
        v = getattr(mission.planet, f.name)
        if f.name in _DEG_KEYS:
            v = math.degrees(v)
        lines.append(f"{f.name} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    for f in fields(VehicleConfig):
        lines.append(f"{f.name} = {json.dumps(getattr(mission.vehicle, f.name))}")
    lines.append(f"N = {mission.N}")
    lines.append(f"glideslope_faces = {mission.glideslope_faces}")
    if mission.omega_override is not None:
        lines.append(f"omega = {json.dumps(list(mission.omega_override))}")
    for f in fields(SolverSettings):
        lines.append(f"solver_{f.name} = {json.dumps(getattr(mission.solver, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n")


def with_nodes(mission: MissionConfig, N: int) -> MissionConfig:
    return replace(mission, N=N)
