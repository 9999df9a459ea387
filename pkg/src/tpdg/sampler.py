"""Parameter sampling around a seed instance and labeled dataset generation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .lcvx import LAYOUT_VERSION, TIGHT_TOL, Strategy, build_socp, check_feasibility, extract_tight_constraints, n_flags
from .problem import THETA_NAMES, MissionConfig, ProblemParameters, reference_theta
from .solver import LineSearchConfig, full_solve, reduced_solve

log = logging.getLogger(__name__)

_EPS = 1e-9
# admissible box used for clipping: phi, gamma_gs, gamma_p, r0 (z > 0), v0
_DOMAIN_LO = np.array([0.0, _EPS, _EPS, -np.inf, -np.inf, 1e-3, -np.inf, -np.inf, -np.inf])
_DOMAIN_HI = np.array([math.pi / 2 - _EPS, math.pi / 2, math.pi / 2 - _EPS, np.inf, np.inf, np.inf, np.inf, np.inf, np.inf])


class DatasetVersionError(ValueError):
    """Dataset header is incompatible with the current configuration."""


@dataclass(frozen=True)
class SamplingSpec:
    theta0: ProblemParameters = field(default_factory=reference_theta)
    radius_angle: float = math.radians(10.0)
    radius_position: float = 500.0
    radius_velocity: float = 100.0
    count: int = 1000
    seed: int = 0
    ball: bool = False
    ranges: Optional[tuple] = None  # explicit (lo, hi) 9-vectors; overrides radii

    def __post_init__(self):
        if min(self.radius_angle, self.radius_position, self.radius_velocity) < 0:
            raise ValueError("radii must be non-negative")
        if self.count < 1:
            raise ValueError("count must be at least 1")

    def radii(self) -> np.ndarray:
        return np.repeat([self.radius_angle, self.radius_position, self.radius_velocity], 3)

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.ranges is not None:
            lo, hi = (np.asarray(a, dtype=float) for a in self.ranges)
        else:
            c, r = self.theta0.vector(), self.radii()
            lo, hi = c - r, c + r
        return np.clip(lo, _DOMAIN_LO, _DOMAIN_HI), np.clip(hi, _DOMAIN_LO, _DOMAIN_HI)

    def describe(self) -> dict:
        d = {
            "radius_angle_deg": math.degrees(self.radius_angle),
            "radius_position": self.radius_position,
            "radius_velocity": self.radius_velocity,
            "ball": self.ball,
            "seed": self.seed,
        }
        if self.ranges is not None:
            d["ranges"] = [list(map(float, a)) for a in self.ranges]
        return d


def benchmark_ranges_spec(count: int = 1000, seed: int = 0) -> SamplingSpec:
    """Per-axis ranges of the benchmark dataset, reproduced verbatim."""
    d = math.radians
    lo = [0.0, d(70.0), d(50.0), 1500.0, 1500.0, 500.0, -115.0, -115.0, -101.7]
    hi = [d(20.0), d(90.0), d(70.0), 2500.0, 2500.0, 1500.0, 85.0, 85.0, 70.0]
    return SamplingSpec(count=count, seed=seed, ranges=(tuple(lo), tuple(hi)))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index)."""
    return np.random.default_rng([seed, index])


def _unit_ball(rng: np.random.Generator, dim: int = 3) -> np.ndarray:
    d = rng.standard_normal(dim)
    d /= np.linalg.norm(d)
    return d * rng.random() ** (1.0 / dim)


def sample_theta(spec: SamplingSpec, rng: np.random.Generator) -> ProblemParameters:
    """One uniform draw around ``spec.theta0``, clipped to the admissible domain."""
    if spec.ball and spec.ranges is None:
        c = spec.theta0.vector()
        step = np.concatenate([_unit_ball(rng) * r for r in (spec.radius_angle, spec.radius_position, spec.radius_velocity)])
        theta = np.clip(c + step, _DOMAIN_LO, _DOMAIN_HI)
    else:
        lo, hi = spec.box()
        theta = lo + (hi - lo) * rng.random(9)
    return ProblemParameters.from_vector(theta)


@dataclass
class Dataset:
    header: dict
    theta: np.ndarray  # (n, 9), radians
    tau: np.ndarray  # (n, 8N-3) uint8
    t_f: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def N(self) -> int:
        return int(self.header["N"])

    def params(self, i: int) -> ProblemParameters:
        return ProblemParameters.from_vector(self.theta[i])

    def strategy(self, i: int) -> Strategy:
        return Strategy(self.tau[i].copy(), float(self.t_f[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(dict(self.header), self.theta[idx], self.tau[idx], self.t_f[idx])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.header == other.header
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.tau, other.tau)
            and np.array_equal(self.t_f, other.t_f)
        )


def label_one(mission: MissionConfig, params: ProblemParameters, ls: LineSearchConfig, tight_tol: float = TIGHT_TOL):
    """Full solve of one instance; (tau, t_f) or None when infeasible."""
    res = full_solve(mission, params, ls)
    if not res.optimal:
        return None
    socp = build_socp(mission, params, res.t_f)
    return extract_tight_constraints(socp, res, tight_tol), res.t_f


def _work(args):
    mission, spec, ls, tight_tol, index = args
    params = sample_theta(spec, sample_rng(spec.seed, index))
    return index, params.vector(), label_one(mission, params, ls, tight_tol)


def generate_dataset(
    mission: MissionConfig,
    spec: SamplingSpec,
    ls: LineSearchConfig = LineSearchConfig(),
    workers: int = 1,
    tight_tol: float = TIGHT_TOL,
    progress=None,
) -> Dataset:
    """Draw ``spec.count`` instances, solve each, keep the feasible ones.

    Results are merged by sample index, so the output does not depend on
    ``workers``.
    """
    jobs = [(mission, spec, ls, tight_tol, i) for i in range(spec.count)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, out in enumerate(pool.map(_work, jobs, chunksize=8)):
                results.append(out)
                if progress:
                    progress(i + 1, spec.count)
    else:
        for i, job in enumerate(jobs):
            results.append(_work(job))
            if progress:
                progress(i + 1, spec.count)
    results.sort(key=lambda r: r[0])

    M = n_flags(mission.N)
    kept = [(th, lab) for _, th, lab in results if lab is not None]
    theta = np.array([th for th, _ in kept], dtype=float).reshape(-1, 9)
    tau = np.array([lab[0] for _, lab in kept], dtype=np.uint8).reshape(-1, M)
    t_f = np.array([lab[1] for _, lab in kept], dtype=float)
    if not kept:
        log.warning("no feasible samples among %d draws", spec.count)
    header = {
        "layout_version": LAYOUT_VERSION,
        "N": mission.N,
        "mission_hash": mission.hash(),
        "attempted": spec.count,
        "stored": len(kept),
        "yield": len(kept) / spec.count,
        "tight_tol": tight_tol,
        **spec.describe(),
    }
    return Dataset(header, theta, tau, t_f)


def concat(datasets: list) -> Dataset:
    """Stack datasets sharing one layout and mission (multi-radius sampling)."""
    first = datasets[0]
    for d in datasets[1:]:
        for key in ("layout_version", "N", "mission_hash"):
            if d.header[key] != first.header[key]:
                raise DatasetVersionError(f"cannot concatenate datasets with different {key}")
    attempted = sum(d.header["attempted"] for d in datasets)
    stored = sum(len(d) for d in datasets)
    header = {k: first.header[k] for k in ("layout_version", "N", "mission_hash", "tight_tol")}
    header.update({"attempted": attempted, "stored": stored, "yield": stored / attempted, "parts": len(datasets)})
    return Dataset(
        header,
        np.concatenate([d.theta for d in datasets]),
        np.concatenate([d.tau for d in datasets]),
        np.concatenate([d.t_f for d in datasets]),
    )


def verify_samples(mission: MissionConfig, dataset: Dataset, fraction: float = 0.01, seed: int = 0) -> list:
    """Re-solve a random subsample at its stored strategy and check feasibility.

    Returns ``(index, feasible)`` pairs; at least one sample is checked.
    """
    n = len(dataset)
    k = max(1, int(round(fraction * n)))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=min(k, n), replace=False))
    out = []
    for i in idx:
        p, strat = dataset.params(i), dataset.strategy(i)
        res = reduced_solve(mission, p, strat)
        ok = res.optimal and check_feasibility(build_socp(mission, p, strat.t_f_star), res).feasible
        out.append((int(i), bool(ok)))
    return out


# -- file format -------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def write_dataset(dataset: Dataset, path) -> None:
    """CSV with ``# key=value`` header lines; angles stored in radians."""
    import json

    M = dataset.tau.shape[1]
    lines = [f"# {k}={json.dumps(v, sort_keys=True)}" for k, v in dataset.header.items()]
    cols = list(THETA_NAMES) + [f"tau_{i}" for i in range(M)] + ["t_f"]
    lines.append(",".join(cols))
    for th, ta, tf in zip(dataset.theta, dataset.tau, dataset.t_f):
        lines.append(",".join([*map(_fmt, th), *map(str, ta.tolist()), _fmt(tf)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path, mission: Optional[MissionConfig] = None) -> Dataset:
    """Load a dataset file; with ``mission`` the header is checked against it."""
    import json

    header, rows, cols = {}, [], None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = json.loads(value)
            elif cols is None:
                cols = line.split(",")
            elif line:
                rows.append(line.split(","))
    if header.get("layout_version") != LAYOUT_VERSION:
        raise DatasetVersionError(f"layout version {header.get('layout_version')!r}, expected {LAYOUT_VERSION!r}")
    N = int(header["N"])
    M = n_flags(N)
    if cols is None or len(cols) != 9 + M + 1:
        raise DatasetVersionError(f"expected {9 + M + 1} columns for N={N}")
    if mission is not None:
        if mission.N != N:
            raise DatasetVersionError(f"dataset has N={N}, configuration has N={mission.N}")
        if header.get("mission_hash") != mission.hash():
            raise DatasetVersionError("mission configuration hash mismatch")
    if rows:
        theta = np.array([[float(x) for x in r[:9]] for r in rows])
        tau = np.array([[int(x) for x in r[9 : 9 + M]] for r in rows], dtype=np.uint8)
        t_f = np.array([float(r[-1]) for r in rows])
    else:
        theta, tau, t_f = np.zeros((0, 9)), np.zeros((0, M), dtype=np.uint8), np.zeros(0)
    return Dataset(header, theta, tau, t_f)
