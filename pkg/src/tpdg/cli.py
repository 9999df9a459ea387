"""Command-line entry point: sample, train, solve, tpdg, bench, export-embeddings."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import statistics
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .problem import DomainError, MissionConfig, ProblemParameters, load_mission, reference_theta
from .solver import LineSearchConfig, full_solve, solve_fixed

log = logging.getLogger("tpdg")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2  # argparse
EXIT_INFEASIBLE = 3


class CliError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------


def _mission(args) -> MissionConfig:
    return load_mission(args.config) if args.config else MissionConfig()


def _theta(args) -> ProblemParameters:
    """θ from ``--theta`` (degrees for the three angles) or the reference instance."""
    if args.theta is None:
        return reference_theta()
    vals = [float(v) for v in args.theta.split(",")]
    if len(vals) != 9:
        raise CliError("--theta takes 9 comma-separated values: phi,gamma_gs,gamma_p,r0x,r0y,r0z,v0x,v0y,v0z")
    return ProblemParameters.from_degrees(vals[0], vals[1], vals[2], vals[3:6], vals[6:9])


def _line_search(args) -> LineSearchConfig:
    return LineSearchConfig(t_lo=args.t_lo, t_hi=args.t_hi, coarse_grid=args.grid, refine_tol=args.refine_tol)


def _versions() -> dict:
    import clarabel
    import scipy
    import torch

    return {"tpdg": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__, "clarabel": clarabel.__version__}


def write_manifest(path, command: str, args, mission: MissionConfig, extra: Optional[dict] = None) -> None:
    """Run manifest next to an output file: command, arguments, config hash, versions."""
    opts = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"command": command, "args": opts, "mission_hash": mission.hash(), "seed": opts.get("seed"), "versions": _versions()}
    if extra:
        doc.update(extra)
    Path(str(path) + ".manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_models(args, mission):
    from .nn import ModelBundle

    paths = [args.constraint_model, args.time_model]
    if not all(paths):
        raise CliError("both --constraint-model and --time-model are required")
    for p in paths:
        if not os.path.exists(p):
            raise CliError(f"model file not found: {p}")
    cm, tm = ModelBundle.load(paths[0]), ModelBundle.load(paths[1])
    cm.check_compatible(mission)
    tm.check_compatible(mission)
    return cm, tm


# -- bench -------------------------------------------------------------------


@dataclass
class BenchRow:
    name: str
    feasibility_pct: float
    mean_ms: float
    std_ms: float
    n: int


@dataclass
class BenchReport:
    algorithms: list
    stages: list
    speedup: float  # mean full-solve time / mean tpdg time
    check_pass_pct: float
    mission_hash: str = ""
    per_sample: list = field(default_factory=list)

    def row(self, name: str) -> BenchRow:
        return next(r for r in self.algorithms + self.stages if r.name == name)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# mission_hash={self.mission_hash}\n")
            fh.write(f"# speedup={self.speedup!r}\n")
            fh.write(f"# feasibility_check_pass_pct={self.check_pass_pct!r}\n")
            w = csv.writer(fh)
            w.writerow(["section", "name", "feasibility_pct", "mean_ms", "std_ms", "n"])
            for section, rows in (("algorithm", self.algorithms), ("stage", self.stages)):
                for r in rows:
                    w.writerow([section, r.name, r.feasibility_pct, r.mean_ms, r.std_ms, r.n])

    def summary(self) -> str:
        lines = [f"{'algorithm':<28}{'feasible %':>11}{'mean ms':>11}{'std ms':>11}"]
        for r in self.algorithms + self.stages:
            lines.append(f"{r.name:<28}{r.feasibility_pct:>11.2f}{r.mean_ms:>11.2f}{r.std_ms:>11.2f}")
        lines.append(f"speedup (full / tpdg): {self.speedup:.3f}x; reduction {100 * (1 - 1 / self.speedup):.1f}%")
        lines.append(f"feasibility-check pass rate: {self.check_pass_pct:.2f}%")
        return "\n".join(lines)


def _stats(xs) -> tuple[float, float]:
    if not xs:
        return math.nan, math.nan
    return statistics.fmean(xs), statistics.pstdev(xs) if len(xs) > 1 else 0.0


def run_bench(mission, thetas, models=None, strategies=None, ls: LineSearchConfig = LineSearchConfig(), **tpdg_kw) -> BenchReport:
    """Paired comparison of full_solve and tpdg on the same θ list.

    ``strategies`` (one per θ) replaces model prediction, e.g. for oracle or
    corrupted-strategy runs.
    """
    from .runtime import REDUCED_ACCEPTED, STAGES, tpdg

    full_ms, full_ok, tp_ms, tp_ok, accepted = [], [], [], [], []
    stage_ms = {s: [] for s in STAGES}
    per = []
    for i, p in enumerate(thetas):
        fs = full_solve(mission, p, ls)
        out = tpdg(mission, p, models, ls, strategy=None if strategies is None else strategies[i], **tpdg_kw)
        full_ms.append(fs.wall_time)
        full_ok.append(fs.optimal)
        tp_ms.append(out.total_ms)
        tp_ok.append(out.feasible)
        accepted.append(out.path_taken == REDUCED_ACCEPTED)
        for s, v in out.timings.items():
            stage_ms[s].append(v)
        per.append({"index": i, "full_ms": fs.wall_time, "full_cost": fs.cost, "full_t_f": fs.t_f, **out.record()})

    def pct(flags):
        return 100.0 * sum(flags) / len(flags) if flags else math.nan

    algos = [
        BenchRow("lcvx_full_solve", pct(full_ok), *_stats(full_ms), len(full_ms)),
        BenchRow("tpdg", pct(tp_ok), *_stats(tp_ms), len(tp_ms)),
    ]
    stages = [BenchRow(f"tpdg.{s}", math.nan, *_stats(v), len(v)) for s, v in stage_ms.items()]
    mf, mt = _stats(full_ms)[0], _stats(tp_ms)[0]
    speed = mf / mt if mt > 0 else math.nan
    return BenchReport(algos, stages, speed, pct(accepted), mission.hash(), per)


# -- commands ----------------------------------------------------------------


def cmd_sample(args) -> int:
    from .sampler import SamplingSpec, generate_dataset, benchmark_ranges_spec, write_dataset

    mission = _mission(args)
    if args.benchmark_ranges:
        spec = benchmark_ranges_spec(args.count, args.seed)
    else:
        spec = SamplingSpec(
            theta0=_theta(args),
            radius_angle=math.radians(args.radius_angle),
            radius_position=args.radius_position,
            radius_velocity=args.radius_velocity,
            count=args.count,
            seed=args.seed,
            ball=args.ball,
        )
    ds = generate_dataset(mission, spec, _line_search(args), workers=args.workers)
    write_dataset(ds, args.out)
    write_manifest(args.out, "sample", args, mission, {"output_sha256": _sha256(args.out), "yield": ds.header["yield"]})
    print(f"stored {len(ds)} of {spec.count} samples (yield {ds.header['yield']:.3f}) -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .nn import CONSTRAINTS, TrainConfig, TransformerConfig, split_indices, train
    from .sampler import read_dataset, write_dataset

    torch.set_num_threads(max(1, args.workers))
    mission = _mission(args)
    ds = read_dataset(args.dataset, mission)
    if args.which == CONSTRAINTS:
        mcfg, tcfg = TransformerConfig.constraint_default(ds.N), TrainConfig.constraint_default()
    else:
        mcfg, tcfg = TransformerConfig.time_default(), TrainConfig.time_default()
    over = {k: getattr(args, k) for k in ("d_model", "n_heads", "n_layers", "d_ff", "dropout", "tokens", "positional", "norm")}
    mcfg = replace(mcfg, **{k: v for k, v in over.items() if v is not None})
    if args.d_model is not None and args.d_ff is None:
        mcfg = replace(mcfg, d_ff=4 * args.d_model)
    tover = {k: getattr(args, k) for k in ("batch_size", "base_lr", "schedule", "warmup_steps", "k_folds", "epochs")}
    tcfg = replace(tcfg, seed=args.seed, **{k: v for k, v in tover.items() if v is not None})

    tr_idx, te_idx = split_indices(len(ds), args.test_fraction, args.seed)
    trainval, test = ds.subset(tr_idx), ds.subset(te_idx)
    if args.test_out:
        write_dataset(test, args.test_out)
    bundle, metrics = train(trainval, mcfg, tcfg, args.which, test=test, log_path=args.log, mission_hash=mission.hash())
    bundle.save(args.out)
    write_manifest(args.out, "train", args, mission, {"metrics": metrics, "n_parameters": bundle.n_parameters})
    print(json.dumps(metrics.get("test", {}), indent=2))
    return EXIT_OK


def cmd_solve(args) -> int:
    mission = _mission(args)
    params = _theta(args)
    res = solve_fixed(mission, params, args.t_f) if args.t_f else full_solve(mission, params, _line_search(args))
    if args.out_json:
        res.write_json(args.out_json)
        write_manifest(args.out_json, "solve", args, mission)
    if res.optimal and args.out_csv:
        res.write_csv(args.out_csv)
    print(json.dumps(res.summary(), indent=2))
    return EXIT_OK if res.optimal else EXIT_INFEASIBLE


def cmd_tpdg(args) -> int:
    from .runtime import tpdg

    mission = _mission(args)
    params = _theta(args)
    models = _load_models(args, mission)
    out = tpdg(mission, params, models, _line_search(args), tau_on=args.tau_on, t_margin=args.margin, check=args.check)
    if args.out_json:
        out.write_json(args.out_json)
        write_manifest(args.out_json, "tpdg", args, mission)
    if out.feasible and args.out_csv:
        out.solution.write_csv(args.out_csv)
    print(json.dumps(out.record(), indent=2))
    return EXIT_OK if out.feasible else EXIT_INFEASIBLE


def cmd_bench(args) -> int:
    from .sampler import read_dataset

    mission = _mission(args)
    models = _load_models(args, mission)
    ds = read_dataset(args.dataset, mission)
    n = len(ds) if args.count is None else min(args.count, len(ds))
    thetas = [ds.params(i) for i in range(n)]
    rep = run_bench(mission, thetas, models, ls=_line_search(args), tau_on=args.tau_on, t_margin=args.margin, check=args.check)
    rep.write_csv(args.out)
    write_manifest(args.out, "bench", args, mission, {"n": n})
    print(rep.summary())
    return EXIT_OK


def cmd_export(args) -> int:
    from .nn import ModelBundle, export_embeddings
    from .sampler import read_dataset

    mission = _mission(args)
    if not os.path.exists(args.model):
        raise CliError(f"model file not found: {args.model}")
    bundle = ModelBundle.load(args.model)
    bundle.check_compatible(mission)
    ds = read_dataset(args.dataset, mission)
    emb = export_embeddings(bundle, ds, args.out)
    write_manifest(args.out, "export-embeddings", args, mission)
    print(f"wrote {emb.shape[0]} embeddings of width {emb.shape[1]} -> {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    cores = os.cpu_count() or 1
    p = argparse.ArgumentParser(prog="tpdg", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers_default=1):
        sp.add_argument("--config", help="mission file (key = value lines)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=workers_default)

    def theta(sp):
        sp.add_argument("--theta", help="phi,gamma_gs,gamma_p (deg),r0x,r0y,r0z (m),v0x,v0y,v0z (m/s); default: reference instance")

    def search(sp):
        sp.add_argument("--t-lo", type=float, default=5.0)
        sp.add_argument("--t-hi", type=float, default=None)
        sp.add_argument("--grid", type=int, default=20)
        sp.add_argument("--refine-tol", type=float, default=0.1)

    def guidance(sp):
        sp.add_argument("--constraint-model")
        sp.add_argument("--time-model")
        sp.add_argument("--tau-on", type=float, default=0.5)
        sp.add_argument("--margin", type=float, default=1.0, help="multiplicative margin on predicted t_f")
        sp.add_argument("--check", choices=("residual", "resolve"), default="residual")

    sp = sub.add_parser("sample", help="generate a labeled dataset")
    common(sp, cores)
    theta(sp)
    search(sp)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--radius-angle", type=float, default=10.0, help="deg")
    sp.add_argument("--radius-position", type=float, default=500.0)
    sp.add_argument("--radius-velocity", type=float, default=100.0)
    sp.add_argument("--ball", action="store_true", help="sample inside balls instead of boxes")
    sp.add_argument("--benchmark-ranges", action="store_true", help="use the benchmark per-axis ranges verbatim")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("train", help="train the constraint or time model")
    common(sp, 1)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--which", choices=("constraints", "time"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="training log CSV")
    sp.add_argument("--test-out", help="write the held-out split here")
    sp.add_argument("--test-fraction", type=float, default=0.2)
    for name, typ in (("d-model", int), ("n-heads", int), ("n-layers", int), ("d-ff", int), ("dropout", float),
                      ("batch-size", int), ("base-lr", float), ("warmup-steps", int), ("k-folds", int), ("epochs", int)):
        sp.add_argument(f"--{name}", type=typ)
    sp.add_argument("--schedule", choices=("constant", "warmup"))
    sp.add_argument("--tokens", choices=("per_scalar", "single"))
    sp.add_argument("--positional", choices=("learned", "sinusoidal", "none"))
    sp.add_argument("--norm", choices=("post", "pre"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("solve", help="full solve of one instance")
    common(sp)
    theta(sp)
    search(sp)
    sp.add_argument("--t-f", type=float, help="fixed final time; omit for the free-time search")
    sp.add_argument("--out-csv")
    sp.add_argument("--out-json")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("tpdg", help="predicted-strategy solve with fallback")
    common(sp)
    theta(sp)
    search(sp)
    guidance(sp)
    sp.add_argument("--out-csv")
    sp.add_argument("--out-json")
    sp.set_defaults(func=cmd_tpdg)

    sp = sub.add_parser("bench", help="paired timing of full solve and tpdg")
    common(sp, cores)
    search(sp)
    guidance(sp)
    sp.add_argument("--dataset", required=True, help="held-out dataset")
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export-embeddings", help="pre-decoder embeddings as CSV")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DomainError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
