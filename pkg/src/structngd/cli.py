"""Experiment runner: `structngd run <problem> ...` and `structngd verify`.

Runs write one CSV per optimizer (iter,loss,grad_norm,wall_ms) and every run
is reproducible from its JSON manifest; command-line flags override manifest
values loaded with --config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, SingularityError
from .matgroup import StructureSpec
from .optimizer import NgdConfig, run_baseline, run_loop
from .problems import dixon_price, metric_nearness, rosenbrock, student_t_mixture_target

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

STRUCTURE_NAMES = ("full", "diag", "tri-up", "tri-low", "hs-up", "hs-low", "kron")
PROBLEMS = ("rosenbrock", "dixon-price", "metric-nearness", "mixture-vi")


@dataclass
class RunManifest:
    problem: str
    p: int = 10
    d: int | None = None
    k: int | None = None
    k1: int | None = None
    k2: int | None = None
    K: int | None = None              # mixture components
    C: int | None = None              # target components
    structure: str = "full"
    beta: float = 0.1
    gamma: float = 0.0
    iters: int = 100
    samples: int = 1
    seed: int = 0
    estimator: str = "mean"
    map: str = "h"
    baselines: list = field(default_factory=list)
    out: str = "trace.csv"
    batch_size: int | None = None
    data_seed: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunManifest":
        return RunManifest(**json.loads(text))


def build_structure(manifest: RunManifest, p: int) -> StructureSpec:
    name = manifest.structure
    if name == "full":
        return StructureSpec.full(p)
    if name == "diag":
        return StructureSpec.diagonal(p)
    if name in ("tri-up", "tri-low"):
        if manifest.k is None:
            raise ContractViolationError("--k is required for tri structures")
        make = (StructureSpec.block_tri_upper if name == "tri-up"
                else StructureSpec.block_tri_lower)
        return make(p, manifest.k)
    if name in ("hs-up", "hs-low"):
        if manifest.k1 is None or manifest.k2 is None:
            raise ContractViolationError("--k1/--k2 are required for hs structures")
        make = (StructureSpec.heisenberg_upper if name == "hs-up"
                else StructureSpec.heisenberg_lower)
        return make(p, manifest.k1, manifest.k2)
    raise ContractViolationError(f"structure {name!r} is not runnable here")


def build_problem(manifest: RunManifest):
    if manifest.problem == "rosenbrock":
        return rosenbrock(manifest.p)
    if manifest.problem == "dixon-price":
        return dixon_price(manifest.p)
    if manifest.problem == "metric-nearness":
        return metric_nearness(manifest.p, n_train=2000, n_test=400,
                               seed=manifest.data_seed, d=manifest.d)
    if manifest.problem == "mixture-vi":
        return student_t_mixture_target(manifest.p, C=manifest.C or 2,
                                        s=manifest.p / 2.0, alpha=2.0,
                                        seed=manifest.data_seed)
    raise ContractViolationError(f"unknown problem {manifest.problem!r}")


def validate_manifest(manifest: RunManifest):
    if manifest.problem not in PROBLEMS:
        raise ContractViolationError(f"unknown problem {manifest.problem!r}")
    if manifest.structure not in STRUCTURE_NAMES:
        raise ContractViolationError(f"unknown structure {manifest.structure!r}")
    if manifest.problem == "metric-nearness":
        if manifest.structure != "full":
            raise ContractViolationError("metric-nearness runs need --structure full")
        if manifest.estimator not in ("mean", "reparam"):
            raise ContractViolationError(
                "metric-nearness supports the mean and reparam estimators")
        if manifest.gamma != 0.0:
            raise ContractViolationError("the Wishart search runs use gamma = 0")
    if manifest.problem == "mixture-vi" and manifest.estimator != "stein":
        raise ContractViolationError(
            "mixture-vi uses the second-order Monte Carlo estimator (stein)")
    if manifest.structure == "kron":
        raise ContractViolationError(
            "the Kronecker structure backs the matrix-Gaussian stepper, "
            "not these experiment problems")
    if (manifest.estimator in ("reinforce", "reparam")
            and manifest.problem in ("rosenbrock", "dixon-price")
            and manifest.structure not in ("full", "diag")):
        raise ContractViolationError(
            "covariance-form estimators need a full or diag structure")


def write_trace(path: Path, trace) -> None:
    lines = ["iter,loss,grad_norm,wall_ms"]
    for row in trace:
        lines.append("%d,%.17g,%.17g,%.3f" % (row["iter"], row["loss"],
                                              row["grad_norm"], row["wall_ms"]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_run(manifest: RunManifest) -> int:
    try:
        validate_manifest(manifest)
        problem = build_problem(manifest)
        structure = build_structure(manifest, problem.p)
        cfg = NgdConfig(beta=manifest.beta, gamma=manifest.gamma,
                        iters=manifest.iters, estimator=manifest.estimator,
                        mc_samples=manifest.samples, seed=manifest.seed,
                        structure=structure, map=manifest.map)
    except ContractViolationError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(manifest.out)
    try:
        trace = run_loop(problem, cfg, mixture_k=manifest.K or 1,
                         batch_size=manifest.batch_size)
    except (SingularityError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_trace(out, trace)
    manifest_path = out.with_suffix(".manifest.json")
    manifest_path.write_text(manifest.to_json() + "\n", encoding="utf-8")
    for baseline in manifest.baselines:
        lr = 0.01 if baseline == "adam" else 0.001
        b_trace = run_baseline(problem, baseline, lr=lr, iters=manifest.iters)
        write_trace(out.with_suffix(f".{baseline}.csv"), b_trace)
    return EXIT_OK


def cmd_verify(fault: str | None = None) -> int:
    from .verify import run_checks

    results = run_checks(fault=fault)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        all_ok &= r.passed
        print(f"{r.name.ljust(width)}  {mark}  {r.detail}")
    return EXIT_OK if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structngd")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write CSV traces")
    run.add_argument("problem", choices=PROBLEMS)
    run.add_argument("--config", type=str, default=None,
                     help="JSON manifest; flags override its values")
    run.add_argument("--p", type=int)
    run.add_argument("--d", type=int)
    run.add_argument("--k", type=int)
    run.add_argument("--k1", type=int)
    run.add_argument("--k2", type=int)
    run.add_argument("--K", type=int)
    run.add_argument("--C", type=int)
    run.add_argument("--structure", choices=STRUCTURE_NAMES)
    run.add_argument("--beta", type=float)
    run.add_argument("--gamma", type=float)
    run.add_argument("--iters", type=int)
    run.add_argument("--samples", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--estimator",
                     choices=("reinforce", "reparam", "stein", "mean"))
    run.add_argument("--map", choices=("h", "exp"))
    run.add_argument("--baseline", action="append", choices=("adam", "gd"),
                     default=None)
    run.add_argument("--out", type=str)
    run.add_argument("--batch-size", type=int, dest="batch_size")
    run.add_argument("--data-seed", type=int, dest="data_seed")

    ver = sub.add_parser("verify", help="run the oracle/property suite")
    ver.add_argument("--inject-fault", choices=("c-mask",), default=None,
                     help="test hook: corrupt a kernel to prove detection")
    return parser


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    if args.config:
        manifest = RunManifest.from_json(Path(args.config).read_text())
        manifest.problem = args.problem
    else:
        manifest = RunManifest(problem=args.problem)
    overrides = {
        "p": args.p, "d": args.d, "k": args.k, "k1": args.k1, "k2": args.k2,
        "K": args.K, "C": args.C, "structure": args.structure,
        "beta": args.beta, "gamma": args.gamma, "iters": args.iters,
        "samples": args.samples, "seed": args.seed,
        "estimator": args.estimator, "map": args.map,
        "baselines": args.baseline, "out": args.out,
        "batch_size": args.batch_size, "data_seed": args.data_seed,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(manifest, name, value)
    return manifest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return cmd_verify(fault=args.inject_fault)
    try:
        manifest = manifest_from_args(args)
    except (json.JSONDecodeError, TypeError, OSError) as exc:
        print(f"usage error: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return cmd_run(manifest)


if __name__ == "__main__":
    sys.exit(main())
