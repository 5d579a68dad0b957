"""Command-line entry point: ``dpsos estimate | gen-data | verify | bench``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .coarse import CoarseError
from .fine import EstimationError, FineConfig, private_mean_estimate
from .harness import (AdversarySpec, ExperimentConfig, GeneratorSpec, corrupt, gen_dataset,
                      read_dataset, run_experiment, write_dataset)
from .mechanisms import BudgetExceeded, RngSeed, resolve_seed
from .verify import INJECTIONS, SUITES, run_suites

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors; 2 is reserved for IO
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpsos", description="Pure-DP mean estimation via SoS-scored exponential mechanisms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="estimate the mean of a CSV dataset")
    e.add_argument("--input", required=True, help="CSV file, one sample per row, no header")
    e.add_argument("--R", type=float, required=True, help="prior bound on the mean norm")
    e.add_argument("--alpha", type=float, default=0.5, help="target accuracy (bucket size ceil(1/alpha^2))")
    e.add_argument("--eps", type=float, required=True, help="total privacy budget")
    e.add_argument("--beta", type=float, default=0.05, help="failure probability")
    e.add_argument("--seed", type=_seed, default=None, help="RNG seed (default: $DPSOS_SEED)")
    e.add_argument("--strategy", choices=("auto", "coordinatewise", "sos"), default="auto")
    e.add_argument("--profile", choices=("full", "test"), default="test",
                   help="fine-phase constants: full (M=1000) or test (M=5)")
    e.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")
    e.add_argument("--force", action="store_true", help="lift the SoS size guard")
    e.add_argument("--noiseless", action="store_true", help="non-private argmax run for debugging")
    e.add_argument("--coarse-only", action="store_true", help="skip the fine phase")

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--kind", choices=("gaussian", "point_mass", "packing_hard"), default="gaussian")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--seed", type=_seed, default=None)
    g.add_argument("--mu", type=_floats, default=None, help="gaussian mean, comma-separated")
    g.add_argument("--cov-scale", type=float, default=1.0)
    g.add_argument("--c", type=_floats, default=None, help="point-mass location")
    g.add_argument("--alpha", type=float, default=0.04, help="packing_hard alpha")
    g.add_argument("--kmoment", type=int, default=2, help="packing_hard moment order")
    g.add_argument("--eta", type=float, default=0.0, help="corruption fraction")
    g.add_argument("--mode", choices=("replace_far", "cluster_decoy"), default="replace_far")
    g.add_argument("--radius", type=float, default=1000.0)
    g.add_argument("--point", type=_floats, default=None)
    g.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--seed", type=_seed, default=None)
    v.add_argument("--inject-fault", choices=INJECTIONS, default=None,
                   help="self-test: corrupt a property so the suite must fail")

    b = sub.add_parser("bench", help="run an experiment grid from a JSON config")
    b.add_argument("--config", required=True, help="JSON object or list of experiment configs")
    b.add_argument("--out-dir", required=True)
    return p


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def cmd_estimate(a) -> int:
    try:
        X = read_dataset(a.input)
    except OSError as exc:
        print(f"error: cannot read {a.input}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    fine = FineConfig.full() if a.profile == "full" else FineConfig.test()
    seed = resolve_seed(a.seed)
    rep = private_mean_estimate(X, a.R, a.alpha, a.eps, a.beta, rng=RngSeed(seed), fine=fine,
                                strategy=a.strategy, noiseless=a.noiseless, skip_fine=a.coarse_only,
                                force=a.force)
    text = rep.to_json() + "\n"
    if a.out:
        try:
            Path(a.out).write_text(text)
        except OSError as exc:
            print(f"error: cannot write {a.out}: {exc.strerror or exc}", file=sys.stderr)
            return EXIT_IO
        est = ", ".join(f"{v:.6g}" for v in rep.estimate)
        print(f"estimate [{est}]  eps spent {rep.epsilon_spent}  seed {rep.seed}  -> {a.out}")
        if a.profile == "full":
            print("note: full profile; accuracy guarantees need sample sizes far beyond desk scale")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_data(a) -> int:
    spec = GeneratorSpec(kind=a.kind, n=a.n, d=a.d, seed=resolve_seed(a.seed), mu=a.mu,
                         cov_scale=a.cov_scale, c=a.c, alpha=a.alpha, kmoment=a.kmoment)
    X = gen_dataset(spec)
    n_bad = 0
    if a.eta > 0:
        X, idx = corrupt(X, AdversarySpec(a.eta, a.mode, a.radius, a.point),
                         RngSeed(spec.seed).child("adversary"))
        n_bad = len(idx)
    try:
        write_dataset(a.out, X)
    except OSError as exc:
        print(f"error: cannot write {a.out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    mean = ", ".join(f"{v:.6g}" for v in spec.true_mean())
    print(f"wrote {X.shape[0]} x {X.shape[1]} ({a.kind}, {n_bad} corrupted, true mean [{mean}]) to {a.out}")
    return EXIT_OK


def cmd_verify(a) -> int:
    names = SUITES if a.suite == "all" else (a.suite,)
    checks = run_suites(names, resolve_seed(a.seed), a.inject_fault)
    for c in checks:
        tag = "PASS" if c.passed else "FAIL"
        extra = f"  {c.detail}" if c.detail else ""
        print(f"{tag}  {c.suite:<10} {c.name:<45} margin={c.margin:+.3g}{extra}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} properties hold")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_bench(a) -> int:
    cfg = _load_json(a.config)
    configs = cfg if isinstance(cfg, list) else [cfg]
    configs = [ExperimentConfig.from_dict(c) for c in configs]
    reports = run_experiment(configs, a.out_dir)
    errs = [r["error"] for r in reports if "error" in r]
    med = f"{np.median(errs):.4g}" if errs else "n/a"
    print(f"{len(reports)} runs, {len(reports) - len(errs)} failed, median error {med}; "
          f"wrote {a.out_dir}/report.jsonl and summary.csv")
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "gen-data": cmd_gen_data, "verify": cmd_verify,
            "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EstimationError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError, BudgetExceeded, CoarseError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
