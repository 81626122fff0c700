"""Command-line entry point: ``tempheno <subcommand> --config <path> [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 bad input data, 2 configuration error, 3 missing
artifact from an earlier stage, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from tempheno import stages
from tempheno.config import from_dict, load
from tempheno.errors import ConfigError, DataError, MissingArtifactError, NumericError
from tempheno.synth import SynthSpec

logger = logging.getLogger("tempheno")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _csv_strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _k_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


# (flag, config key, type, help); a None type marks a store_true flag
IMPUTE_FLAGS = [
    ("--rank", "impute.rank", int, "factor rank"),
    ("--max-shift", "impute.max_shift", int, "largest |shift| in hours"),
    ("--tol", "impute.tol", float, "relative objective decrease that counts as converged"),
    ("--max-iters", "impute.max_iters", int, "outer iteration cap"),
]
CLUSTER_FLAGS = [
    ("--K", "cluster.K", int, "number of soft clusters"),
    ("--eta", "cluster.eta", float, "fuzzifier"),
    ("--beta1", "cluster.beta1", float, "weight of the target supervised term"),
    ("--beta2", "cluster.beta2", float, "weight of the non-target supervised term"),
    ("--l-rate", "cluster.l_rate", float, "calibration step size"),
    ("--t-max", "cluster.t_max", int, "iteration cap"),
    ("--truncated-features", "cluster.truncated_features", _csv_strs, "comma-separated feature names"),
    ("--trunc-window", "cluster.trunc_window", int, "hours kept for truncated features"),
    ("--trunc-scale", "cluster.trunc_scale", float, "distance weight of truncated features"),
    ("--membership-exponent", "cluster.membership_exponent", float, "exponent of the final memberships"),
    ("--max-overlap", "cluster.max_overlap", int, "cap on clusters per subject"),
    ("--reduction", "cluster.reduction", str, "calibration loss reduction: sum or mean"),
]
POST_FLAGS = [
    ("--k", "post.k", int, "fixed number of hybrid sub-phenotypes (skips the sweep)"),
    ("--min-k", "post.min_k", int, "smallest k eligible in the sweep"),
]
PREDICT_FLAGS = [
    ("--horizons", "predict.horizons", _csv_ints, "comma-separated horizons in hours"),
    ("--split", "predict.split", float, "test fraction of the stratified split"),
    ("--lr", "predict.lr", float, "gradient descent step"),
    ("--iters", "predict.iters", int, "gradient descent iterations"),
    ("--l2", "predict.l2", float, "L2 penalty on non-bias weights"),
]
STAGE_FLAGS = {
    "synth": [],
    "ingest": [],
    "impute": IMPUTE_FLAGS,
    "cluster": CLUSTER_FLAGS,
    "post": POST_FLAGS,
    "predict": PREDICT_FLAGS,
    "report": [],
}
STAGE_FLAGS["run-all"] = IMPUTE_FLAGS + CLUSTER_FLAGS + POST_FLAGS + PREDICT_FLAGS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempheno", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in STAGE_FLAGS.items():
        p = sub.add_parser(name)
        if name == "synth":
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--config", type=Path, help="pipeline config JSON")
            src.add_argument("--spec", type=Path, help="synthetic cohort spec JSON")
        else:
            p.add_argument("--config", type=Path, required=True, help="pipeline config JSON")
        p.add_argument("--out", help="run directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="seed (overrides config 'seed')")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, key, typ, help_text in flags:
            p.add_argument(flag, dest=key, type=typ, default=None, help=help_text)
        if name in ("cluster", "run-all"):
            p.add_argument("--no-early-stop", dest="cluster.early_stop", action="store_const",
                           const=False, default=None, help="always run t_max iterations")
        if name in ("post", "run-all"):
            p.add_argument("--sweep", type=_k_range, default=None, metavar="LO-HI",
                           help="k range for the silhouette sweep, e.g. 2-20")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    if getattr(args, "sweep", None) is not None:
        out["post.k_min"], out["post.k_max"] = args.sweep
    if args.out is not None:
        out["out"] = args.out
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _config(args: argparse.Namespace):
    overrides = _overrides(args)
    if getattr(args, "spec", None) is not None:
        path = args.spec
        if not path.is_file():
            raise ConfigError(f"spec file not found: {path}")
        try:
            spec = SynthSpec.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        data = {"synth": {k: v for k, v in spec.__dict__.items() if k != "seed"}, "seed": spec.seed}
        return from_dict(data, overrides)
    return load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        out = Path(config.out)
        if args.command == "run-all":
            stages.run_all(config, out)
        else:
            stages.RUNNERS[args.command](config, out)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
