"""Command-line entry point: ``tracegrad <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
error, 5 evaluation error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from .data import DataError
from .evaluation import EvaluationError
from .experiment import (
    ExperimentConfig,
    Workspace,
    continual,
    evaluate_model,
    gen_corpus,
    pretrain,
    profile_stage,
    profile_summary,
    report,
    run_all,
)
from .model import CheckpointError, ConfigError
from .profiler import ProfilingError
from .tgl import MODES, PlanError
from .training import METHODS, StreamError, TrainingError

log = logging.getLogger("tracegrad")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_EVAL = 0, 2, 3, 4, 5
THREADS_ENV = "TRACEGRAD_NUM_THREADS"

# order matters: subclasses before their bases
_EXIT_CODES = [
    (ConfigError, EXIT_CONFIG),
    (PlanError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (CheckpointError, EXIT_DATA),
    (ProfilingError, EXIT_TRAINING),
    (StreamError, EXIT_TRAINING),
    (TrainingError, EXIT_TRAINING),
    (EvaluationError, EXIT_EVAL),
]


def exit_code_for(exc: BaseException) -> Optional[int]:
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="global seed; overrides every seed in the config")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="experiment directory (default: runs/default)")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help=f"single-threaded numerics with fixed reduction order (default on); {THREADS_ENV} is read only with --no-deterministic",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tracegrad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="generate corpora, probes and tokenizer")
    sub.add_parser("pretrain", parents=[common], help="domain pretraining on the snapshot")

    c = sub.add_parser("continual", parents=[common], help="one continual phase for a year, method and TGL mode")
    c.add_argument("--year", type=int, required=True)
    c.add_argument("--method", choices=METHODS, default="vanilla")
    c.add_argument("--tgl", choices=MODES, default="none")

    pr = sub.add_parser("profile", parents=[common], help="relative gradient profile of a checkpoint")
    pr.add_argument("--year", type=int, required=True)
    pr.add_argument("--checkpoint", type=Path, help="default: the domain-pretrained checkpoint")

    e = sub.add_parser("eval", parents=[common], help="span perplexity of a checkpoint on test probes")
    e.add_argument("--year", type=int, required=True)
    e.add_argument("--checkpoint", type=Path, help="default: the domain-pretrained checkpoint")
    e.add_argument("--save", type=Path, help="write the EvalResult JSON here")

    r = sub.add_parser("report", parents=[common], help="comparison tables from finished continual runs")
    r.add_argument("--year", type=int, help="default: every configured year")

    sub.add_parser("run", parents=[common], help="the whole pipeline")
    return p


def load_config(args) -> ExperimentConfig:
    """The config for ``args``: --config, else the saved one in --out, else defaults."""
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif (args.out / "config.json").exists() and args.command != "gen-corpus":
        cfg = ExperimentConfig.load(args.out / "config.json")
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    year = getattr(args, "year", None)
    if year is not None and not 1 <= year <= cfg.world.n_years:
        raise ConfigError(f"--year {year} outside 1..{cfg.world.n_years}")
    return cfg


def _threads(deterministic: bool):
    if deterministic:
        return threadpool_limits(limits=1)
    n = os.environ.get(THREADS_ENV)
    if n:
        try:
            return threadpool_limits(limits=int(n))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}")
    return contextlib.nullcontext()


def _dispatch(args, ws: Workspace) -> None:
    cmd = args.command
    if cmd == "gen-corpus":
        manifest = gen_corpus(ws, args.force)
        for name, info in sorted(manifest["files"].items()):
            extra = ", ".join(f"{k}={v}" for k, v in info.items() if k not in ("sha256", "counts"))
            print(f"{name}: {extra}" if extra else name)
    elif cmd == "pretrain":
        pretrain(ws, args.force)
        print(f"wrote {ws.pretrain_ckpt}")
    elif cmd == "continual":
        res = continual(ws, args.year, args.method, args.tgl, args.force)
        print(f"wrote {ws.run_dir(args.year, args.method, args.tgl)}")
        print(" ".join(f"{k}={v:.3f}" for k, v in res.per_category.items()))
    elif cmd == "profile":
        prof = profile_stage(ws, args.year, args.checkpoint, args.force)
        print(profile_summary(prof))
    elif cmd == "eval":
        path = args.checkpoint or ws.pretrain_ckpt
        res = evaluate_model(ws, ws.load_model(Path(path), "pretrain"), args.year)
        if args.save:
            res.save(args.save)
        print(" ".join(f"{k}={v:.3f}" for k, v in res.per_category.items()))
        for pid, reason in res.skipped:
            print(f"skipped {pid}: {reason}", file=sys.stderr)
    elif cmd == "report":
        years = [args.year] if args.year is not None else list(ws.cfg.years)
        for y in years:
            print(report(ws, y)[1])
    elif cmd == "run":
        for text in run_all(ws, args.force).values():
            print(text)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        ws = Workspace(args.out, cfg)
        with _threads(args.deterministic):
            _dispatch(args, ws)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        if code is None:
            raise
        print(f"tracegrad {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
