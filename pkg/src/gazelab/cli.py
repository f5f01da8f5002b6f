"""Command-line entry point: ``gazelab <command> [options]``.

Failures exit nonzero after printing one line of the form
``error: {"type": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

from . import stats
from .config import RunConfig, load_config
from .losses import Condition

DEFAULT_ROOT = "gazelab-out"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def git_stamp() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if res.returncode == 0 and res.stdout.strip():
            return res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"gazelab-{__version__}"


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed)


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get("GZLB_OUT", DEFAULT_ROOT)) / args.command


def _schedule_overrides(args, cfg: RunConfig) -> RunConfig:
    import dataclasses

    sched = cfg.schedule
    changes = {k: getattr(args, k) for k in ("pretrain_iters", "pair_iters") if getattr(args, k, None) is not None}
    return dataclasses.replace(cfg, schedule=dataclasses.replace(sched, **changes)) if changes else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> None:
    from .synthgen import make_dataset

    cfg = _config(args)
    out = _out_dir(args, cfg)
    d = cfg.data
    data = make_dataset(d.n_identities, d.frames_per_identity, d.image_size, cfg.seed, out_dir=out,
                        write_masks=d.write_masks)
    _emit({"dataset": str(out / "manifest.json"), "samples": len(data)})


def cmd_train_expert(args) -> None:
    from .experiment import expert_path, train_experts

    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    errs = train_experts(cfg, out)
    _emit({role: {"checkpoint": str(expert_path(out, role)), "test_error_deg": e} for role, e in errs.items()})


def cmd_experiment(args, only_pair: str | None = None) -> None:
    from .experiment import build_benchmark, run_experiment

    cfg = _schedule_overrides(args, _config(args))
    if args.condition:
        cfg = cfg.with_overrides(conditions=tuple(args.condition))
    pairs = [only_pair] if only_pair else (args.pair or None)
    if pairs is None and args.n_pairs is not None:
        pairs = [p.name for p in build_benchmark(cfg).pairs][:args.n_pairs]
    out = _out_dir(args, cfg)
    reports = run_experiment(cfg, out, jobs=args.jobs, stamp=git_stamp(), pairs=pairs)
    _emit({"out": str(out), "report": str(out / "report" / "report.md"),
           "mean_error_deg": {r.oracle: r.condition_mean for r in reports}})


def cmd_train_swap(args) -> None:
    args.condition = [args.swap_condition]
    args.pair, args.n_pairs = None, None
    cmd_experiment(args, only_pair=args.pair_name)


def cmd_analyze(args) -> None:
    path = Path(args.csv) if args.csv else stats.fixture_path()
    responses = stats.read_survey_csv(path)
    out = _out_dir(args, _config(args))
    stats.write_analysis(stats.analyze_survey(responses), out)
    _emit({"input": str(path), "responses": len(responses), "out": str(out)})


def cmd_report(args) -> None:
    from .experiment import report_runs

    cfg = _config(args)
    out = Path(args.out) if args.out else Path(args.runs[0]) / "report"
    reports = report_runs(args.runs, out, seed=cfg.seed, stamp=git_stamp())
    _emit({"out": str(out), "mean_error_deg": {r.oracle: r.condition_mean for r in reports}})


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", help="output directory (default: $GZLB_OUT/<command>)")

    parser = _Parser(prog="gazelab", description="Gaze-aware face-swap training and evaluation on synthetic faces.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-expert", parents=[common], help="train the training and evaluation gaze experts")
    p.set_defaults(fn=cmd_train_expert)

    conditions = [c.value for c in Condition]
    for name, helptext in (("experiment", "train and evaluate the full condition matrix"),
                           ("train-swap", "train one pair under one condition")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--pretrain-iters", type=int)
        p.add_argument("--pair-iters", type=int)
        if name == "experiment":
            p.add_argument("--condition", action="append", choices=conditions,
                           help="restrict to this condition (repeatable)")
            p.add_argument("--pair", action="append", help="restrict to this pair name (repeatable)")
            p.add_argument("--n-pairs", type=int, help="use only the first N pairs")
            p.set_defaults(fn=cmd_experiment)
        else:
            p.add_argument("--pair", dest="pair_name", required=True, help="pair name, e.g. pair0_100to101")
            p.add_argument("--condition", dest="swap_condition", required=True, choices=conditions)
            p.set_defaults(fn=cmd_train_swap)

    p = sub.add_parser("analyze", parents=[common], help="survey statistics from a response CSV")
    p.add_argument("csv", nargs="?", help="response CSV (default: the bundled synthetic fixture)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("report", parents=[common], help="aggregate finished runs into reports and plot data")
    p.add_argument("runs", nargs="+", help="experiment output directories")
    p.set_defaults(fn=cmd_report)
    return parser


def _error_line(exc: BaseException) -> str:
    body = {"type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, OSError) and exc.filename:
        body["path"] = str(exc.filename)
    return "error: " + json.dumps(body, sort_keys=True)


def main(argv: list | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        args.fn(args)
    except KeyboardInterrupt:
        print('error: {"message": "interrupted", "type": "KeyboardInterrupt"}', file=sys.stderr)
        return 130
    except Exception as exc:
        if os.environ.get("GZLB_DEBUG"):
            raise
        print(_error_line(exc), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
