"""Command-line entry point: ``marpo {train,eval,bounds,selftest}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgmod
from .approximator import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .envs import ENVIRONMENTS, make_env
from .errors import TrainingError, ValidationError
from .report import bounds_table, write_bounds_svg, write_metrics_csv, write_timing_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("marpo")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 already; keep the message short
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="(kl_bias, beta) preset")
    p.add_argument("--out", type=Path, help="output root (default: $MARPO_OUT_DIR or ./runs)")
    p.add_argument("--env", dest="env_name", choices=sorted(ENVIRONMENTS), default=None)
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "env_name":
            p.add_argument(flag, dest="env_name", default=None, help=argparse.SUPPRESS)
        elif f.name == "algorithm":
            p.add_argument(flag, choices=cfgmod.ALGORITHMS, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_config(args: argparse.Namespace) -> TrainConfig:
    """File values first, then the preset, then explicit flags."""
    config = cfgmod.load(args.config) if args.config else TrainConfig()
    if args.preset:
        config = config.with_preset(args.preset)
    overrides = {}
    for f in fields(TrainConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            overrides[f.name] = cfgmod.coerce(f.name, str(raw))
    return replace(config, **overrides).validate()


def _run_dir(root: Path, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}_seed{seed}"
    path, n = base, 0
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def cmd_train(args: argparse.Namespace) -> int:
    from .trainer import train

    try:
        config = build_config(args)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    root = args.out or Path(os.environ.get("MARPO_OUT_DIR", "runs"))
    try:
        report = train(config)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    run = _run_dir(root, config.seed)
    write_metrics_csv(report.rows, run / "metrics.csv")
    write_timing_csv(report.rows, run / "timing.csv")
    (run / "config.cfg").write_text(cfgmod.serialize(config))
    save_checkpoint(report.params, run / "checkpoint.txt")
    (run / "summary.txt").write_text(
        f"run_id {report.run_id}\n"
        f"iterations {len(report.rows)}\n"
        f"env_steps {report.rows[-1].env_steps if report.rows else 0}\n"
        f"final_win_rate {report.final_win_rate!r}\n"
        f"final_mean_return {report.final_mean_return!r}\n"
        f"aborted_iterations {len(report.aborted_iterations)}\n"
        f"wall_time_s {report.wall_time_s:.3f}\n"
    )
    print(run)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .trainer import evaluate

    if args.episodes < 1:
        print("episodes must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        params = load_checkpoint(args.checkpoint)
        env = make_env(args.env_name)
        spec = env.spec()
        if (params.obs_dim, params.state_dim, params.n_actions) != (spec.obs_dim, spec.state_dim, spec.action_count):
            raise ValidationError(f"checkpoint does not match environment {args.env_name!r}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    win_rate, mean_return = evaluate(params, env, args.episodes, args.seed, greedy=not args.stochastic)
    print(f"win_rate {win_rate!r}")
    print(f"mean_return {mean_return!r}")
    return EXIT_OK


def _sweep(start: float, stop: float, step: float) -> list[float]:
    if step <= 0 or stop < start:
        raise ValidationError("sweep needs start <= stop and step > 0")
    n = int(round((stop - start) / step))
    return [round(start + i * step, 12) for i in range(n + 1)]


def cmd_bounds(args: argparse.Namespace) -> int:
    try:
        if args.sweep:
            targets = _sweep(*args.sweep)
        elif args.target is not None:
            targets = [args.target]
        else:
            raise ValidationError("give --target or --sweep")
        if any(t < 0 for t in targets):
            raise ValidationError("KL target must be >= 0")
        table = bounds_table(targets)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print("target lower upper residual_lower residual_upper")
    for t, lo, hi, rl, ru in table:
        print(f"{t!r} {lo!r} {hi!r} {rl:.3e} {ru:.3e}")
    if args.svg:
        write_bounds_svg(table, args.svg)
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    from .selftest import run_all

    results = run_all(perturb_gradient=args.perturb_gradient)
    for name, ok, detail, secs in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:32s} {secs:6.2f}s  {detail}")
    return EXIT_OK if all(r[1] for r in results) else EXIT_FAIL


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a policy and write a run directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--env", "--env-name", dest="env_name", required=True, choices=sorted(ENVIRONMENTS))
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of argmax")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bounds", help="solve clip bounds for KL targets")
    p.add_argument("--target", type=float)
    p.add_argument("--sweep", type=float, nargs=3, metavar=("START", "STOP", "STEP"))
    p.add_argument("--svg", type=Path, help="write a bounds-vs-target chart")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("selftest", help="run the property checks")
    p.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_USAGE
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
