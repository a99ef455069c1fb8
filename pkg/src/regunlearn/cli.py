"""Command-line entry point: ``regunlearn <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input (bad flags, config or values),
2 a pipeline stage failed at runtime.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import harness
from .config import ConfigError, ExperimentConfig, SweepSpec

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        cfg = cfg.with_out_dir(args.out)
    return cfg


def _parse_axis(text: str):
    if "=" not in text:
        raise ConfigError(f"--axis expects name=v1,v2,..., got {text!r}")
    name, raw = text.split("=", 1)
    try:
        values = tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--axis values must be numbers, got {raw!r}") from None
    return name.strip(), values


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_run(args):
    rec = harness.run_experiment(_load(args))
    print(harness.render_report([rec]), end="")
    print(f"wrote {rec.out_dir}")


def cmd_sweep(args):
    cfg = _load(args)
    name, values = _parse_axis(args.axis)
    cells = harness.run_sweep(SweepSpec(cfg, name, values), workers=args.workers)
    print(Path(cfg.out_dir, "sweep.csv").read_text(encoding="utf-8"), end="")
    failed = [c for c in cells if c.error]
    for c in failed:
        print(f"cell {name}={c.value} failed: {c.error}", file=sys.stderr)


def cmd_sequential(args):
    steps = harness.run_sequential(_load(args), harness.parse_bands(args.bands))
    for k, s in enumerate(steps, start=1):
        print(f"request {k} band {s.band}: err_Dtr {s.report.err_Dtr:.4g} "
              f"(oracle {s.oracle_err_Dtr:.4g}), err_Dtf {s.report.err_Dtf:.4g}, w_dist {s.report.w_dist:.4g}")


def cmd_progression(args):
    try:
        epochs = [int(v) for v in args.epochs.split(",")]
    except ValueError:
        raise ConfigError(f"--epochs expects integers, got {args.epochs!r}") from None
    curve = harness.wasserstein_progression(_load(args), epochs)
    for n, w in curve:
        print(f"{n}\t{w:.6g}")
    if len(curve) > 1:
        print(f"spearman {harness.progression_spearman(curve):.4f}")


def cmd_attack(args):
    _print_json(harness.run_attack(_load(args)))


def cmd_invert(args):
    _print_json(harness.run_inversion(_load(args)))


def cmd_backdoor(args):
    _print_json(harness.run_backdoor(_load(args)))


def cmd_report(args):
    directory = Path(args.dir or args.out or ".")
    if not directory.is_dir():
        raise ConfigError(f"no such directory: {directory}")
    records = harness.find_records(directory)
    if not records:
        print(f"no run records under {directory}", file=sys.stderr)
    print(harness.render_report(records, args.format), end="")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regunlearn", description="Deep-regression unlearning experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, help="replace every seed in the config")
        return sp

    common(sub.add_parser("run", help="train, unlearn, evaluate")).set_defaults(func=cmd_run)
    sp = common(sub.add_parser("sweep", help="vary one blindspot setting"))
    sp.add_argument("--axis", required=True, help="name=v1,v2,... (lambda, retain_fraction, "
                                                 "blindspot_epochs, unlearn_epochs)")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)
    sp = common(sub.add_parser("sequential", help="chained label-band requests"))
    sp.add_argument("--bands", required=True, help="lo:hi,lo:hi,... (empty side = open)")
    sp.set_defaults(func=cmd_sequential)
    sp = common(sub.add_parser("progression", help="W1 of blindspot vs retrained per epoch count"))
    sp.add_argument("--epochs", default="1,2,3,5,8")
    sp.set_defaults(func=cmd_progression)
    common(sub.add_parser("attack", help="membership inference on the forget set")).set_defaults(func=cmd_attack)
    common(sub.add_parser("invert", help="model inversion images")).set_defaults(func=cmd_invert)
    common(sub.add_parser("backdoor", help="trigger accuracy before/after unlearning")).set_defaults(func=cmd_backdoor)
    sp = sub.add_parser("report", help="tabulate stored runs")
    sp.add_argument("--dir")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("text", "csv", "json"), default="text")
    sp.set_defaults(func=cmd_report)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        args.func(args)
    except (ConfigError, harness.CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except harness.ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
