"""Command line front end: run, check, presets, report."""

import argparse
import sys
from pathlib import Path

from .config import PRESETS, RunConfig, parse_config, preset_summary
from .errors import ConfigError, SimulationAbort


def _load_config(source: str) -> RunConfig:
    """Resolve a path or preset name; an existing file wins over the catalog."""
    path = Path(source)
    if path.is_file():
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {source}: {exc}") from exc
    elif source in PRESETS:
        text = PRESETS[source]
    else:
        known = ", ".join(PRESETS)
        raise ConfigError(f"{source!r} is neither a config file nor a preset "
                          f"(presets: {known})")
    return parse_config(text)


def _cmd_run(args: argparse.Namespace) -> int:
    from .coupled import run_simulation

    config = _load_config(args.config)
    try:
        result = run_simulation(config)
    except SimulationAbort as exc:
        # run_simulation already wrote the last good snapshot + diagnostics
        print(f"solver failure: {exc}", file=sys.stderr)
        print(Path(config.output_dir) / "diagnostics.csv")
        return 2
    print(result.diagnostics_path)
    return 0


def _cmd_check(args: argparse.Namespace) -> int:
    _load_config(args.config)
    print("OK")
    return 0


def _cmd_presets(args: argparse.Namespace) -> int:
    width = max(len(name) for name in PRESETS)
    for name in PRESETS:
        print(f"{name:<{width}}  {preset_summary(name)}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from .report import render_report

    for path in render_report(args.output_dir):
        print(path)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nsms",
        description="Incompressible flow coupled to Maxwell-Stefan "
                    "cross-diffusion in entropy variables.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulation and write artifacts")
    run.add_argument("config", help="config file path or preset name")
    run.set_defaults(handler=_cmd_run)

    check = sub.add_parser("check", help="validate a config without running")
    check.add_argument("config", help="config file path or preset name")
    check.set_defaults(handler=_cmd_check)

    presets = sub.add_parser("presets", help="list shipped presets")
    presets.set_defaults(handler=_cmd_presets)

    report = sub.add_parser("report", help="render figures for a finished run")
    report.add_argument("output_dir", help="output directory of a run")
    report.set_defaults(handler=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
