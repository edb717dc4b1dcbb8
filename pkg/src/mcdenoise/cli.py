"""Command-line entry point.

    mcdenoise <stage> --out DIR [--config FILE] [--mode spectral|temporal]
                      [--section.field=value ...]

Stages: simulate, rebin, train, denoise, reconstruct, decompose, evaluate,
report. Overrides use dotted keys into the config with JSON-parsed values,
e.g. --train.epochs=4 --acquisition.exposure_scale=100.

Exit codes: 0 success, 2 configuration or parse error, 3 missing upstream
artifact, 4 any other runtime failure.
"""

import argparse
import json
import re
import sys

from . import pipeline, report
from .config import apply_overrides, default_config, load_config
from .errors import ConfigurationError, MissingDependencyError, ParseError

STAGES = {
    "simulate": pipeline.stage_simulate,
    "rebin": pipeline.stage_rebin,
    "train": pipeline.stage_train,
    "denoise": pipeline.stage_denoise,
    "reconstruct": pipeline.stage_reconstruct,
    "decompose": pipeline.stage_decompose,
    "evaluate": pipeline.stage_evaluate,
    "report": report.stage_report,
}

_OVERRIDE = re.compile(r"^--([A-Za-z_][\w.]*)=(.*)$", re.S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcdenoise",
        description="simulation and self-supervised denoising pipeline for "
        "multi-channel radiography",
    )
    parser.add_argument("stage", choices=sorted(STAGES))
    parser.add_argument("--out", required=True, help="run directory for artifacts")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument(
        "--mode",
        default=None,
        choices=["spectral", "temporal"],
        help="defaults used when --config is omitted (default: spectral)",
    )
    return parser


def _collect_overrides(rest) -> list:
    overrides = []
    for token in rest:
        m = _OVERRIDE.match(token)
        if not m:
            raise ConfigurationError(
                f"unrecognized argument {token!r}; overrides look like --key.path=value"
            )
        overrides.append(f"{m.group(1)}={m.group(2)}")
    return overrides


def run(argv) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    overrides = _collect_overrides(rest)
    if args.config is not None:
        cfg = load_config(args.config)
        if args.mode is not None and args.mode != cfg["mode"]:
            raise ConfigurationError(
                f"--mode={args.mode} conflicts with config mode={cfg['mode']}"
            )
    else:
        cfg = default_config(args.mode or "spectral")
    cfg = apply_overrides(cfg, overrides)
    extra = STAGES[args.stage](pipeline.Experiment(args.out, cfg))
    summary = {k: v for k, v in extra.items() if isinstance(v, (int, float, str))}
    print(f"{args.stage}: done " + json.dumps(summary, sort_keys=True))
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except (ConfigurationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
