"""Command-line entry point: ``apdg <study> --config FILE --out DIR --seed N --threads N``.

Exit status is 0 when every assertion of the study passes, 1 when any fails
(or a NaN appears), 2 for configuration or I/O errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigurationError
from .studies import (default_config_path, emit_outputs, env_out, env_threads, load_config,
                      run_study)

SUBCOMMANDS = {
    "eps-sweep": "eps_sweep",
    "h-sweep": "h_sweep",
    "maxwellian": "maxwellian_study",
    "stability": "stability_suite",
    "identities": "identity_suite",
}


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer: {v}")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, study in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {study.replace('_', ' ')}")
        p.add_argument("--config", type=Path, default=None,
                       help="TOML study description (default: the packaged one)")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: $APDG_OUT or ./results)")
        p.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=_positive, default=None,
                       help="worker threads for independent sweep points (default: $APDG_THREADS or 1)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    study = SUBCOMMANDS[args.command]
    try:
        path = args.config or default_config_path(study)
        cfg = load_config(path, study)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        threads = args.threads or env_threads()
        out = args.out or Path(env_out())
        result = run_study(cfg, threads)
        paths = emit_outputs(result, cfg, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.lhs!r} {c.relation} {c.rhs!r}")
    for f in result.fits:
        print(f"fit   {f.name}: slope {f.slope:.4f}  R2 {f.r2:.4f}")
    status = "no assertions" if not result.checks else ("PASS" if result.passed else "FAIL")
    print(f"{study}: {status}  ({len(result.rows)} rows, {result.runtime:.2f} s) -> {paths['csv']}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
