"""Command-line entry point.

Usage::

    ggdln <subcommand> [--config FILE] [--set key=value ...] --out DIR

Subcommands: capacity, width, sigma, gating, depth, multitask. The config
file is a flat ``key = value`` document; ``--set`` overrides take the same
dotted keys (lists as comma-separated values, nested sections as
``section.key``). Every run writes ``results.csv`` and ``manifest.json`` to
the output directory; kernel dumps, when enabled, land in ``kernels/``.
The ``GGDLN_THREADS`` environment variable bounds the worker pool.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments

RUNNERS = {
    "capacity": experiments.run_capacity_sweep,
    "width": experiments.run_width_sweep,
    "sigma": experiments.run_sigma_sweep,
    "gating": experiments.run_gating_compare,
    "depth": experiments.run_depth_sweep,
    "multitask": experiments.run_multitask,
}


def _coerce(text: str):
    text = text.strip()
    if "," in text:
        return [_coerce(part) for part in text.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _assign(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    cfg: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            _assign(cfg, key.strip(), _coerce(value))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ggdln", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} sweep")
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = parse_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            print(f"--set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        _assign(cfg, key.strip(), _coerce(value))
    rows, manifest, kernels = RUNNERS[args.subcommand](cfg)
    path = experiments.write_outputs(args.out, rows, manifest, kernels)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
