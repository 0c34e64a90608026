"""Command-line scenario runner.

    sgxmem --scenario eddsa-tspm --seed 7 --out reports --format json

The config file defaults to $SGXMEM_CONFIG when --config is not given.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import config as C
from .scenarios import SCENARIOS, run

ENV_CONFIG = "SGXMEM_CONFIG"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgxmem", description="Run an enclave memory side-channel scenario.")
    p.add_argument("--scenario", required=True, choices=sorted(SCENARIOS), metavar="NAME",
                   help="one of: " + ", ".join(sorted(SCENARIOS)))
    p.add_argument("--config", help=f"YAML/JSON config file (default: ${ENV_CONFIG})")
    p.add_argument("--preset", choices=sorted(C.PRESETS), help="start from a named machine preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--noiseless", action="store_true", help="disable every noise source")
    return p


def load_config(args) -> C.SimConfig:
    base = C.PRESETS[args.preset]() if args.preset else C.SimConfig()
    path = args.config or os.environ.get(ENV_CONFIG)
    cfg = base.with_overrides(C.load(path)) if path else base.validate()
    if args.noiseless:
        cfg = cfg.noiseless()
    return cfg


def _scalar(v):
    return v is None or isinstance(v, (bool, int, float, str))


def report_rows(report: dict) -> tuple[list[str], list[list]]:
    """Tabular view: table scenarios give their rows, others one flat row."""
    rows = report["details"].get("rows")
    if rows:
        header = list(rows[0])
        return header, [[r[h] for h in header] for r in rows]
    flat = {}
    for k, v in report.items():
        if k in ("details", "event_counts"):
            continue
        if _scalar(v):
            flat[k] = v
    for k, v in report["event_counts"].items():
        flat[f"event.{k}"] = v
    for k, v in report["details"].items():
        if _scalar(v):
            flat[f"details.{k}"] = v
    return list(flat), [list(flat.values())]


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        body = {k: v for k, v in report.items()}
        body["details"] = {k: v for k, v in report["details"].items() if k != "histogram"}
        return json.dumps(body, sort_keys=True, indent=2) + "\n"
    return to_csv(*report_rows(report))


def write_outputs(report: dict, out_dir, fmt: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report['scenario']}-seed{report['seed']}"
    path = out / f"{stem}.{fmt}"
    path.write_text(render(report, fmt))
    paths = [path]
    hist = report["details"].get("histogram")
    if hist is not None:
        hpath = out / f"{stem}-histogram.csv"
        hpath.write_text(to_csv(["bin_left", "count"], hist))
        paths.append(hpath)
    return paths


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except C.ConfigError as exc:
        print(f"sgxmem: config error: {exc}", file=sys.stderr)
        return 1
    try:
        report = run(args.scenario, cfg, args.seed)
    except Exception as exc:  # surface precondition failures etc. as a diagnostic
        print(f"sgxmem: {args.scenario} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for path in write_outputs(report, args.out, args.format):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
