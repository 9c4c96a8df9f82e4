"""Aggregate per-seed metrics.jsonl traces into plot-ready mean/std CSV.

Usage: fdpg-plot-data OUTDIR/experiment/divergence [...more cell parents]
Writes ``aggregate.csv`` next to the per-seed directories: one row per step,
mean and std across seeds for every numeric metric.  Infinite values stay the
literal string "inf" and are never coerced silently.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

METRICS = [
    "kl",
    "rkl",
    "tv",
    "js",
    "kl_from_base",
    "alignment",
    "entropy",
    "distinct_1",
    "reward_mean",
    "reward_std",
]


def _coerce(value):
    if value == "inf":
        return math.inf
    return value


def load_rows(path: Path):
    rows = []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("type") == "row":
                rows.append(obj)
    return rows


def aggregate(parent: Path) -> Path:
    seed_files = sorted(parent.glob("*/metrics.jsonl"))
    if not seed_files:
        raise SystemExit(f"no metrics.jsonl under {parent}")
    per_seed = [load_rows(f) for f in seed_files]
    steps = sorted({row["step"] for rows in per_seed for row in rows})
    out_path = parent / "aggregate.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["step", "n_seeds"]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_std"]
        writer.writerow(header)
        for step in steps:
            cells = [next((r for r in rows if r["step"] == step), None) for rows in per_seed]
            cells = [c for c in cells if c is not None]
            out = [step, len(cells)]
            for m in METRICS:
                values = [_coerce(c[m]) for c in cells if m in c and c[m] is not None]
                if not values:
                    out += ["", ""]
                elif any(isinstance(v, float) and math.isinf(v) for v in values):
                    out += ["inf", "inf"]
                else:
                    mean = sum(values) / len(values)
                    var = sum((v - mean) ** 2 for v in values) / len(values)
                    out += [f"{mean:.12g}", f"{math.sqrt(var):.12g}"]
            writer.writerow(out)
    return out_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fdpg-plot-data", description=__doc__)
    parser.add_argument("parents", nargs="+",
                        help="cell parents, e.g. out/lexical-gdc/js")
    args = parser.parse_args(argv)
    for parent in args.parents:
        path = aggregate(Path(parent))
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
