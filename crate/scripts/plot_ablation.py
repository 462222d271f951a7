#!/usr/bin/env python3
"""Plot regressed_l2 against gamma per KD tap from an ablation.csv."""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", help="ablation.csv written by `dkp ablate`")
    ap.add_argument("--out", default="ablation.png")
    ap.add_argument("--metric", default="regressed_l2", choices=["regressed_l2", "pck", "mae"])
    args = ap.parse_args()

    series = defaultdict(list)
    with open(args.csv, newline="") as f:
        for row in csv.DictReader(f):
            series[row["tap"]].append((float(row["gamma"]), float(row[args.metric])))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    baseline = series.pop("none", [])
    for tap, points in sorted(series.items()):
        points.sort()
        ax.plot([g for g, _ in points], [v for _, v in points], marker="o", label=tap)
    for _, v in baseline:
        ax.axhline(v, color="gray", linestyle="--", label="none")
    ax.set_xlabel("gamma")
    ax.set_ylabel(args.metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
