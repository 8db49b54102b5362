#!/usr/bin/env python3
"""Output-fitting comparison of the five STEs with and without gradient normalization.

Writes one MSE-per-step CSV per condition and, if matplotlib is installed,
a plot of the median curves.
"""

import argparse
import csv
from pathlib import Path

from scl import cli


def plot(out: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in sorted(out.glob("*_norm*.csv")):
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        style = "-" if path.stem.endswith("_norm") else "--"
        ax.plot([float(r["median"]) for r in rows], style, label=path.stem)
    ax.set_xlabel("step")
    ax.set_ylabel("median MSE")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "fitmap.png", dpi=120)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/fitmap")
    ap.add_argument("--seeds", default="5")
    args = ap.parse_args()
    code = cli.main(["fitmap", "--seeds", args.seeds, "--out", args.out])
    plot(Path(args.out))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
