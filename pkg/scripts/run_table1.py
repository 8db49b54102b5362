#!/usr/bin/env python3
"""Train the MNIST lambda1 sweep plus the unmasked baseline and print a table.

    python3 scripts/run_table1.py [--out artifacts/table1] [--jobs 1]

Then writes density profiles and heatmaps for every run via ``scl extract``.
"""

import argparse
import json
from pathlib import Path

from scl import cli
from scl.data import default_data_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/table1")
    ap.add_argument("--data-dir", default=str(default_data_dir()))
    ap.add_argument("--jobs", default="1")
    ap.add_argument("--seeds", default="0")
    args = ap.parse_args()

    code = cli.main(["-v", "sweep", "--baseline", "--data-dir", args.data_dir, "--out", args.out,
                     "--jobs", args.jobs, "--seeds", args.seeds])
    out = Path(args.out)
    for run in sorted(out.glob("dense_fc_*")):
        cli.main(["extract", str(run)])

    rows = json.loads((out / "sweep.json").read_text())["runs"]
    print(f"\n{'scheme':>16} {'params':>8} {'sparsity':>9} {'accuracy':>9}")
    for r in rows:
        print(f"{'lambda1=' + r['lambda1'] if r['lambda1'] != 'baseline' else 'baseline':>16} "
              f"{r['params']:>8} {100 * r['sparsity']:>8.1f}% {100 * r['accuracy']:>8.2f}%")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
