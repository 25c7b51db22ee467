"""Run every preset at desk scale and print the final accuracy of each variant.

Usage: python3 scripts/run_desk_presets.py [--out runs/desk] [--names fig2_cl_to_fl fig5_pp_iid]
"""

import argparse
import csv
import time
from pathlib import Path

from fedlab.presets import CATALOG, is_toy, preset
from fedlab.runner import run_experiment
from fedlab.toyrun import run_toy


def final_row(path: Path) -> dict:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))[-1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--names", nargs="*", default=list(CATALOG))
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    status = 0
    for name in args.names:
        out = Path(args.out) / name
        start = time.perf_counter()
        cfg = preset(name, desk=True)
        if is_toy(name):
            summary = run_toy(cfg, out)
            print(f"{name} ({time.perf_counter() - start:.1f}s)")
            for key, value in sorted(summary.items()):
                if isinstance(value, dict) and "drift_gap" in value:
                    print(f"  {key:<20} drift_gap {value['drift_gap']:.6f}")
            continue
        manifest = run_experiment(cfg, out, workers=args.workers)
        print(f"{name} ({time.perf_counter() - start:.1f}s)")
        for label, path in manifest.aggregates.items():
            row = final_row(Path(path))
            print(f"  {label:<20} round {row['round']:>3}  acc {float(row['acc_mean']):.4f} "
                  f"[{float(row['acc_min']):.4f}, {float(row['acc_max']):.4f}]")
        if not manifest.ok:
            status = 2
            print("  some repeats failed; see manifest.json")
    return status


if __name__ == "__main__":
    raise SystemExit(main())
