"""Optional long run: the base preset on real CIFAR-10 (several hours on one CPU core).

Needs the binary CIFAR-10 batches (data_batch_1.bin ... test_batch.bin).
Reports whether the final test accuracy lands within 5 points of 68%.

Usage: python3 scripts/run_cifar_base.py --cifar-path data/cifar-10-batches-bin [--out runs/cifar_base]
"""

import argparse
import csv
import dataclasses
from pathlib import Path

from fedlab.presets import preset
from fedlab.runner import run_experiment

TARGET, BAND = 0.68, 0.05


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cifar-path", required=True)
    parser.add_argument("--out", default="runs/cifar_base")
    parser.add_argument("--rounds", type=int, default=None, help="override R (default 100)")
    args = parser.parse_args()

    cfg = dataclasses.replace(preset("base"), cifar_path=args.cifar_path)
    if args.rounds is not None:
        cfg = dataclasses.replace(cfg, R=args.rounds)
    manifest = run_experiment(cfg, Path(args.out))
    if not manifest.ok:
        print("run failed; see manifest.json")
        return 2
    with open(manifest.aggregates["main"], newline="") as fh:
        acc = float(list(csv.DictReader(fh))[-1]["acc_mean"])
    ok = abs(acc - TARGET) <= BAND
    print(f"final test accuracy {acc:.4f}: {'PASS' if ok else 'FAIL'} (target {TARGET} +/- {BAND})")
    return 0 if ok else 2


if __name__ == "__main__":
    raise SystemExit(main())
