"""Command line entry point: ``fedlab <command> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure or
divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from fedlab.config import ExperimentConfig, parse_config, render_config
from fedlab.data import partition_report
from fedlab.errors import ConfigError, FedLabError, FormatError
from fedlab.model import GRADCHECK_SHAPES, grad_check_report, gradcheck_case
from fedlab.presets import NAMES, is_toy, preset, preset_text, desk_version
from fedlab.runner import load_data, make_shards, resolve_output_dir, run_experiment
from fedlab.toyrun import parse_toy_config, run_toy

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("fedlab")


def _read(path: str) -> str:
    return Path(path).read_text()


def _run_config(cfg: ExperimentConfig, args) -> int:
    out = resolve_output_dir(args.out, cfg)
    manifest = run_experiment(cfg, out, seed_offset=args.seed_offset, workers=args.workers)
    failed = [r for r in manifest.repeats if r["status"] != "ok"]
    for r in manifest.repeats:
        print(f"{r['variant']} seed={r['seed']} {r['status']}" + (f": {r['error']}" if r["error"] else ""))
    print(f"wrote {Path(out) / 'manifest.json'} ({manifest.wall_clock_seconds:.1f}s)")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_run(args) -> int:
    cfg = parse_config(_read(args.config))
    if args.desk:
        cfg = desk_version(cfg)
    return _run_config(cfg, args)


def _toy_out(cli_value, default) -> str:
    return cli_value or os.environ.get("FEDLAB_OUT") or default


def cmd_preset(args) -> int:
    if args.run:
        cfg = preset(args.name, args.desk)
        if is_toy(args.name):
            summary = run_toy(cfg, _toy_out(args.out, cfg.output_dir))
            print(f"wrote toy outputs for {args.name}: {sorted(k for k in summary if k != 'toy')}")
            return EXIT_OK
        return _run_config(cfg, args)
    text = preset_text(args.name, args.desk)
    # print the normalized form so every default is visible
    sys.stdout.write(text if is_toy(args.name) else render_config(parse_config(text)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.repeats):
        spec, params, batch = gradcheck_case(args.model, seed)
        report = grad_check_report(spec, params, batch, args.epsilon)
        worst = max(worst, report.max_rel_error)
        print(f"{args.model} seed={seed} d={spec.num_params} max_rel_error={report.max_rel_error:.3e} "
              f"checked={report.checked} skipped_kinks={report.skipped_kinks}")
    ok = worst < GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'} worst={worst:.3e} tolerance={GRADCHECK_TOL:g}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_partition_report(args) -> int:
    cfg = parse_config(_read(args.config))
    for label, vcfg in cfg.resolved():
        train, _ = load_data(vcfg)
        seed = vcfg.seeds[0] + args.seed_offset
        report = partition_report(train, make_shards(vcfg, train, seed))
        if len(cfg.resolved()) > 1:
            print(f"# variant {label} seed {seed}")
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_toy(args) -> int:
    if is_toy(args.name):
        cfg = preset(args.name)
    elif Path(args.name).is_file():
        cfg = parse_toy_config(_read(args.name))
    else:
        raise ConfigError(f"{args.name!r} is neither a toy preset (toy_fig1, toy_fig8) nor a file")
    out = _toy_out(args.out, cfg.output_dir)
    summary = run_toy(cfg, out)
    for key, value in sorted(summary.items()):
        if isinstance(value, dict) and "drift_gap" in value:
            print(f"{key}: drift_gap={value['drift_gap']:.6f} optimum={value['optimum']}")
    print(f"wrote {Path(out) / 'summary.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlab", description="Deterministic federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add_run_opts(sp):
        sp.add_argument("--out", help="output directory (overrides $FEDLAB_OUT and the config)")
        sp.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
        sp.add_argument("--workers", type=int, default=1, help="client threads per round")

    sp = sub.add_parser("run", help="run an experiment config file")
    sp.add_argument("config")
    sp.add_argument("--desk", action="store_true", help="swap CIFAR-10/CNN for synthetic data/MLP, cap R")
    add_run_opts(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("preset", help="print or run a named preset")
    sp.add_argument("name", help=", ".join(NAMES))
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--print", action="store_true", help="print the config (default)")
    mode.add_argument("--run", action="store_true", help="run the preset")
    sp.add_argument("--desk", action="store_true", help="use the desk-scale form")
    add_run_opts(sp)
    sp.set_defaults(func=cmd_preset)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a model's gradient")
    sp.add_argument("model", choices=sorted(GRADCHECK_SHAPES))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("partition-report", help="per-client class counts as CSV")
    sp.add_argument("config")
    sp.add_argument("--seed-offset", type=int, default=0)
    sp.set_defaults(func=cmd_partition_report)

    sp = sub.add_parser("toy", help="run a 2-D toy landscape (preset name or config file)")
    sp.add_argument("name")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (FedLabError, FloatingPointError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
