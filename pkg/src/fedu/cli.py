"""Command-line entry point: ``fedu {run,sweep,eval,baseline,partition-inspect}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fedu import experiment
from fedu.config import OUTPUT_DIR_ENV, ExperimentConfig, load_config
from fedu.errors import ConfigurationError, FeduError
from fedu.params import load

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("fedu")


def _out_dir(args, cfg: ExperimentConfig, leaf: str) -> Path:
    base = Path(args.output_dir) if args.output_dir else cfg.resolved_output_dir()
    return base / leaf if cfg.output_dir is None and not args.output_dir else base


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg, f"run_seed{cfg.seed}")
    summary = experiment.run_experiment(cfg, out, workers=args.workers).summary
    _print({k: v for k, v in summary.to_dict().items() if k != "config"})
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = experiment.parse_axis_values(args.axis, args.values.split(","))
    out = _out_dir(args, cfg, f"sweep_{args.axis}")
    rows = experiment.run_sweep(cfg, args.axis, values, out, adjust_lr=args.adjust_lr, workers=args.workers)
    with open(out / "sweep.csv", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params = load(args.checkpoint)
    _print(experiment.evaluate_checkpoint(cfg, params))
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg, f"baseline_{args.mode}_seed{cfg.seed}")
    clients = None if args.client is None else [args.client]
    summary = experiment.run_baseline(cfg, args.mode, out, client_ids=clients)
    _print({k: v for k, v in summary.to_dict().items() if k != "config"})
    return EXIT_OK


def cmd_partition_inspect(args) -> int:
    cfg = load_config(args.config)
    _print(experiment.inspect_partition(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=True):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--output-dir", help=f"output directory (default: config output_dir, then ${OUTPUT_DIR_ENV}, then ./runs)")
        if workers:
            sp.add_argument("--workers", type=int, default=None, help="concurrent client trainers (results do not depend on it)")

    sp = sub.add_parser("run", help="federated training + evaluation")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="one run per value of a config axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=experiment.SWEEP_AXES)
    sp.add_argument("--values", required=True, help="comma-separated values, e.g. 0.05,0.1,0.2")
    sp.add_argument("--adjust-lr", action="store_true", help="batch-size sweep: scale lr by B / lr_reference_batch")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="kNN + linear probe of a saved encoder checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("config", help="YAML config describing dataset and architecture")
    sp.set_defaults(func=cmd_eval, output_dir=None)

    sp = sub.add_parser("baseline", help="non-federated reference runs")
    common(sp, workers=False)
    sp.add_argument("--mode", required=True, choices=("single_client", "centralized"))
    sp.add_argument("--client", type=int, default=None, help="single_client: train only this client (default: every client)")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("partition-inspect", help="per-client class histograms")
    sp.add_argument("config")
    sp.set_defaults(func=cmd_partition_inspect, output_dir=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigurationError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FeduError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
