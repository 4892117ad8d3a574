"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors (bad flags, invalid
or unknown config keys, bad ``TAILFORGE_THREADS``), 1 for runtime errors.
"""

import argparse
import dataclasses
import json
import os
import sys

from .ensemble import eval_report, write_report
from .exceptions import ConfigError, RecordMismatchError, TailforgeError
from .nnkernel import load_params, predict_proba
from .parallel import blas_single_thread, worker_threads
from .runner import (
    ExperimentConfig,
    config_from_dict,
    ensemble_runs,
    load_config,
    run_experiment,
    run_ladder,
)
from .synthbench import dataset_io, gen_dataset

# default stage chains for the single-purpose subcommands
CHAINS = {
    "train": ["train"],
    "clean": ["train", "clean"],
    "rebalance": ["train", "clean", "retrain_classifier"],
    "tau": ["train", "clean", "retrain_classifier", "tau_norm"],
    "tta-eval": ["train", "clean", "retrain_classifier", "tau_norm", "tta_eval"],
}
TARGET_STAGE = {
    "train": "train", "clean": "clean", "rebalance": "retrain_classifier",
    "tau": "tau_norm", "tta-eval": "tta_eval",
}


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override both the run and dataset seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="tailforge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate and save the dataset")
    for name in CHAINS:
        sub.add_parser(name, parents=[common],
                       help=f"run the pipeline up to the {TARGET_STAGE[name]} stage")
    ev = sub.add_parser("eval", parents=[common],
                        help="run the configured stages, or score a saved model")
    ev.add_argument("--model", metavar="DIR", help="checkpoint directory to evaluate")
    ens = sub.add_parser("ensemble", parents=[common], help="average saved run predictions")
    ens.add_argument("manifests", nargs="+", metavar="MANIFEST")
    sub.add_parser("ladder", parents=[common], help="cumulative ablation ladder")
    return p


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed,
                          dataset=dataclasses.replace(cfg.dataset, seed=args.seed))
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    return cfg.validate()


def _chain(command, cfg):
    target = TARGET_STAGE[command]
    if target in cfg.stages:
        return cfg.stages[:cfg.stages.index(target) + 1]
    return CHAINS[command]


def _emit(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _summary(report):
    return (f"top1={report['top1_accuracy']:.4f} top5={report['top5_accuracy']:.4f} "
            f"mcer={report['mean_class_error_rate']:.4f}")


def _run(args):
    worker_threads()

    def log(msg):
        _emit(args, msg)

    cfg = _config(args)
    out = cfg.out_dir

    if args.command == "gen":
        train, val = gen_dataset(cfg.dataset)
        dataset_io(train, os.path.join(out, "train"), "write")
        dataset_io(val, os.path.join(out, "val"), "write")
        log(f"wrote {len(train)} training and {len(val)} validation samples to {out}")
        return

    if args.command == "ensemble":
        manifests = []
        for path in args.manifests:
            with open(path) as fh:
                manifests.append((path, json.load(fh)))
        datasets = {json.dumps(m["config"]["dataset"], sort_keys=True) for _, m in manifests}
        if len(datasets) != 1:
            raise RecordMismatchError("runs were evaluated on different datasets")
        data_cfg = config_from_dict({"dataset": manifests[0][1]["config"]["dataset"]})
        train, val = gen_dataset(data_cfg.dataset)
        report = ensemble_runs([p for p, _ in manifests], val.labels, train.class_counts)
        os.makedirs(out, exist_ok=True)
        write_report(report, train.class_counts, os.path.join(out, "ensemble_report.json"),
                     os.path.join(out, "ensemble_per_class.csv"))
        log(_summary(report.to_dict()))
        return

    if args.command == "ladder":
        run_ladder(cfg, log=log)
        return

    if args.command == "eval" and args.model:
        params = load_params(args.model)
        train, val = gen_dataset(cfg.dataset)
        with blas_single_thread():
            report = eval_report(predict_proba(params, val.images), val.labels,
                                 train.class_counts)
        os.makedirs(out, exist_ok=True)
        write_report(report, train.class_counts, os.path.join(out, "report.json"),
                     os.path.join(out, "per_class.csv"))
        log(_summary(report.to_dict()))
        return

    stages = cfg.stages if args.command == "eval" else _chain(args.command, cfg)
    manifest = run_experiment(cfg.replace(stages=stages), log=log)
    log(_summary(manifest["stages"][-1]["report"]))


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"tailforge: config error: {exc}", file=sys.stderr)
        return 2
    except (TailforgeError, OSError, ValueError) as exc:
        print(f"tailforge: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
