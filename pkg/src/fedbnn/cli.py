"""Experiment front-end.

    fedbnn --config cfg.json [--seed N] [--jobs N] [--output DIR] [--method NAME]

Flags override the config file; environment variables FEDBNN_SEED,
FEDBNN_JOBS, FEDBNN_OUTPUT, and FEDBNN_METHOD sit between the file and
the flags (file < env < flag). Without --config the desk-scale defaults
run. Artifacts land in the output directory: config_echo.json,
metrics_summary.csv, metrics_layers.csv, report.json, model checkpoint,
and (for trained-binary methods) the packed weight export.

Exit codes: 0 success, 1 run error, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as C
from . import metrics as M
from . import model as mdl
from .binary import export_packed_model, post_training_binarize
from .data import export_partition_manifest
from .federation import prepare_data, run_federation

ENV_PREFIX = "FEDBNN_"


def _env_overrides(cfg: C.ExperimentConfig) -> None:
    if v := os.environ.get(ENV_PREFIX + "SEED"):
        cfg.seed = int(v)
    if v := os.environ.get(ENV_PREFIX + "JOBS"):
        cfg.jobs = int(v)
    if v := os.environ.get(ENV_PREFIX + "OUTPUT"):
        cfg.output_dir = v
    if v := os.environ.get(ENV_PREFIX + "METHOD"):
        cfg.method = v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedbnn",
        description="Train a federated binary network or its baselines.")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, help="parallel clients per round")
    p.add_argument("--output", help="artifact directory")
    p.add_argument("--method", choices=C.METHODS, help="override the method")
    return p


def run(cfg: C.ExperimentConfig) -> dict:
    """Execute one experiment and write all artifacts; returns the report."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "config_echo.json"), "w") as f:
        f.write(C.serialize_config(cfg))
    data = prepare_data(cfg)
    export_partition_manifest(data[3],
                              os.path.join(cfg.output_dir, "partition.json"))
    report, records, best_model = run_federation(cfg, data)
    M.write_csv(records,
                os.path.join(cfg.output_dir, "metrics_summary.csv"),
                os.path.join(cfg.output_dir, "metrics_layers.csv"))
    mdl.save_checkpoint(best_model, os.path.join(cfg.output_dir, "model.npz"))
    if cfg.method == "fedavg":
        packed = post_training_binarize(best_model)
    else:
        packed = best_model
    export_packed_model(packed, os.path.join(cfg.output_dir, "model.packed"))
    report["config"] = C.to_dict(cfg)
    with open(os.path.join(cfg.output_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.parse_config(args.config) if args.config else C.ExperimentConfig()
        _env_overrides(cfg)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.output is not None:
            cfg.output_dir = args.output
        if args.method is not None:
            cfg.method = args.method
        C.validate(cfg)
    except (C.ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        report = run(cfg)
    except Exception as e:  # surface as a structured run failure
        print(f"run error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(json.dumps({k: report[k] for k in
                      ("method", "seed", "best_val_acc", "test_acc_clean",
                       "test_acc_binary")}, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
