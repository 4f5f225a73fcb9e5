"""Train the hybrid-loss and lambda=1 estimators on simulated subjects and compare them.

Usage::

    python scripts/run_estimator_experiment.py --out runs/desk --train-subjects 40

Writes ``summary.json`` (per-R metrics for both models), ``slices.csv``
(per-slice NRMSE) and ``lambda.csv`` (the (1 - lambda) trajectory per step).
"""
import argparse
import csv
import json
import logging
from dataclasses import replace
from pathlib import Path

import torch

from dlespirit.experiment import ExperimentConfig, build_subjects, evaluate_model, summarize, train_estimator
from dlespirit.io import save_checkpoint


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--train-subjects", type=int, default=ExperimentConfig.train_subjects)
    parser.add_argument("--epochs", type=int, default=ExperimentConfig().training.epochs)
    parser.add_argument("--skip-single", action="store_true", help="train only the hybrid-loss model")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)

    base = ExperimentConfig()
    cfg = replace(base, train_subjects=args.train_subjects,
                  training=replace(base.training, epochs=args.epochs))
    args.out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = build_subjects(cfg)

    runs = {"hybrid": {}}
    if not args.skip_single:
        runs["single"] = {"lambda_mode": "fixed", "lambda_init": 1.0}
    summary, rows = {"train_slices": cfg.n_train_slices}, []
    for name, overrides in runs.items():
        model, history, seconds = train_estimator(cfg, train_set, **overrides)
        save_checkpoint(model, args.out / f"{name}.ckpt", extra={"seconds": seconds})
        summary[name] = {"train_seconds": seconds, "final_loss": history.epoch_loss[-1]}
        if name == "hybrid":
            with open(args.out / "lambda.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "lambda", "one_minus_lambda"])
                writer.writerows(zip(range(len(history.lam)), history.lam, history.one_minus_lam))
        for R in cfg.accelerations:
            result = evaluate_model(model, test_set, cfg, R)
            summary[name][f"R{R}"] = summarize(result)
            rows += [[name, R, i, e, r] for i, (e, r) in
                     enumerate(zip(result["nrmse_est"], result["nrmse_ref"]))]
            print(name, R, json.dumps(summary[name][f"R{R}"]))

    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    with open(args.out / "slices.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "R", "slice", "nrmse_est", "nrmse_ref"])
        writer.writerows(rows)


if __name__ == "__main__":
    main()
