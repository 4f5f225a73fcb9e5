"""Desk-scale learned-estimator experiment: simulate subjects, train, evaluate.

Shared by the acceptance suite and ``scripts/run_estimator_experiment.py``
so both run the identical protocol.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import NetworkConfig, TrainingConfig, train
from .pipeline import evaluate_estimator, make_subject, training_samples
from .recon import ReconConfig
from .simulate import GeometryRanges, SimConfig

__all__ = ["DESK_RANGES", "ExperimentConfig", "build_subjects", "train_estimator", "evaluate_model",
           "summarize"]

log = logging.getLogger(__name__)

# geometry spread that an 8-slice 32x32 volume can absorb
DESK_RANGES = GeometryRanges(alpha=(-10.0, 10.0), beta=(-6.0, 6.0), gamma=(-8.0, 8.0),
                             m=(-3.0, 3.0), n=(-3.0, 3.0), t=(-1.0, 1.0))


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=lambda: SimConfig(dims=(8, 6, 32, 32), ranges=DESK_RANGES))
    train_subjects: int = 40
    test_subjects: int = 3
    train_seed: int = 100
    test_seed: int = 900
    eval_slices: int = 20
    accelerations: tuple = (2, 4)
    crop: float = 0.9
    support_threshold: float = 0.3
    network: NetworkConfig = NetworkConfig(ncoils=6, levels=3, base_filters=16)
    training: TrainingConfig = TrainingConfig(lr=1e-3, epochs=300, batch_size=8, lr_schedule="cosine",
                                              lambda_mode="linear_decay")
    recon: ReconConfig = ReconConfig(mask_maps=True)

    @property
    def n_train_slices(self) -> int:
        return self.train_subjects * self.sim.dims[0]


def build_subjects(cfg: ExperimentConfig):
    """Training and held-out subjects with reference and transformed maps."""
    train_set = [make_subject(cfg.sim, cfg.train_seed + i) for i in range(cfg.train_subjects)]
    test_set = [make_subject(cfg.sim, cfg.test_seed + i) for i in range(cfg.test_subjects)]
    return train_set, test_set


def train_estimator(cfg: ExperimentConfig, subjects, **training_overrides):
    """Train on every (subject, slice, acceleration); returns ``(model, log, seconds)``."""
    samples = training_samples(subjects, cfg.accelerations, cfg.crop, input_norm=cfg.network.input_norm)
    training = replace(cfg.training, **training_overrides)
    start = time.perf_counter()
    model, history = train(samples, cfg.network, training)
    seconds = time.perf_counter() - start
    log.info("trained %s on %d samples in %.0f s", training.lambda_mode, len(samples), seconds)
    return model, history, seconds


def evaluate_model(model, subjects, cfg: ExperimentConfig, R: int) -> dict:
    """Per-slice map correlation and L1-ESPIRiT NRMSE (estimated vs. reference maps)."""
    out = evaluate_estimator(model, subjects, R, cfg.recon, cfg.crop, cfg.eval_slices,
                             support_threshold=cfg.support_threshold)
    return {key: np.asarray(value) for key, value in out.items()}


def summarize(result: dict) -> dict:
    est, ref = result["nrmse_est"], result["nrmse_ref"]
    return {
        "slices": int(est.size),
        "pearson_mean": float(result["pearson"].mean()),
        "nrmse_est_mean": float(est.mean()),
        "nrmse_ref_mean": float(ref.mean()),
        "nrmse_ratio": float(est.mean() / ref.mean()),
        "worst_slice_ratio": float((est / ref).max()),
    }
