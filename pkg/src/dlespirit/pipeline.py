"""Glue between simulation, calibration, training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibrate import CalibConfig, CoilMaps, espirit_from_kspace
from .estimator import TrainingSample, crop_maps, estimate_maps, prepare_sample
from .geometry import Geometry, compute_transformed_maps
from .kspace import apply_mask, ifft2c, make_uniform_mask, rss_combine, zero_fill_images
from .metrics import map_pearson, nrmse
from .recon import ReconConfig, l1_espirit
from .simulate import SimConfig, SimulatedDataset, simulate_dataset

__all__ = ["Subject", "make_subject", "training_samples", "evaluate_estimator"]

log = logging.getLogger(__name__)


@dataclass
class Subject:
    data: SimulatedDataset
    maps_ref: CoilMaps
    maps_trans: CoilMaps
    reference: np.ndarray = field(repr=False)  # RSS of fully sampled images

    @property
    def kspace(self):
        return self.data.kspace

    @property
    def geometry(self) -> Geometry:
        return self.data.geometry


def make_subject(sim: SimConfig, seed: int, calib: CalibConfig = CalibConfig(),
                 geometry: Geometry | None = None) -> Subject:
    data = simulate_dataset(sim, seed, geometry)
    ref = espirit_from_kspace(data.kspace, calib)
    trans = compute_transformed_maps(data.kspace, data.geometry, calib, sim.slice_spacing)
    return Subject(data, ref, trans, rss_combine(ifft2c(data.kspace)))


def training_samples(subjects, accelerations=(2, 4), crop: float | None = 0.9,
                     offset: int = 0, input_norm: str = "phase") -> list[TrainingSample]:
    """One sample per (subject, slice, acceleration); map targets cropped at ``crop``."""
    samples = []
    for subj in subjects:
        orig = crop_maps(subj.maps_ref.maps, subj.maps_ref.eigval, crop)
        trans = crop_maps(subj.maps_trans.maps, subj.maps_trans.eigval, crop)
        ny = subj.kspace.shape[-2]
        for R in accelerations:
            aliased = zero_fill_images(subj.kspace, make_uniform_mask(ny, R, offset))
            for j in range(aliased.shape[0]):
                samples.append(prepare_sample(aliased[j], orig[j], trans[j], input_norm))
    return samples


def evaluate_estimator(model, subjects, R: int, recon_cfg: ReconConfig = ReconConfig(mask_maps=True),
                       crop: float = 0.9, max_slices: int | None = None, offset: int = 0,
                       support_threshold: float = 0.3) -> dict:
    """Map correlation and L1-ESPIRiT NRMSE with estimated vs. reference maps.

    Returns per-slice lists: ``pearson`` (mean over channels on the reference
    support), ``nrmse_est``, ``nrmse_ref``.
    """
    out = {"pearson": [], "pearson_channels": [], "nrmse_est": [], "nrmse_ref": []}
    done = 0
    for subj in subjects:
        ny = subj.kspace.shape[-2]
        mask = make_uniform_mask(ny, R, offset)
        est = estimate_maps(model, zero_fill_images(subj.kspace, mask), support_threshold)
        y_all = apply_mask(subj.kspace, mask)
        for j in range(subj.kspace.shape[0]):
            if max_slices is not None and done >= max_slices:
                return out
            support = subj.maps_ref.eigval[j] >= crop
            chans = [map_pearson(est.maps[j, i], subj.maps_ref.maps[j, i], support)
                     for i in range(est.ncoils)]
            out["pearson_channels"].append(chans)
            out["pearson"].append(float(np.mean(chans)))
            ref_img = subj.reference[j]
            rec_ref = l1_espirit(y_all[j], subj.maps_ref.maps[j], mask, recon_cfg, subj.maps_ref.eigval[j])
            # estimated maps arrive already masked to their own support
            est_cfg = ReconConfig(**{**recon_cfg.__dict__, "mask_maps": False})
            if est.maps[j].any():
                rec_est = l1_espirit(y_all[j], est.maps[j], mask, est_cfg).image
            else:
                log.warning("slice %d: estimated maps are empty, scored as a zero reconstruction", j)
                rec_est = np.zeros_like(ref_img)
            out["nrmse_ref"].append(nrmse(rec_ref.image, ref_img))
            out["nrmse_est"].append(nrmse(rec_est, ref_img))
            done += 1
    return out
