"""Image and map quality metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

__all__ = ["nrmse", "psnr", "pearson", "map_pearson", "local_error_map", "EvalReport", "evaluate_slices"]


def _pair(recon, ref):
    recon, ref = np.asarray(recon), np.asarray(ref)
    recon = np.abs(recon.astype(np.result_type(recon, float)))
    ref = np.abs(ref.astype(np.result_type(ref, float)))
    if recon.shape != ref.shape:
        raise ValueError(f"shape mismatch: recon {recon.shape} vs ref {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference image is all zero")
    return recon, ref


def nrmse(recon, ref) -> float:
    """``||recon - ref||_2 / ||ref||_2`` on magnitude images."""
    recon, ref = _pair(recon, ref)
    return float(np.linalg.norm(recon - ref) / np.linalg.norm(ref))


def psnr(recon, ref) -> float:
    """Peak SNR in dB, peak = ``max|ref|``; identical images give ``inf``."""
    recon, ref = _pair(recon, ref)
    rmse = np.sqrt(np.mean((recon - ref) ** 2))
    if rmse == 0:
        return float("inf")
    return float(20 * np.log10(ref.max() / rmse))


def pearson(a, b, support=None) -> float:
    """Sample Pearson correlation of ``|a|`` and ``|b|`` over the supported pixels."""
    a, b = np.abs(np.asarray(a)), np.abs(np.asarray(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if support is not None:
        a, b = a[support], b[support]
    a, b = a.ravel(), b.ravel()
    if a.size < 2:
        raise ValueError("pearson needs at least two supported pixels")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        raise ValueError("pearson undefined for zero-variance input")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def map_pearson(est, ref, support=None) -> float:
    """``pearson`` for an estimated map channel; a constant estimate (an empty map) scores 0."""
    values = np.abs(np.asarray(est))
    if support is not None:
        values = values[support]
    if values.size and np.ptp(values) == 0:
        return 0.0
    return pearson(est, ref, support)


def local_error_map(recon, ref, window: int = 7) -> np.ndarray:
    """Windowed RMSE of ``|recon| - |ref|`` (zero-padded borders) over ``max|ref|``.

    Works on 2D images or stacks ``(..., ny, nx)``; the window is in-plane.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    recon, ref = _pair(recon, ref)
    if window > min(ref.shape[-2:]):
        raise ValueError(f"window {window} exceeds image size {ref.shape[-2:]}")
    size = (1,) * (ref.ndim - 2) + (window, window)
    # uniform_filter averages over the full window with zero padding outside
    mse = ndimage.uniform_filter((recon - ref) ** 2, size=size, mode="constant", cval=0.0)
    return np.sqrt(np.maximum(mse, 0.0)) / ref.max()


@dataclass
class EvalReport:
    nrmse: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    pearson: list = field(default_factory=list)  # per slice, per channel
    config: dict = field(default_factory=dict)
    error_maps: np.ndarray | None = None

    @property
    def aggregate(self) -> dict:
        finite_psnr = [p for p in self.psnr_db if np.isfinite(p)]
        out = {
            "nrmse_mean": float(np.mean(self.nrmse)) if self.nrmse else None,
            "psnr_db_mean": float(np.mean(finite_psnr)) if finite_psnr else float("inf"),
        }
        if self.pearson:
            out["pearson_mean"] = float(np.mean(self.pearson))
            out["pearson_per_channel"] = np.mean(self.pearson, axis=0).tolist()
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("error_maps")
        d["psnr_db"] = [p if np.isfinite(p) else "inf" for p in self.psnr_db]
        agg = self.aggregate
        if not np.isfinite(agg["psnr_db_mean"]):
            agg["psnr_db_mean"] = "inf"
        d["aggregate"] = agg
        return d

    def csv_rows(self) -> list[list]:
        nch = len(self.pearson[0]) if self.pearson else 0
        header = ["slice", "nrmse", "psnr_db"] + [f"pearson_ch{i}" for i in range(nch)]
        rows = [header]
        for j, (e, p) in enumerate(zip(self.nrmse, self.psnr_db)):
            row = [j, f"{e:.9g}", f"{p:.9g}"]
            if self.pearson:
                row += [f"{r:.9g}" for r in self.pearson[j]]
            rows.append(row)
        return rows


def evaluate_slices(recon, ref, maps_est=None, maps_ref=None, support=None,
                    window: int = 7, config: dict | None = None) -> EvalReport:
    """Per-slice metrics for image stacks ``(nslices, ny, nx)``.

    When both map sets are given, per-channel Pearson correlation of map
    magnitudes is computed on ``support`` (``(nslices, ny, nx)`` booleans).
    """
    recon, ref = np.abs(np.asarray(recon)), np.abs(np.asarray(ref))
    report = EvalReport(config={"nrmse_norm": "l2_of_reference", "window": window, **(config or {})})
    for j in range(ref.shape[0]):
        report.nrmse.append(nrmse(recon[j], ref[j]))
        report.psnr_db.append(psnr(recon[j], ref[j]))
        if maps_est is not None and maps_ref is not None:
            sup = None if support is None else support[j]
            report.pearson.append([map_pearson(maps_est[j, i], maps_ref[j, i], sup)
                                   for i in range(maps_ref.shape[1])])
    report.error_maps = np.stack([local_error_map(recon[j], ref[j], window) for j in range(ref.shape[0])])
    return report
