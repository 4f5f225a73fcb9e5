"""Per-slice SENSE and L1-ESPIRiT reconstruction.

A slice reconstruction works on ``maps`` of shape ``(ncoils, ny, nx)``,
k-space ``(ncoils, ny, nx)`` and images ``(ny, nx)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .kspace import SamplingMask, fft2c, ifft2c

__all__ = [
    "ReconConfig",
    "ReconResult",
    "sense_forward",
    "sense_adjoint",
    "mask_maps",
    "sense_cg",
    "soft_threshold",
    "wavelet_fwd",
    "wavelet_inv",
    "power_iteration",
    "l1_espirit",
    "zero_filled_rss",
    "normalize_maps",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconConfig:
    cg_tol: float = 1e-8
    cg_max_iters: int = 200
    fista_iters: int = 100
    reg_weight: float | None = None  # None: relative default, see l1_espirit
    reg_rel: float = 1e-2
    wavelet_levels: int = 2
    mask_maps: bool = False
    map_crop: float = 0.9
    step_mode: str = "power_iteration"
    fixed_step: float = 1.0
    power_iters: int = 30
    skip_approx: bool = True

    def __post_init__(self):
        if self.cg_tol <= 0 or self.cg_max_iters < 1 or self.fista_iters < 1:
            raise ValueError("solver tolerances and iteration counts must be positive")
        if self.reg_weight is not None and self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.step_mode not in ("power_iteration", "fixed"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")


@dataclass
class ReconResult:
    image: np.ndarray
    converged: bool = True
    iterations: int = 0
    residuals: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    restarts: int = 0
    meta: dict = field(default_factory=dict)


def _sampled(mask, ny):
    if mask is None:
        return np.ones(ny, dtype=bool)
    if isinstance(mask, SamplingMask):
        if mask.ny != ny:
            raise ValueError(f"mask ny={mask.ny} does not match image ny={ny}")
        return mask.sampled
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (ny,):
        raise ValueError(f"line mask shape {mask.shape} does not match ny={ny}")
    return mask


def sense_forward(x: np.ndarray, maps: np.ndarray, mask=None) -> np.ndarray:
    """``y_i = M F (s_i x)``."""
    if maps.shape[1:] != x.shape:
        raise ValueError(f"image {x.shape} does not match maps {maps.shape}")
    lines = _sampled(mask, x.shape[0])
    return fft2c(maps * x) * lines[:, None]


def sense_adjoint(y: np.ndarray, maps: np.ndarray, mask=None) -> np.ndarray:
    """``x = sum_i conj(s_i) F^H (M y_i)``."""
    if y.shape != maps.shape:
        raise ValueError(f"k-space {y.shape} does not match maps {maps.shape}")
    lines = _sampled(mask, y.shape[1])
    return np.sum(np.conj(maps) * ifft2c(y * lines[:, None]), axis=0)


def mask_maps(maps: np.ndarray, eigval: np.ndarray, crop: float) -> np.ndarray:
    """Zero maps wherever the calibration eigenvalue falls below ``crop``."""
    return np.where(eigval[None] >= crop, maps, 0)


def normalize_maps(maps: np.ndarray) -> np.ndarray:
    """Scale each pixel's channel vector to unit norm (zero vectors stay zero)."""
    norm = np.sqrt(np.sum(np.abs(maps) ** 2, axis=-3, keepdims=True))
    return np.divide(maps, norm, out=np.zeros_like(maps, dtype=complex), where=norm > 0)


def _prepare_maps(maps, eigval, cfg: ReconConfig):
    if cfg.mask_maps:
        if eigval is None:
            raise ValueError("mask_maps requires the eigenvalue map")
        return mask_maps(maps, eigval, cfg.map_crop)
    return maps


def sense_cg(y: np.ndarray, maps: np.ndarray, mask=None, cfg: ReconConfig = ReconConfig(),
             eigval: np.ndarray | None = None, x0: np.ndarray | None = None) -> ReconResult:
    """Conjugate gradients on the normal equations ``A^H A x = A^H y`` (CGLS form).

    Stops once ``||A^H (y - A x)|| <= cg_tol * ||A^H y||``. ``residuals``
    records the data residual ``||y - A x||`` per iteration, which CGLS keeps
    non-increasing.
    """
    maps = _prepare_maps(maps, eigval, cfg)
    x = np.zeros(maps.shape[1:], dtype=complex) if x0 is None else np.array(x0, dtype=complex)
    r = y * _sampled(mask, y.shape[1])[:, None] - sense_forward(x, maps, mask)
    s = sense_adjoint(r, maps, mask)
    p = s.copy()
    gamma = np.vdot(s, s).real
    ref = np.linalg.norm(sense_adjoint(y, maps, mask))
    residuals = [float(np.linalg.norm(r))]
    normal_res = np.sqrt(gamma)
    it = 0
    if ref == 0 or normal_res <= cfg.cg_tol * ref:
        return ReconResult(x, True, 0, residuals, meta=_meta(cfg, normal_res / max(ref, 1e-300)))
    while it < cfg.cg_max_iters:
        q = sense_forward(p, maps, mask)
        qq = np.vdot(q, q).real
        if qq == 0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        s = sense_adjoint(r, maps, mask)
        gamma_new = np.vdot(s, s).real
        it += 1
        residuals.append(float(np.linalg.norm(r)))
        normal_res = np.sqrt(gamma_new)
        if normal_res <= cfg.cg_tol * ref:
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    rel = float(normal_res / ref)
    converged = rel <= cfg.cg_tol
    if not converged:
        log.warning("CG stopped after %d iterations at relative residual %.3g", it, rel)
    return ReconResult(x, converged, it, residuals, meta=_meta(cfg, rel))


def _meta(cfg, final_residual=None):
    out = asdict(cfg)
    if final_residual is not None:
        out["final_relative_residual"] = float(final_residual)
    return out


def soft_threshold(x, t):
    """Complex soft thresholding ``x * max(|x| - t, 0) / |x|``; ``t`` may be an array."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be >= 0")
    x = np.asarray(x)
    mag = np.abs(x)
    scale = np.divide(np.maximum(mag - t, 0), mag, out=np.zeros(mag.shape), where=mag > 0)
    return x * scale


def _check_wavelet_dims(shape, levels):
    step = 2 ** levels
    if shape[-2] % step or shape[-1] % step:
        raise ValueError(f"image {shape[-2:]} not divisible by 2**{levels}")


def wavelet_fwd(image: np.ndarray, levels: int = 2) -> np.ndarray:
    """Orthonormal 2D Haar transform in the usual pyramid layout (approximation top-left)."""
    coeffs = np.array(image, dtype=np.result_type(image, float), copy=True)
    _check_wavelet_dims(coeffs.shape, levels)
    ny, nx = coeffs.shape[-2:]
    for _ in range(levels):
        block = coeffs[..., :ny, :nx]
        lo = (block[..., 0::2, :] + block[..., 1::2, :]) / np.sqrt(2)
        hi = (block[..., 0::2, :] - block[..., 1::2, :]) / np.sqrt(2)
        block = np.concatenate([lo, hi], axis=-2)
        lo = (block[..., 0::2] + block[..., 1::2]) / np.sqrt(2)
        hi = (block[..., 0::2] - block[..., 1::2]) / np.sqrt(2)
        coeffs[..., :ny, :nx] = np.concatenate([lo, hi], axis=-1)
        ny, nx = ny // 2, nx // 2
    return coeffs


def wavelet_inv(coeffs: np.ndarray, levels: int = 2) -> np.ndarray:
    image = np.array(coeffs, copy=True)
    _check_wavelet_dims(image.shape, levels)
    ny, nx = image.shape[-2] >> (levels - 1), image.shape[-1] >> (levels - 1)
    for _ in range(levels):
        block = image[..., :ny, :nx]
        lo, hi = block[..., : nx // 2], block[..., nx // 2:]
        cols = np.empty_like(block)
        cols[..., 0::2] = (lo + hi) / np.sqrt(2)
        cols[..., 1::2] = (lo - hi) / np.sqrt(2)
        lo, hi = cols[..., : ny // 2, :], cols[..., ny // 2:, :]
        rows = np.empty_like(block)
        rows[..., 0::2, :] = (lo + hi) / np.sqrt(2)
        rows[..., 1::2, :] = (lo - hi) / np.sqrt(2)
        image[..., :ny, :nx] = rows
        ny, nx = ny * 2, nx * 2
    return image


def power_iteration(maps: np.ndarray, mask=None, iters: int = 30, seed: int = 0) -> float:
    """Largest eigenvalue of ``A^H A`` estimated by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(maps.shape[1:]) + 1j * rng.standard_normal(maps.shape[1:])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        z = sense_adjoint(sense_forward(x, maps, mask), maps, mask)
        lam = np.linalg.norm(z)
        if lam == 0:
            raise ValueError("power iteration collapsed: A^H A is the zero operator")
        x = z / lam
    return float(lam)


def default_reg_weight(y: np.ndarray, maps: np.ndarray, mask, cfg: ReconConfig) -> float:
    """``reg_rel`` times the 99th-percentile wavelet magnitude of the zero-filled image."""
    zf = sense_adjoint(y, maps, mask)
    return float(cfg.reg_rel * np.percentile(np.abs(wavelet_fwd(zf, cfg.wavelet_levels)), 99))


def l1_espirit(y: np.ndarray, maps: np.ndarray, mask=None, cfg: ReconConfig = ReconConfig(),
               eigval: np.ndarray | None = None) -> ReconResult:
    """FISTA for ``0.5 ||A x - y||^2 + mu ||W x||_1`` with Haar ``W``.

    Restarts the momentum whenever the objective would increase and takes a
    plain proximal-gradient step from the last iterate instead.
    """
    maps = _prepare_maps(maps, eigval, cfg)
    lines = _sampled(mask, y.shape[1])
    y = y * lines[:, None]
    mu = default_reg_weight(y, maps, mask, cfg) if cfg.reg_weight is None else cfg.reg_weight
    if cfg.step_mode == "power_iteration":
        # power iteration approaches the top eigenvalue from below
        L = 1.05 * power_iteration(maps, mask, cfg.power_iters)
    else:
        L = 1.0 / cfg.fixed_step
    lv = cfg.wavelet_levels

    # the coarse approximation band is not penalized
    weights = np.ones(maps.shape[1:])
    weights[: maps.shape[1] >> lv, : maps.shape[2] >> lv] = 0.0 if cfg.skip_approx else 1.0

    def objective(x):
        r = sense_forward(x, maps, mask) - y
        return 0.5 * np.vdot(r, r).real + mu * np.sum(weights * np.abs(wavelet_fwd(x, lv)))

    def prox_grad(z):
        g = sense_adjoint(sense_forward(z, maps, mask) - y, maps, mask)
        return wavelet_inv(soft_threshold(wavelet_fwd(z - g / L, lv), weights * (mu / L)), lv)

    x = np.zeros(maps.shape[1:], dtype=complex)
    z, t = x, 1.0
    f = objective(x)
    objectives = [float(f)]
    restarts = 0
    for _ in range(cfg.fista_iters):
        x_new = prox_grad(z)
        f_new = objective(x_new)
        if f_new > f:
            restarts += 1
            t = 1.0
            x_new = prox_grad(x)
            f_new = objective(x_new)
            if f_new > f:
                # step no longer decreases the objective at this precision
                x_new, f_new = x, f
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = x_new + ((t - 1) / t_new) * (x_new - x)
        x, f, t = x_new, f_new, t_new
        objectives.append(float(f))
    meta = _meta(cfg)
    meta.update(reg_weight_used=mu, lipschitz=L)
    return ReconResult(x, True, cfg.fista_iters, objectives=objectives, restarts=restarts, meta=meta)


def zero_filled_rss(y: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Root-sum-of-squares of zero-filled channel images."""
    lines = _sampled(mask, y.shape[1])
    return np.sqrt(np.sum(np.abs(ifft2c(y * lines[:, None])) ** 2, axis=0))
