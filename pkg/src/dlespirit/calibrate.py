"""ESPIRiT calibration: reference coil maps from autocalibration lines.

Maps are shaped ``(nslices, ncoils, ny, nx)``; eigenvalue maps ``(nslices, ny, nx)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kspace import check_finite, extract_acs, ifft2c

__all__ = [
    "CalibConfig",
    "CalibrationError",
    "CoilMaps",
    "build_calibration_matrix",
    "espirit_maps",
    "espirit_from_kspace",
    "normalize_map_phase",
    "reference_channel",
    "coil_compress",
]

ROLES = ("reference", "transformed", "estimated")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibConfig:
    kernel_k: int = 6
    sv_rel_threshold: float = 0.02
    eig_crop: float | None = None
    acs_lines: int = 24

    def __post_init__(self):
        if self.kernel_k < 2:
            raise ValueError(f"kernel_k must be >= 2, got {self.kernel_k}")
        if not 0 < self.sv_rel_threshold < 1:
            raise ValueError(f"sv_rel_threshold must lie in (0, 1), got {self.sv_rel_threshold}")
        if self.eig_crop is not None and not 0 <= self.eig_crop <= 1:
            raise ValueError(f"eig_crop must lie in [0, 1], got {self.eig_crop}")


@dataclass
class CoilMaps:
    maps: np.ndarray
    eigval: np.ndarray
    role: str = "reference"
    degenerate: list = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown map role {self.role!r}")
        if self.maps.ndim != 4 or self.eigval.shape != self.maps.shape[:1] + self.maps.shape[2:]:
            raise ValueError(f"inconsistent map {self.maps.shape} / eigval {self.eigval.shape} shapes")

    @property
    def ncoils(self) -> int:
        return self.maps.shape[1]

    def support(self, threshold: float = 0.0) -> np.ndarray:
        return self.eigval > threshold


def build_calibration_matrix(acs: np.ndarray, kernel_k: int) -> np.ndarray:
    """Block-Hankel matrix of all ``k x k`` windows of one ACS slice.

    Args:
        acs: ``(ncoils, ay, ax)`` calibration k-space.
        kernel_k: kernel side length.

    Returns:
        ``((ay-k+1)*(ax-k+1), ncoils*k*k)`` matrix; rows scan windows in
        row-major order, column ``i*k*k + dy*k + dx`` holds coil ``i`` at
        window offset ``(dy, dx)``.
    """
    acs = np.asarray(acs)
    if acs.ndim == 2:
        acs = acs[None]
    nc, ay, ax = acs.shape
    if ay < kernel_k or ax < kernel_k:
        raise ValueError(f"ACS region {ay}x{ax} is smaller than the {kernel_k}x{kernel_k} kernel")
    win = sliding_window_view(acs, (kernel_k, kernel_k), axis=(1, 2))
    # (nc, wy, wx, dy, dx) -> (wy, wx, nc, dy, dx)
    return win.transpose(1, 2, 0, 3, 4).reshape((ay - kernel_k + 1) * (ax - kernel_k + 1), -1)


def _image_space_kernels(basis: np.ndarray, nc: int, k: int, image_dims) -> np.ndarray:
    """Per-pixel operator columns ``G[v, c, y, x]``; ``G G^H`` has eigenvalues in [0, 1]."""
    ny, nx = image_dims
    nv = basis.shape[1]
    kernels = basis.T.reshape(nv, nc, k, k)
    padded = np.zeros((nv, nc, ny, nx), dtype=complex)
    y0, x0 = ny // 2 - k // 2, nx // 2 - k // 2
    padded[..., y0:y0 + k, x0:x0 + k] = kernels
    return ifft2c(padded) * (np.sqrt(ny * nx) / k)


def _leading_eigvecs(gram: np.ndarray, ref: int, tol: float = 1e-12):
    """Leading eigenpairs of Hermitian ``(..., nc, nc)`` matrices plus degenerate pixel indices."""
    w, v = np.linalg.eigh(gram)
    top = w[..., -1]
    vec = v[..., :, -1].copy()
    degenerate = []
    if w.shape[-1] > 1:
        tied = np.argwhere(top - w[..., -2] <= tol)
        for idx in map(tuple, tied):
            space = v[idx][:, w[idx] >= top[idx] - tol]
            # vector in the tied eigenspace closest to the reference channel axis
            proj = space @ space[ref].conj()
            norm = np.linalg.norm(proj)
            if norm > 0:
                vec[idx] = proj / norm
            degenerate.append(idx)
    return top, vec, degenerate


def reference_channel(maps: np.ndarray) -> int:
    """Channel with the largest mean magnitude over the volume."""
    mags = np.abs(maps).mean(axis=tuple(i for i in range(maps.ndim) if i != maps.ndim - 3))
    return int(np.argmax(mags))


def normalize_map_phase(maps: CoilMaps | np.ndarray, ref: int | None = None):
    """Rotate each pixel so the reference channel is real and non-negative.

    Accepts a :class:`CoilMaps` or a bare ``(..., ncoils, ny, nx)`` array and
    returns the same kind. Magnitudes are untouched.
    """
    arr = maps.maps if isinstance(maps, CoilMaps) else np.asarray(maps)
    check_finite(arr, "maps")
    if ref is None:
        ref = reference_channel(arr)
    r = arr[..., ref, :, :]
    mag = np.abs(r)
    phase = np.ones_like(r)
    nz = mag > 0
    phase[nz] = r[nz] / mag[nz]
    out = arr * np.conj(phase)[..., None, :, :]
    out[..., ref, :, :] = np.where(nz, mag, r)
    if isinstance(maps, CoilMaps):
        return replace(maps, maps=out)
    return out


def espirit_maps(acs: np.ndarray, image_dims, cfg: CalibConfig = CalibConfig(),
                 role: str = "reference") -> CoilMaps:
    """First ESPIRiT map set for every slice of ``acs`` (``(nslices, ncoils, ay, ax)``)."""
    acs = check_finite(np.asarray(acs), "acs")
    if acs.ndim == 3:
        acs = acs[None]
    ns, nc = acs.shape[:2]
    ny, nx = image_dims
    k = cfg.kernel_k
    maps = np.zeros((ns, nc, ny, nx), dtype=complex)
    eigval = np.zeros((ns, ny, nx))
    degenerate = []
    ref_guess = int(np.argmax(np.sum(np.abs(acs) ** 2, axis=(0, 2, 3))))
    for j in range(ns):
        A = build_calibration_matrix(acs[j], k)
        _, s, vh = np.linalg.svd(A, full_matrices=False)
        if s.size == 0 or s[0] == 0:
            raise CalibrationError(f"slice {j}: calibration matrix is zero")
        keep = s >= cfg.sv_rel_threshold * s[0]
        # windows (rows of A) span conj(V), i.e. the rows of vh
        G = _image_space_kernels(vh[keep].T, nc, k, (ny, nx))
        gram = np.einsum("vayx,vbyx->yxab", G, G.conj())
        top, vec, deg = _leading_eigvecs(gram, ref_guess)
        maps[j] = vec.transpose(2, 0, 1)
        eigval[j] = np.clip(top, 0.0, None)
        degenerate.extend((j,) + d for d in deg)
    out = normalize_map_phase(CoilMaps(maps, eigval, role, degenerate))
    if cfg.eig_crop is not None:
        out.maps[np.broadcast_to((eigval < cfg.eig_crop)[:, None], out.maps.shape)] = 0
    return out


def espirit_from_kspace(kspace: np.ndarray, cfg: CalibConfig = CalibConfig(),
                        role: str = "reference") -> CoilMaps:
    """Reference maps from the central ``cfg.acs_lines`` rows of fully sampled k-space."""
    kspace = np.asarray(kspace)
    return espirit_maps(extract_acs(kspace, cfg.acs_lines), kspace.shape[-2:], cfg, role)


def coil_compress(kspace: np.ndarray, target_channels: int):
    """SVD coil compression shared across slices.

    Returns:
        ``(compressed, retained_energy)`` where ``compressed`` has
        ``target_channels`` virtual channels and ``retained_energy`` is the
        kept fraction of the squared singular values.
    """
    kspace = check_finite(np.asarray(kspace), "kspace")
    ns, nc, ny, nx = kspace.shape
    if not 1 <= target_channels <= nc:
        raise ValueError(f"cannot compress {nc} channels to {target_channels}")
    data = kspace.transpose(1, 0, 2, 3).reshape(nc, -1)
    u, s, _ = np.linalg.svd(data, full_matrices=False)
    total = np.sum(s ** 2)
    energy = float(np.sum(s[:target_channels] ** 2) / total) if total > 0 else 1.0
    compressed = u[:, :target_channels].conj().T @ data
    return compressed.reshape(target_channels, ns, ny, nx).transpose(1, 0, 2, 3), energy
