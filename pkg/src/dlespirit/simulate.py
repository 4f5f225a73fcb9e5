"""Synthetic multi-coil, multi-slice acquisitions.

Random draws use ``numpy.random.default_rng`` (PCG64), so outputs for a given
seed are stable across platforms and numpy releases that keep PCG64 streams.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Geometry, grid_points, rigid_transform_point
from .kspace import check_finite, fft2c

__all__ = [
    "CoilProfileSet",
    "GeometryRanges",
    "SimConfig",
    "SimulatedDataset",
    "make_phantom",
    "synth_coil_sensitivities",
    "max_gradient",
    "simulate_acquisition",
    "sample_geometry",
    "simulate_dataset",
]


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"expected (nslices, ny, nx), got {dims}")
    nz, ny, nx = dims
    if nz < 1 or ny < 8 or nx < 8:
        raise ValueError(f"phantom dims {dims} too small: need nslices >= 1 and ny, nx >= 8")
    return dims


def _normalized_coords(dims, slice_spacing=1.0):
    """Voxel coordinates scaled so the in-plane field of view spans [-1, 1)."""
    nz, ny, nx = dims
    pts = grid_points(dims, slice_spacing)
    half = np.array([nx / 2, ny / 2, nx / 2])
    return pts / half


def _ellipsoid(coords, center, axes, angle):
    c, s = np.cos(angle), np.sin(angle)
    x = coords[..., 0] - center[0]
    y = coords[..., 1] - center[1]
    z = coords[..., 2] - center[2]
    xr = c * x + s * y
    yr = -s * x + c * y
    return (xr / axes[0]) ** 2 + (yr / axes[1]) ** 2 + (z / axes[2]) ** 2 <= 1.0


def make_phantom(dims, seed: int = 0, style: str = "ellipses", scale: float = 0.75,
                 slice_spacing: float = 1.0) -> np.ndarray:
    """Piecewise-smooth head-like phantom with values in [0, 1].

    Args:
        dims: ``(nslices, ny, nx)``.
        seed: RNG seed; identical seeds give bit-identical volumes.
        style: ``"ellipses"`` (piecewise constant) or ``"blobs"`` (smooth texture).
        scale: outer head size as a fraction of the field of view.

    Returns:
        Real array of shape ``dims``.
    """
    dims = _check_dims(dims)
    if style not in ("ellipses", "blobs"):
        raise ValueError(f"unknown phantom style {style!r}")
    if not scale > 0:
        raise ValueError(f"phantom has empty support for scale={scale}")
    rng = np.random.default_rng(seed)
    coords = _normalized_coords(dims, slice_spacing)
    nz = dims[0]
    # head extends a little beyond the slab so edge slices are not empty
    z_half = max(nz * slice_spacing / dims[2], 0.05) * 2.0
    head_axes = scale * np.array([rng.uniform(0.82, 0.95), rng.uniform(0.92, 1.0), z_half])
    head_angle = rng.uniform(-0.2, 0.2)
    head = _ellipsoid(coords, (0.0, 0.0, 0.0), head_axes, head_angle)
    brain = _ellipsoid(coords, (0.0, 0.0, 0.0), head_axes * [0.86, 0.88, 0.97], head_angle)
    vol = np.where(head, 0.35, 0.0)
    if style == "ellipses":
        vol[brain] = 0.7
        for _ in range(rng.integers(4, 8)):
            center = np.array([rng.uniform(-0.45, 0.45), rng.uniform(-0.5, 0.5), 0.0]) * head_axes
            center[2] = rng.uniform(-0.5, 0.5) * z_half
            axes = head_axes * rng.uniform(0.08, 0.32, size=3)
            axes[2] = z_half * rng.uniform(0.5, 1.2)
            level = rng.uniform(0.15, 1.0)
            vol[_ellipsoid(coords, center, axes, rng.uniform(0, np.pi)) & brain] = level
    else:
        texture = np.full(dims, 0.45)
        for _ in range(rng.integers(5, 9)):
            center = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), 0.0]) * head_axes
            width = rng.uniform(0.1, 0.3) * scale
            amp = rng.uniform(-0.25, 0.5)
            d2 = np.sum((coords[..., :2] - center[:2]) ** 2, axis=-1)
            texture += amp * np.exp(-d2 / (2 * width ** 2))
        vol[brain] = np.clip(texture[brain], 0.1, 1.0)
    if not (vol > 0).any():
        raise ValueError("phantom has empty support; increase scale")
    return vol


@dataclass
class CoilProfileSet:
    """Complex sensitivities shaped ``(nslices, ncoils, ny, nx)``."""

    sensitivities: np.ndarray
    grad_bound: float

    @property
    def ncoils(self) -> int:
        return self.sensitivities.shape[1]


def max_gradient(sens: np.ndarray) -> float:
    """Largest in-plane forward-difference gradient magnitude over all channels and pixels."""
    dy = np.diff(sens, axis=-2)[..., :, :-1]
    dx = np.diff(sens, axis=-1)[..., :-1, :]
    return float(np.sqrt(np.abs(dx) ** 2 + np.abs(dy) ** 2).max(initial=0.0))


def synth_coil_sensitivities(ncoils: int, dims, ring_radius: float = 1.1,
                             smoothness: float = 0.55, seed: int = 0,
                             geometry: Geometry | None = None, slice_spacing: float = 1.0,
                             normalize: bool = True, uniform: bool = False,
                             grad_bound: float = 0.25) -> CoilProfileSet:
    """Gaussian-lobe receive coils placed on a ring around the field of view.

    The coil array is fixed in the reference frame; with ``geometry`` the
    profiles are evaluated at the reference-frame positions of the acquired
    voxels. Each lobe carries a smooth linear-plus-quadratic phase.
    ``smoothness`` is the lobe width relative to the in-plane half FOV.
    """
    if ncoils < 1:
        raise ValueError(f"ncoils must be >= 1, got {ncoils}")
    if smoothness <= 0 or ring_radius < 0:
        raise ValueError("smoothness must be > 0 and ring_radius >= 0")
    dims = _check_dims(dims)
    nz, ny, nx = dims
    if uniform:
        sens = np.full((nz, ncoils, ny, nx), 1 / np.sqrt(ncoils), dtype=complex)
        return CoilProfileSet(sens, grad_bound)

    rng = np.random.default_rng(seed)
    pts = grid_points(dims, slice_spacing)
    if geometry is not None:
        pts = rigid_transform_point(pts, geometry)
    coords = pts / np.array([nx / 2, ny / 2, nx / 2])

    theta = 2 * np.pi * np.arange(ncoils) / ncoils + rng.uniform(-0.15, 0.15, ncoils)
    z_center = np.where(np.arange(ncoils) % 2 == 0, 0.25, -0.25)
    sens = np.empty((nz, ncoils, ny, nx), dtype=complex)
    for i in range(ncoils):
        center = np.array([ring_radius * np.cos(theta[i]), ring_radius * np.sin(theta[i]), z_center[i]])
        d2 = np.sum((coords - center) ** 2, axis=-1)
        lin = rng.uniform(-0.6, 0.6, size=3)
        quad = rng.uniform(-0.3, 0.3)
        phase = rng.uniform(-np.pi, np.pi) + coords @ lin + quad * (coords[..., 0] ** 2 + coords[..., 1] ** 2)
        sens[:, i] = np.exp(-d2 / (2 * smoothness ** 2)) * np.exp(1j * phase)
    if normalize:
        total = np.sqrt(np.sum(np.abs(sens) ** 2, axis=1, keepdims=True))
        if not np.all(total > 0):
            raise ValueError("coil profiles vanish at some voxels; increase smoothness")
        sens /= total
    worst = max_gradient(sens)
    if worst > grad_bound:
        raise ValueError(f"coil profiles too rough: max gradient {worst:.3g} > bound {grad_bound}")
    return CoilProfileSet(sens, grad_bound)


def simulate_acquisition(phantom: np.ndarray, coils, noise_sigma: float = 0.0,
                         seed: int = 0) -> np.ndarray:
    """Fully sampled multi-coil k-space ``fft2c(phantom * c_i)`` plus complex noise.

    Noise is i.i.d. circular complex Gaussian with ``E|n|^2 = noise_sigma**2``.
    """
    sens = coils.sensitivities if isinstance(coils, CoilProfileSet) else np.asarray(coils)
    phantom = check_finite(phantom, "phantom")
    if sens.ndim != 4 or phantom.shape != (sens.shape[0],) + sens.shape[2:]:
        raise ValueError(f"phantom shape {phantom.shape} does not match coils {sens.shape}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    kspace = fft2c(phantom[:, None] * sens)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(kspace.shape + (2,)) @ np.array([1.0, 1.0j])
        kspace = kspace + noise_sigma / np.sqrt(2) * noise
    return kspace


@dataclass(frozen=True)
class GeometryRanges:
    """Closed intervals ``(low, high)`` per geometry parameter (degrees / pixels)."""

    alpha: tuple = (-10.0, 10.0)
    beta: tuple = (-10.0, 10.0)
    gamma: tuple = (-10.0, 10.0)
    m: tuple = (-8.0, 8.0)
    n: tuple = (-8.0, 8.0)
    t: tuple = (-8.0, 8.0)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "m", "n", "t"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError(f"range for {name} is not finite: {(lo, hi)}")
            if lo > hi:
                raise ValueError(f"inverted range for {name}: {(lo, hi)}")

    def admits(self, g: Geometry) -> bool:
        return all(lo <= getattr(g, k) <= hi for k, (lo, hi) in self.items())

    def items(self):
        return [(k, getattr(self, k)) for k in ("alpha", "beta", "gamma", "m", "n", "t")]


def sample_geometry(ranges: GeometryRanges, seed: int = 0) -> Geometry:
    rng = np.random.default_rng(seed)
    return Geometry(**{k: float(rng.uniform(lo, hi)) if hi > lo else float(lo)
                       for k, (lo, hi) in ranges.items()})


@dataclass
class SimConfig:
    dims: tuple = (8, 4, 32, 32)
    noise_sigma: float = 0.0
    ring_radius: float = 1.1
    smoothness: float = 0.55
    style: str = "ellipses"
    slice_spacing: float = 1.0
    coil_seed: int = 1234
    ranges: GeometryRanges = field(default_factory=GeometryRanges)


@dataclass
class SimulatedDataset:
    kspace: np.ndarray
    phantom: np.ndarray
    coils: CoilProfileSet
    geometry: Geometry
    seed: int


def simulate_dataset(cfg: SimConfig, seed: int, geometry: Geometry | None = None) -> SimulatedDataset:
    """One synthetic subject: phantom, geometry draw, coil profiles and k-space.

    The coil array itself is fixed by ``cfg.coil_seed`` (one scanner), while
    anatomy, geometry and noise vary with ``seed``.
    """
    nz, nc, ny, nx = cfg.dims
    ss = np.random.SeedSequence(seed)
    phantom_seed, geom_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    if geometry is None:
        geometry = sample_geometry(cfg.ranges, geom_seed)
    phantom = make_phantom((nz, ny, nx), phantom_seed, cfg.style, slice_spacing=cfg.slice_spacing)
    coils = synth_coil_sensitivities(nc, (nz, ny, nx), cfg.ring_radius, cfg.smoothness,
                                     cfg.coil_seed, geometry, cfg.slice_spacing)
    kspace = simulate_acquisition(phantom, coils, cfg.noise_sigma, noise_seed)
    return SimulatedDataset(kspace, phantom, coils, geometry, seed)
