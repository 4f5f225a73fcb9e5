"""Rigid subject-to-coil geometry and volume resampling.

Points are ``(x, y, z)`` in pixel units with the origin at the volume centre:
``x`` runs along columns (left-right), ``y`` along rows (anterior-posterior)
and ``z`` along slices (head-foot). A :class:`Geometry` maps a location in the
acquired stack to the standard reference stack.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "Geometry",
    "rotation_matrix",
    "rigid_transform_point",
    "inverse_transform_point",
    "grid_points",
    "resample_volume_to_reference",
    "resample_volume_from_reference",
    "compute_transformed_maps",
]


log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Geometry:
    """Rotation angles in degrees (pitch, roll, head rotation) and translations in pixels."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    m: float = 0.0
    n: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ValueError(f"geometry parameter {name}={value} is not finite")

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.m, self.n, self.t], dtype=float)

    def is_identity(self) -> bool:
        return not any(asdict(self).values())

    def to_meta(self) -> dict:
        return {
            "alpha_deg": self.alpha,
            "beta_deg": self.beta,
            "gamma_deg": self.gamma,
            "m_px": self.m,
            "n_px": self.n,
            "t_px": self.t,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Geometry":
        return cls(
            float(meta["alpha_deg"]),
            float(meta["beta_deg"]),
            float(meta["gamma_deg"]),
            float(meta["m_px"]),
            float(meta["n_px"]),
            float(meta["t_px"]),
        )


def rotation_matrix(g: Geometry) -> np.ndarray:
    """``Rx(alpha) @ Ry(beta) @ Rz(gamma)``."""
    a, b, c = np.deg2rad([g.alpha, g.beta, g.gamma])
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rx @ ry @ rz


def rigid_transform_point(p, g: Geometry) -> np.ndarray:
    """Map point(s) ``p`` (shape ``(..., 3)``) from the acquired to the reference stack."""
    p = np.asarray(p, dtype=float)
    return p @ rotation_matrix(g).T + g.translation


def inverse_transform_point(q, g: Geometry) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return (q - g.translation) @ rotation_matrix(g)


def grid_points(shape, slice_spacing: float = 1.0) -> np.ndarray:
    """Centred ``(x, y, z)`` coordinates of every voxel of a ``(nz, ny, nx)`` grid.

    Slice positions are scaled by ``slice_spacing`` (in in-plane pixel units).
    """
    nz, ny, nx = shape
    z = (np.arange(nz) - nz // 2) * slice_spacing
    y = np.arange(ny) - ny // 2
    x = np.arange(nx) - nx // 2
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


def _points_to_index(points: np.ndarray, shape, slice_spacing: float) -> np.ndarray:
    nz, ny, nx = shape
    return np.stack(
        [
            points[..., 2] / slice_spacing + nz // 2,
            points[..., 1] + ny // 2,
            points[..., 0] + nx // 2,
        ]
    )


def _trilinear(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    # grid-constant: neighbours outside the grid contribute zeros
    def sample(v):
        return ndimage.map_coordinates(v, coords, order=1, mode="grid-constant", cval=0.0)

    if np.iscomplexobj(vol):
        return sample(vol.real) + 1j * sample(vol.imag)
    return sample(vol)


def _resample(vol: np.ndarray, source_points_fn, slice_spacing: float) -> np.ndarray:
    vol = np.asarray(vol)
    if vol.ndim < 3:
        raise ValueError(f"expected a (..., nz, ny, nx) volume, got shape {vol.shape}")
    shape = vol.shape[-3:]
    src = source_points_fn(grid_points(shape, slice_spacing))
    coords = _points_to_index(src, shape, slice_spacing)
    flat = vol.reshape((-1,) + shape)
    out = np.stack([_trilinear(v, coords) for v in flat])
    return out.reshape(vol.shape)


def resample_volume_to_reference(vol, g: Geometry, slice_spacing: float = 1.0) -> np.ndarray:
    """Trilinear resampling of ``vol`` (``(..., nz, ny, nx)``) into the reference stack.

    Output voxel ``q`` takes the input value at ``g^-1(q)``; samples outside
    the input grid are zero. Leading axes (e.g. channels) are resampled
    independently.
    """
    if g.is_identity():
        return np.array(vol, copy=True)
    return _resample(vol, lambda q: inverse_transform_point(q, g), slice_spacing)


def resample_volume_from_reference(vol, g: Geometry, slice_spacing: float = 1.0) -> np.ndarray:
    """Inverse of :func:`resample_volume_to_reference` (up to interpolation loss)."""
    if g.is_identity():
        return np.array(vol, copy=True)
    return _resample(vol, lambda p: rigid_transform_point(p, g), slice_spacing)


def compute_transformed_maps(fullysampled: np.ndarray, g: Geometry, cfg=None,
                             slice_spacing: float = 1.0):
    """ESPIRiT maps of the channel images after moving them into the reference stack.

    ``fullysampled`` is ``(nslices, ncoils, ny, nx)`` k-space. The result is a
    ``CoilMaps`` with role ``"transformed"``. Reference slices that the
    transform leaves without any data get zero maps and zero eigenvalues.
    """
    from .calibrate import CalibConfig, CoilMaps, espirit_from_kspace
    from .kspace import fft2c, ifft2c

    cfg = cfg or CalibConfig()
    images = ifft2c(np.asarray(fullysampled))
    # (slices, coils, y, x) -> (coils, slices, y, x) so each coil is one volume
    moved = fft2c(resample_volume_to_reference(images.transpose(1, 0, 2, 3), g, slice_spacing)
                  .transpose(1, 0, 2, 3))
    filled = np.any(moved != 0, axis=(1, 2, 3))
    maps = np.zeros(moved.shape, dtype=complex)
    eigval = np.zeros((moved.shape[0],) + moved.shape[2:])
    degenerate = []
    if filled.any():
        part = espirit_from_kspace(moved[filled], cfg, role="transformed")
        maps[filled], eigval[filled] = part.maps, part.eigval
        index = np.flatnonzero(filled)
        degenerate = [(int(index[d[0]]),) + tuple(d[1:]) for d in part.degenerate]
    if not filled.all():
        log.warning("reference slices %s receive no data under %s", np.flatnonzero(~filled).tolist(), g)
    return CoilMaps(maps, eigval, "transformed", degenerate)
