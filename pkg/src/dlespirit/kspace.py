"""Cartesian k-space utilities.

Volumes are plain complex ``numpy`` arrays shaped ``(nslices, nchannels, ny, nx)``.
The 2D transforms act on the last two axes, so single slices ``(nchannels, ny, nx)``
and single images ``(ny, nx)`` work as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SamplingMask",
    "check_finite",
    "fft2c",
    "ifft2c",
    "make_uniform_mask",
    "apply_mask",
    "zero_fill_images",
    "acs_rows",
    "extract_acs",
    "zero_pad_rows",
    "rss_combine",
]

_AXES = (-2, -1)


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Raise ``ValueError`` naming the first non-finite index of ``x``."""
    x = np.asarray(x)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{name} has non-finite value {x[idx]!r} at index {idx}")
    return x


def fft2c(image: np.ndarray) -> np.ndarray:
    """Centered unitary 2D DFT over the last two axes (DC at ``(ny // 2, nx // 2)``)."""
    image = check_finite(image, "image")
    shifted = np.fft.ifftshift(image, axes=_AXES)
    return np.fft.fftshift(np.fft.fft2(shifted, axes=_AXES, norm="ortho"), axes=_AXES)


def ifft2c(kspace: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    kspace = check_finite(kspace, "kspace")
    shifted = np.fft.ifftshift(kspace, axes=_AXES)
    return np.fft.fftshift(np.fft.ifft2(shifted, axes=_AXES, norm="ortho"), axes=_AXES)


@dataclass(frozen=True)
class SamplingMask:
    """Uniform phase-encode line selection: line ``k`` is kept iff ``k % R == offset``."""

    ny: int
    R: int
    offset: int = 0
    sampled: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.ny < 1:
            raise ValueError(f"ny must be >= 1, got {self.ny}")
        if not 1 <= self.R <= self.ny:
            raise ValueError(f"acceleration R={self.R} must satisfy 1 <= R <= ny={self.ny}")
        if not 0 <= self.offset < self.R:
            raise ValueError(f"offset={self.offset} must satisfy 0 <= offset < R={self.R}")
        lines = np.arange(self.ny) % self.R == self.offset
        lines.setflags(write=False)
        object.__setattr__(self, "sampled", lines)

    @property
    def n_sampled(self) -> int:
        return int(self.sampled.sum())

    @property
    def lines(self) -> np.ndarray:
        return np.flatnonzero(self.sampled)

    def to_bytes(self) -> bytes:
        return self.sampled.astype(np.uint8).tobytes()


def make_uniform_mask(ny: int, R: int, offset: int = 0) -> SamplingMask:
    return SamplingMask(int(ny), int(R), int(offset))


def _check_mask(kspace: np.ndarray, mask: SamplingMask):
    if kspace.shape[-2] != mask.ny:
        raise ValueError(f"mask has ny={mask.ny} but k-space has {kspace.shape[-2]} rows")


def apply_mask(kspace: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Zero the unsampled ky rows; sampled rows are copied unchanged."""
    kspace = np.asarray(kspace)
    _check_mask(kspace, mask)
    return np.where(mask.sampled[:, None], kspace, np.zeros((), dtype=kspace.dtype))


def zero_fill_images(kspace: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Aliased channel images from zero-filled undersampled k-space."""
    return ifft2c(apply_mask(kspace, mask))


def acs_rows(ny: int, n_lines: int) -> slice:
    """Row slice of the ``n_lines`` central lines, centred on ``ny // 2``."""
    if not 1 <= n_lines <= ny:
        raise ValueError(f"ACS line count {n_lines} must lie in [1, ny={ny}]")
    start = ny // 2 - n_lines // 2
    return slice(start, start + n_lines)


def extract_acs(kspace: np.ndarray, n_lines: int) -> np.ndarray:
    kspace = np.asarray(kspace)
    return kspace[..., acs_rows(kspace.shape[-2], n_lines), :].copy()


def zero_pad_rows(acs: np.ndarray, ny: int) -> np.ndarray:
    """Place ACS rows back at their centred position in an ``ny``-row zero array."""
    out = np.zeros(acs.shape[:-2] + (ny, acs.shape[-1]), dtype=np.result_type(acs, np.complex128))
    out[..., acs_rows(ny, acs.shape[-2]), :] = acs
    return out


def rss_combine(images: np.ndarray, axis: int = -3) -> np.ndarray:
    """Root-sum-of-squares over the channel axis."""
    images = check_finite(images, "images")
    return np.sqrt(np.sum(np.abs(images) ** 2, axis=axis))
