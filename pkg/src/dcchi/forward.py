"""DCCHI measurement operator: coded-aperture CASSI branch and PAN branch.

The CASSI branch masks the cube, shears band ``k`` right by ``k * step``
pixels and sums over bands (single-disperser geometry). The PAN branch is a
per-pixel weighted sum over bands. The array kernels (``*_op``) accept numpy
arrays or torch tensors with trailing ``(H, W, C)`` axes so the same code path
serves the reference operators and the differentiable training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CodedAperture, PanImage, SpectralCube, make_rng

__all__ = [
    "DispersionSpec",
    "MeasurementPair",
    "cassi_op",
    "cassi_adjoint_op",
    "pan_op",
    "cassi_measure",
    "pan_measure",
    "dcchi_measure",
    "cassi_adjoint",
    "uniform_response",
]


@dataclass(frozen=True)
class DispersionSpec:
    """Integer horizontal shear of ``step`` pixels per band index."""

    step: int = 1

    def __post_init__(self):
        if int(self.step) != self.step or self.step < 0:
            raise ValueError(f"dispersion step must be a non-negative integer, got {self.step}")

    def out_width(self, width: int, bands: int) -> int:
        return width + self.step * (bands - 1)


@dataclass(frozen=True, eq=False)
class MeasurementPair:
    y_cassi: np.ndarray
    y_pan: np.ndarray
    mask: CodedAperture
    disp: DispersionSpec
    response: np.ndarray

    def __post_init__(self):
        yc = np.asarray(self.y_cassi)
        yp = np.asarray(self.y_pan)
        if not (np.all(np.isfinite(yc)) and np.all(np.isfinite(yp))):
            raise ValueError("measurements must be finite")
        h, w = self.mask.shape
        if yp.shape != (h, w):
            raise ValueError(f"PAN measurement shape {yp.shape} != mask shape {(h, w)}")
        if yc.shape != (h, self.disp.out_width(w, len(self.response))):
            raise ValueError(f"CASSI measurement shape {yc.shape} inconsistent with operator")

    @property
    def bands(self) -> int:
        return len(self.response)


def uniform_response(bands: int) -> np.ndarray:
    return np.full(bands, 1.0 / bands)


def _zeros(like, shape):
    if isinstance(like, np.ndarray):
        return np.zeros(shape, dtype=like.dtype)
    return like.new_zeros(shape)


def cassi_op(x, mask, step: int):
    """Mask, shear and sum: ``y[i, j] = sum_k mask[i, j-k*s] * x[i, j-k*s, k]``."""
    *lead, h, w, c = x.shape
    y = _zeros(x, (*lead, h, w + step * (c - 1)))
    for k in range(c):
        y[..., :, k * step : k * step + w] += mask * x[..., k]
    return y


def cassi_adjoint_op(y, mask, step: int, bands: int):
    """Transpose of :func:`cassi_op`: ``x[i, j, k] = mask[i, j] * y[i, j+k*s]``."""
    h, w = mask.shape[-2:]
    cols = [mask * y[..., :, k * step : k * step + w] for k in range(bands)]
    if isinstance(y, np.ndarray):
        return np.stack(cols, axis=-1)
    import torch

    return torch.stack(cols, dim=-1)


def pan_op(x, response):
    c = x.shape[-1]
    y = _zeros(x, x.shape[:-1])
    for k in range(c):
        y = y + response[k] * x[..., k]
    return y


def _check_mask(cube: SpectralCube, mask: CodedAperture) -> None:
    if mask.shape != cube.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != cube spatial shape {cube.shape[:2]}")


def _check_response(response, bands: int) -> np.ndarray:
    r = np.asarray(response, dtype=np.float64).ravel()
    if r.size != bands:
        raise ValueError(f"response has {r.size} weights, cube has {bands} bands")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("response weights must be finite and >= 0")
    return r


def cassi_measure(cube: SpectralCube, mask: CodedAperture, disp: DispersionSpec) -> np.ndarray:
    _check_mask(cube, mask)
    return cassi_op(cube.data, mask.mask, disp.step)


def pan_measure(cube: SpectralCube, response=None) -> PanImage:
    r = _check_response(uniform_response(cube.bands) if response is None else response, cube.bands)
    return PanImage(pan_op(cube.data, r.astype(np.float32)))


def cassi_adjoint(y, mask: CodedAperture, disp: DispersionSpec, bands: int, grid=None) -> SpectralCube:
    """Shift-back lift of a CASSI measurement to an H x W x C cube.

    Returns a :class:`SpectralCube` when ``grid`` is given, otherwise the raw
    float32 array.
    """
    y = np.asarray(y, dtype=np.float32)
    h, w = mask.shape
    if y.shape != (h, disp.out_width(w, bands)):
        raise ValueError(f"measurement shape {y.shape} inconsistent with mask {mask.shape}, "
                         f"step {disp.step}, {bands} bands")
    x = cassi_adjoint_op(y, mask.mask, disp.step, bands)
    return SpectralCube(x, grid) if grid is not None else x


def dcchi_measure(
    cube: SpectralCube,
    mask: CodedAperture,
    disp: DispersionSpec,
    response=None,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> MeasurementPair:
    """Both branch measurements plus i.i.d. Gaussian noise of std ``noise_sigma``.

    Noise for the CASSI branch is drawn first, then the PAN branch, from one
    ``make_rng(seed)`` stream. PAN values are not clipped at zero.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    r = _check_response(uniform_response(cube.bands) if response is None else response, cube.bands)
    yc = cassi_measure(cube, mask, disp)
    yp = pan_op(cube.data, r.astype(np.float32))
    if noise_sigma > 0:
        rng = make_rng(seed)
        yc = (yc + noise_sigma * rng.standard_normal(yc.shape)).astype(np.float32)
        yp = (yp + noise_sigma * rng.standard_normal(yp.shape)).astype(np.float32)
    return MeasurementPair(yc, yp, mask, disp, r)
