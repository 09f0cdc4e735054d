"""Thermal radiance physics and TeX (temperature, emissivity, texture) synthesis.

Wavelengths are passed in nanometres and converted to metres internally, so
``planck_radiance`` returns spectral radiant exitance in W m^-3 and
``band_planck`` returns band-integrated exitance in W m^-2. Cube values are
these physical numbers multiplied by a global ``radiance_scale``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import constants as _sc

from .core import SceneTeX, SpectralCube, WavelengthGrid

__all__ = [
    "PhysicalConstants",
    "CONSTANTS",
    "AtmosphereSpec",
    "MixingMatrix",
    "DEFAULT_RADIANCE_SCALE",
    "planck_radiance",
    "band_planck",
    "direct_emission",
    "environmental_emission",
    "scene_signal_fixed_point",
    "atmospheric_transfer",
    "tex_synthesize",
    "invert_temperature",
    "BracketError",
    "NonContractiveError",
    "planck_band_torch",
    "tex_synthesize_torch",
]

# W m^-2 -> cube units; puts 8-12 um bands at 280-330 K near 0.5-1.
DEFAULT_RADIANCE_SCALE = 0.05


@dataclass(frozen=True)
class PhysicalConstants:
    h: float = _sc.h
    k: float = _sc.k
    c: float = _sc.c

    @property
    def c1(self) -> float:
        """First radiation constant for exitance, 2*pi*h*c^2."""
        return 2.0 * np.pi * self.h * self.c**2

    @property
    def c2(self) -> float:
        """Second radiation constant h*c/k."""
        return self.h * self.c / self.k


CONSTANTS = PhysicalConstants()


class BracketError(ValueError):
    pass


class NonContractiveError(ValueError):
    pass


@dataclass(frozen=True)
class AtmosphereSpec:
    gamma: float = 1.0
    Lambda: object = 0.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"transmissivity gamma must lie in [0, 1], got {self.gamma}")
        lam = np.asarray(self.Lambda, dtype=np.float64)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("atmospheric radiance must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Row-stochastic, non-negative, zero-diagonal inter-object mixing weights."""

    V: np.ndarray

    def __post_init__(self):
        v = np.array(self.V, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("V must be square")
        if np.any(v < 0):
            raise ValueError("V entries must be >= 0")
        if np.any(np.diag(v) != 0):
            raise ValueError("V must have a zero diagonal")
        if v.shape[0] > 1 and not np.allclose(v.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("V rows must sum to 1")
        v.setflags(write=False)
        object.__setattr__(self, "V", v)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "MixingMatrix":
        v = rng.random((n, n))
        np.fill_diagonal(v, 0.0)
        return cls(v / v.sum(axis=1, keepdims=True))


def planck_radiance(lambda_nm, T, const: PhysicalConstants = CONSTANTS):
    """Blackbody spectral exitance ``2*pi*h*c^2 / lam^5 / (exp(hc/(lam k T)) - 1)``.

    Returns 0 where the exponent overflows.
    """
    lam = np.asarray(lambda_nm, dtype=np.float64)
    t = np.asarray(T, dtype=np.float64)
    if np.any(lam <= 0) or np.any(t <= 0):
        raise ValueError("wavelength and temperature must be > 0")
    lam_m = lam * 1e-9
    x = const.c2 / (lam_m * t)
    with np.errstate(over="ignore"):
        out = const.c1 / lam_m**5 / np.expm1(x)
    return out if out.ndim else float(out)


@lru_cache(maxsize=None)
def _gl_nodes(n: int):
    return np.polynomial.legendre.leggauss(n)


def _gl(T, a, b, n=10):
    x, w = _gl_nodes(n)
    half = 0.5 * (b - a)
    lam = 0.5 * (a + b) + half * x
    vals = planck_radiance(lam[:, None], T[None, :])
    # nm -> m for d(lambda)
    return half * 1e-9 * (w @ vals)


def band_planck(lambda_lo, lambda_hi, T, rtol: float = 1e-10, max_depth: int = 60):
    """Integral of :func:`planck_radiance` over ``[lambda_lo, lambda_hi]`` nm.

    Adaptive bisection with 10-point Gauss-Legendre panels, vectorised over
    ``T``: a panel is accepted once its two-half estimate agrees with the
    whole-panel estimate to ``rtol`` of its share of the total.
    """
    if not (lambda_lo > 0 and lambda_hi > 0):
        raise ValueError("band edges must be > 0")
    if lambda_hi < lambda_lo:
        raise ValueError(f"invalid band [{lambda_lo}, {lambda_hi}]")
    t = np.atleast_1d(np.asarray(T, dtype=np.float64))
    if np.any(t <= 0):
        raise ValueError("temperature must be > 0")
    scalar = np.ndim(T) == 0
    if lambda_hi == lambda_lo:
        out = np.zeros_like(t)
        return float(out[0]) if scalar else out.reshape(np.shape(T))

    a0, b0 = float(lambda_lo), float(lambda_hi)
    # coarse reference on log-spaced panels, used only to scale the tolerance
    edges = np.geomspace(a0, b0, 17)
    ref = sum(_gl(t, lo, hi, 20) for lo, hi in zip(edges[:-1], edges[1:]))
    ref = np.abs(ref)
    total = np.zeros_like(t)
    stack = [(a0, b0, _gl(t, a0, b0), 0)]
    width = b0 - a0
    while stack:
        a, b, whole, depth = stack.pop()
        m = 0.5 * (a + b)
        left, right = _gl(t, a, m), _gl(t, m, b)
        both = left + right
        tol = rtol * ref * max((b - a) / width, 1e-3)
        if depth >= max_depth or np.all(np.abs(both - whole) <= tol):
            total += both
        else:
            stack.append((a, m, left, depth + 1))
            stack.append((m, b, right, depth + 1))
    return float(total[0]) if scalar else total.reshape(np.shape(T))


def _check_emissivity(e):
    e = np.asarray(e, dtype=np.float64)
    if np.any((e < 0) | (e > 1)) or not np.all(np.isfinite(e)):
        raise ValueError("emissivity must lie in [0, 1]")
    return e


def direct_emission(e, T, band):
    """Emissivity-weighted band-integrated blackbody exitance."""
    e = _check_emissivity(e)
    return e * band_planck(band[0], band[1], T)


def environmental_emission(e, X):
    """Share of the surrounding signal ``X`` that an emitter of emissivity ``e`` shows."""
    e = _check_emissivity(e)
    X = np.asarray(X, dtype=np.float64)
    if np.any(X < 0):
        raise ValueError("environmental signal must be >= 0")
    out = (1.0 - e) * X
    return out if np.ndim(out) else float(out)


def scene_signal_fixed_point(e, T, V: MixingMatrix, band, method: str = "solve", tol: float = 1e-13,
                             max_iter: int = 100_000):
    """Per-object band signals ``S`` with ``S = E*B + (I - E) V S``.

    ``method="solve"`` solves the linear system directly; ``"iterate"`` runs
    the fixed-point iteration from ``S = E*B`` until the update is below
    ``tol`` relative to ``max |S|``.
    """
    e = _check_emissivity(e).ravel()
    t = np.asarray(T, dtype=np.float64).ravel()
    n = e.size
    if V.V.shape != (n, n) or t.size != n:
        raise ValueError("object count mismatch between e, T and V")
    b = band_planck(band[0], band[1], t)
    M = (1.0 - e)[:, None] * V.V
    rho = float(np.max(np.abs(np.linalg.eigvals(M)))) if n else 0.0
    if rho >= 1.0 - 1e-12:
        raise NonContractiveError(f"spectral radius of (I - E) V is {rho:.6g} >= 1")
    src = e * b
    if method == "solve":
        S = np.linalg.solve(np.eye(n) - M, src)
    elif method == "iterate":
        S = src.copy()
        for _ in range(max_iter):
            nxt = src + M @ S
            done = np.max(np.abs(nxt - S)) <= tol * max(np.max(np.abs(nxt)), 1e-300)
            S = nxt
            if done:
                break
        else:
            raise NonContractiveError("fixed-point iteration did not converge")
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.maximum(S, 0.0)


def atmospheric_transfer(S, atmo: AtmosphereSpec):
    S = np.asarray(S, dtype=np.float64)
    out = atmo.gamma * S + (1.0 - atmo.gamma) * np.asarray(atmo.Lambda, dtype=np.float64)
    return out if np.ndim(out) else float(out)


def band_planck_grid(T, grid: WavelengthGrid) -> np.ndarray:
    """Band-integrated exitance of every temperature in ``T`` for every grid band."""
    edges = grid.band_edges()
    t = np.asarray(T, dtype=np.float64)
    flat = t.ravel()
    out = np.stack([band_planck(lo, hi, flat) for lo, hi in zip(edges[:-1], edges[1:])], axis=-1)
    return out.reshape(*t.shape, grid.count)


def tex_synthesize(scene: SceneTeX, grid: WavelengthGrid | None = None,
                   radiance_scale: float = DEFAULT_RADIANCE_SCALE) -> SpectralCube:
    """Cube ``e * scale * B_band(T) + (1 - e) * X`` with e constant across bands."""
    grid = grid if grid is not None else scene.grid
    if grid is None:
        raise ValueError("a wavelength grid is required")
    if scene.texture.shape[2] != grid.count:
        raise ValueError(f"texture has {scene.texture.shape[2]} bands, grid has {grid.count}")
    b = radiance_scale * band_planck_grid(scene.temperature, grid)
    e = scene.emissivity[..., None]
    return SpectralCube(e * b + (1.0 - e) * scene.texture, grid)


def invert_temperature(radiance, e, band, rtol: float = 1e-9, t_min: float = 1.0, t_max: float = 1e5):
    """Temperature whose direct emission at emissivity ``e`` equals ``radiance``.

    Bisection in log-temperature; the band integral is strictly increasing in T.
    """
    if not (radiance > 0):
        raise ValueError("radiance must be > 0")
    if not (0 < e <= 1):
        raise ValueError("emissivity must lie in (0, 1]")
    target = radiance / e
    lo_val = band_planck(band[0], band[1], t_min)
    hi_val = band_planck(band[0], band[1], t_max)
    if target < lo_val or target > hi_val:
        raise BracketError(
            f"radiance {radiance:.6g} outside bracket [{e * lo_val:.6g}, {e * hi_val:.6g}] "
            f"for T in [{t_min}, {t_max}] K"
        )
    lo, hi = np.log(t_min), np.log(t_max)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = band_planck(band[0], band[1], np.exp(mid))
        if abs(val - target) <= rtol * target:
            return float(np.exp(mid))
        if val < target:
            lo = mid
        else:
            hi = mid
    return float(np.exp(0.5 * (lo + hi)))


# -- differentiable synthesis head ------------------------------------------


def _band_quadrature(grid: WavelengthGrid, n_nodes: int):
    """Gauss-Legendre nodes (m) and weights (m) for every band, shape (C, n)."""
    x, w = _gl_nodes(n_nodes)
    edges = grid.band_edges() * 1e-9
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    return 0.5 * (lo + hi) + half * x[None, :], half * w[None, :]


def planck_band_torch(T, grid: WavelengthGrid, n_nodes: int = 16, const: PhysicalConstants = CONSTANTS):
    """Band-integrated exitance for a torch tensor of temperatures, shape ``T.shape + (C,)``.

    ``1/(exp(x)-1)`` is evaluated as ``exp(-x)/(1-exp(-x))`` so very cold pixels
    give 0 with finite gradients instead of inf * 0.
    """
    import torch

    nodes, weights = _band_quadrature(grid, n_nodes)
    lam = torch.as_tensor(nodes, dtype=T.dtype, device=T.device)
    wts = torch.as_tensor(weights, dtype=T.dtype, device=T.device)
    x = const.c2 / (lam * T[..., None, None])
    ex = torch.exp(-x)
    vals = const.c1 / lam**5 * ex / (-torch.expm1(-x))
    return (vals * wts).sum(-1)


def tex_synthesize_torch(T, e, X, grid: WavelengthGrid, radiance_scale: float = DEFAULT_RADIANCE_SCALE,
                         n_nodes: int = 16):
    """Differentiable counterpart of :func:`tex_synthesize` on ``(..., H, W)`` maps and ``(..., H, W, C)`` texture."""
    b = radiance_scale * planck_band_torch(T, grid, n_nodes)
    e = e[..., None]
    return e * b + (1.0 - e) * X
