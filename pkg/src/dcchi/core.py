"""Core hyperspectral containers, seeded randomness and file I/O.

Radiance values are in arbitrary but consistent radiometric units. Cubes are
stored as float32 in memory and on disk; wavelengths are float64 nanometres.

All pseudo-random draws go through :func:`make_rng`, a numpy ``Generator``
backed by Philox-4x64, a counter-based 64-bit generator whose stream is
identical across platforms for a given seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "WavelengthGrid",
    "SpectralCube",
    "PanImage",
    "CodedAperture",
    "SceneTeX",
    "make_rng",
    "make_random_mask",
    "save_cube",
    "load_cube",
    "save_pan",
    "load_pan",
]

HSC1_MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIII")
PGM_MAXVAL = 65535


class FormatError(ValueError):
    """Malformed file contents. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class WavelengthGrid:
    """Strictly increasing band-centre wavelengths in nm."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValueError("wavelength grid is empty")
        _require_finite(v, "wavelength grid")
        if np.any(v <= 0):
            raise ValueError("wavelengths must be positive")
        if np.any(np.diff(v) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def count(self) -> int:
        return int(self.values.size)

    def band_edges(self) -> np.ndarray:
        """Return ``count + 1`` band edges.

        Interior edges are midpoints of neighbouring centres; the outer edges are
        mirrored so the first and last bands are symmetric about their centres.
        A single-band grid gets a 1 nm wide band.
        """
        v = self.values
        if v.size == 1:
            return np.array([v[0] - 0.5, v[0] + 0.5])
        mid = 0.5 * (v[1:] + v[:-1])
        lo = v[0] - (mid[0] - v[0])
        hi = v[-1] + (v[-1] - mid[-1])
        return np.concatenate([[lo], mid, [hi]])

    def __eq__(self, other):
        return isinstance(other, WavelengthGrid) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    @classmethod
    def linspace(cls, start: float, stop: float, count: int) -> "WavelengthGrid":
        return cls(np.linspace(start, stop, count))


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """H x W x C radiance cube; band ``k`` sits at ``grid.values[k]``."""

    data: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise ValueError(f"cube data must be 3-D (H, W, C), got shape {d.shape}")
        _require_finite(d, "cube data")
        if d.shape[2] != self.grid.count:
            raise ValueError(f"cube has {d.shape[2]} bands but grid has {self.grid.count}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class PanImage:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"PAN image must be 2-D, got shape {d.shape}")
        _require_finite(d, "PAN image")
        if np.any(d < 0):
            raise ValueError("PAN image values must be >= 0")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class CodedAperture:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float32)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {m.shape}")
        _require_finite(m, "mask")
        if np.any((m < 0) | (m > 1)):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "mask", _frozen(m))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape  # type: ignore[return-value]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.mask == 0) | (self.mask == 1)))


@dataclass(frozen=True, eq=False)
class SceneTeX:
    """Per-pixel temperature (K), wavelength-constant emissivity and texture cube."""

    temperature: np.ndarray
    emissivity: np.ndarray
    texture: np.ndarray
    grid: WavelengthGrid = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        t = np.asarray(self.temperature, dtype=np.float64)
        e = np.asarray(self.emissivity, dtype=np.float64)
        x = np.asarray(self.texture, dtype=np.float64)
        for arr, name in ((t, "temperature"), (e, "emissivity"), (x, "texture")):
            _require_finite(arr, name)
        if t.ndim != 2 or e.shape != t.shape:
            raise ValueError("temperature and emissivity must be matching H x W maps")
        if x.ndim != 3 or x.shape[:2] != t.shape:
            raise ValueError("texture must be H x W x C with the same H, W as the maps")
        if np.any(t <= 0):
            raise ValueError("temperature must be > 0 K")
        if np.any((e < 0) | (e > 1)):
            raise ValueError("emissivity must lie in [0, 1]")
        if self.grid is not None and self.grid.count != x.shape[2]:
            raise ValueError("texture band count does not match the grid")
        object.__setattr__(self, "temperature", _frozen(t))
        object.__setattr__(self, "emissivity", _frozen(e))
        object.__setattr__(self, "texture", _frozen(x))


def make_random_mask(height: int, width: int, p: float, seed: int) -> CodedAperture:
    """Binary mask with i.i.d. Bernoulli(p) cells drawn from ``make_rng(seed)``."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"transmittance p must lie in (0, 1), got {p}")
    if height <= 0 or width <= 0:
        raise ValueError("mask dimensions must be positive")
    u = make_rng(seed).random((height, width))
    return CodedAperture((u < p).astype(np.float32))


# -- HSC1 cube files ---------------------------------------------------------


def save_cube(cube: SpectralCube, path) -> None:
    h, w, c = cube.shape
    payload = b"".join(
        [
            _HEADER.pack(HSC1_MAGIC, h, w, c),
            cube.grid.values.astype("<f8").tobytes(),
            # band-major: band slowest, then rows, then columns
            np.ascontiguousarray(cube.data.transpose(2, 0, 1)).astype("<f4").tobytes(),
        ]
    )
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write cube to {path}: {exc}") from exc


def load_cube(path) -> SpectralCube:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != HSC1_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if c == 0:
        raise FormatError("zero bands", 12)
    off = _HEADER.size
    need = off + 8 * c + 4 * h * w * c
    if len(raw) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after payload", need)
    wl = np.frombuffer(raw, dtype="<f8", count=c, offset=off).astype(np.float64)
    bad = np.nonzero(~(np.diff(wl) > 0))[0]
    if bad.size:
        raise FormatError("wavelength grid not strictly increasing", off + 8 * (int(bad[0]) + 1))
    if not np.all(np.isfinite(wl)) or np.any(wl <= 0):
        raise FormatError("invalid wavelength values", off)
    off += 8 * c
    data = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=off)
    if not np.all(np.isfinite(data)):
        raise FormatError("non-finite radiance sample", off + 4 * int(np.argmin(np.isfinite(data))))
    data = data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float32)
    return SpectralCube(data, WavelengthGrid(wl))


# -- PAN images: 16-bit binary PGM plus "scale=" sidecar --------------------


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".scale")


def save_pan(image: PanImage, path) -> None:
    """Write ``image`` as P5 PGM (maxval 65535, big-endian) plus ``<path>.scale``.

    Pixel ``v`` is stored as ``round(v / scale * 65535)`` with ``scale`` the image
    maximum, so decoding is accurate to ``scale / 65535``.
    """
    d = image.data.astype(np.float64)
    peak = float(d.max()) if d.size else 0.0
    scale = peak if peak > 0 else 1.0
    q = np.rint(d / scale * PGM_MAXVAL).astype(">u2")
    h, w = d.shape
    header = f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    try:
        Path(path).write_bytes(header + q.tobytes())
        _sidecar(path).write_text(f"scale={scale!r}\n")
    except OSError as exc:
        raise OSError(f"cannot write PAN image to {path}: {exc}") from exc


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header", start)
        tokens.append(int(raw[start:pos]))
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise FormatError("malformed PGM header", pos)
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Raw integer samples of a binary PGM file."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {raw[:2]!r})", 0)
    (w, h, maxval), pos = _pgm_tokens(raw, 3)
    if not (0 < maxval <= 65535):
        raise FormatError(f"bad maxval {maxval}", pos)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = pos + w * h * dtype.itemsize
    if len(raw) < need:
        raise FormatError("truncated PGM payload", len(raw))
    return np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def load_pan(path) -> PanImage:
    ints = read_pgm(path)
    side = _sidecar(path)
    scale = 1.0
    if side.exists():
        text = side.read_text().strip()
        if not text.startswith("scale="):
            raise FormatError(f"bad sidecar {side}", 0)
        scale = float(text.split("=", 1)[1])
    return PanImage((ints.astype(np.float64) * (scale / PGM_MAXVAL)).astype(np.float32))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))
