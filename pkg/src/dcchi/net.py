"""Toy physics-informed reconstruction network and its losses.

Pipeline: shift-back lift of the CASSI measurement concatenated with the PAN
image -> embedding -> U-net of CSMBs fed with multi-scale PAN features ->
temperature / emissivity / texture heads -> differentiable TeX synthesis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import CodedAperture, SpectralCube, WavelengthGrid
from .csmb import CSMB, build_scan_order
from .forward import DispersionSpec, MeasurementPair, cassi_adjoint_op, cassi_op, pan_op
from .tex import DEFAULT_RADIANCE_SCALE, tex_synthesize_torch

__all__ = [
    "NetworkConfig",
    "TexPrediction",
    "PanEncoder",
    "PCMambaToy",
    "pan_encode",
    "loss_rec",
    "loss_measure",
    "loss_rec_torch",
    "loss_measure_torch",
    "reconstruct",
]

# softplus(0) maps to this temperature
T_INIT = 300.0


@dataclass
class NetworkConfig:
    height: int = 32
    width: int = 32
    bands: int = 8
    wl_min: float = 8000.0
    wl_max: float = 11500.0
    channels: int = 16
    depth: int = 2
    blocks_per_scale: int = 1
    state_size: int = 16
    bfr: float = 0.7
    scan_seed: int | None = None
    tex_head: bool = True
    radiance_scale: float = DEFAULT_RADIANCE_SCALE
    lr: float = 4e-4
    lr_min: float = 1e-6
    batch_size: int = 1
    iterations: int = 2000
    seed: int = 0
    use_loss_rec: bool = True
    use_loss_m: bool = True
    mask_p: float = 0.5
    mask_seed: int = 0
    disp_step: int = 1
    noise_sigma: float = 0.0
    noise_seed: int = 0
    eval_every: int = 10
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errs = []
        if self.depth < 1:
            errs.append("depth must be >= 1")
        if self.channels < 4:
            errs.append("channels must be >= 4")
        if not (0.0 < self.bfr < 1.0):
            errs.append("bfr must lie in (0, 1)")
        if self.bands < 1:
            errs.append("bands must be >= 1")
        stride = 2 ** (self.depth - 1)
        if self.height % stride or self.width % stride:
            errs.append(f"height and width must be divisible by 2^(depth-1) = {stride}")
        if self.lr < 0 or self.lr_min < 0:
            errs.append("learning rates must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.iterations < 0:
            errs.append("iterations must be >= 0")
        if not (0.0 < self.mask_p < 1.0):
            errs.append("mask_p must lie in (0, 1)")
        if self.disp_step < 0:
            errs.append("disp_step must be >= 0")
        if self.noise_sigma < 0:
            errs.append("noise_sigma must be >= 0")
        if self.eval_every < 1:
            errs.append("eval_every must be >= 1")
        return errs

    @property
    def grid(self) -> WavelengthGrid:
        return WavelengthGrid.linspace(self.wl_min, self.wl_max, self.bands)

    def scale_channels(self, k: int) -> int:
        """Feature channels at scale ``k`` (1-based)."""
        return self.channels * 2 ** (k - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)} - {"extra"}


class TexPrediction(NamedTuple):
    temperature: torch.Tensor
    emissivity: torch.Tensor
    texture: torch.Tensor


def _head(cin: int, cout: int, mid: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, mid, 3, padding=1), nn.SiLU(), nn.Conv2d(mid, cout, 1))


class PanEncoder(nn.Module):
    """Shallow encoder: one feature map per U-net scale, stride ``2^(k-1)``."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.depth = config.depth
        layers = [nn.Sequential(nn.Conv2d(1, config.channels, 3, padding=1), nn.SiLU())]
        for k in range(2, config.depth + 1):
            layers.append(
                nn.Sequential(
                    nn.Conv2d(config.scale_channels(k - 1), config.scale_channels(k), 3, stride=2, padding=1), nn.SiLU()
                )
            )
        self.layers = nn.ModuleList(layers)

    def forward(self, pan):
        """``pan`` is ``(B, H, W)``; returns a list of ``(B, C_k, H_k, W_k)`` maps."""
        stride = 2 ** (self.depth - 1)
        if pan.shape[-2] % stride or pan.shape[-1] % stride:
            raise ValueError(f"PAN size {tuple(pan.shape[-2:])} not divisible by {stride}")
        f = pan[:, None]
        out = []
        for layer in self.layers:
            f = layer(f)
            out.append(f)
        return out


def pan_encode(pan, encoder: PanEncoder):
    """Multi-scale PAN features for an ``(H, W)`` or ``(B, H, W)`` tensor."""
    squeeze = pan.ndim == 2
    feats = encoder(pan[None] if squeeze else pan)
    return [f[0] for f in feats] if squeeze else feats


def _cl(x):
    """(B, C, H, W) -> (B, H, W, C)."""
    return x.permute(0, 2, 3, 1)


def _cf(x):
    return x.permute(0, 3, 1, 2)


class PCMambaToy(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        cfg = config
        M = cfg.depth
        self.grid = cfg.grid
        self.encoder = PanEncoder(cfg)
        self.embed = nn.Conv2d(cfg.bands + 1, cfg.channels, 3, padding=1)
        self.orders = [
            build_scan_order(cfg.height // 2 ** (k - 1), cfg.width // 2 ** (k - 1), cfg.bfr, cfg.scan_seed)
            for k in range(1, M + 1)
        ]

        def blocks(k):
            return nn.ModuleList(CSMB(cfg.scale_channels(k), cfg.state_size) for _ in range(cfg.blocks_per_scale))

        self.enc_blocks = nn.ModuleList(blocks(k) for k in range(1, M))
        self.downs = nn.ModuleList(
            nn.Conv2d(cfg.scale_channels(k), cfg.scale_channels(k + 1), 4, stride=2, padding=1) for k in range(1, M)
        )
        self.mid_blocks = blocks(M)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(cfg.scale_channels(k + 1), cfg.scale_channels(k), 2, stride=2) for k in range(1, M)
        )
        self.fuses = nn.ModuleList(nn.Conv2d(2 * cfg.scale_channels(k), cfg.scale_channels(k), 1) for k in range(1, M))
        self.dec_blocks = nn.ModuleList(blocks(k) for k in range(1, M))

        c = cfg.channels
        if cfg.tex_head:
            self.t_head = _head(2 * c, 1, c)
            self.e_head = _head(c, 1, c)
            self.x_head = _head(2 * c, cfg.bands, c)
        else:
            self.direct_head = _head(2 * c, cfg.bands, c)

    @staticmethod
    def _run(blocks, f, p, order):
        fb, fp = _cl(f), _cl(p)
        for blk in blocks:
            fb = blk(fb, fp, order)
        return _cf(fb)

    def features(self, y_cassi, y_pan, mask):
        cfg = self.config
        x0 = cassi_adjoint_op(y_cassi, mask, cfg.disp_step, cfg.bands)
        inp = torch.cat([x0, y_pan[..., None]], dim=-1)
        f = self.embed(_cf(inp))
        pans = self.encoder(y_pan)
        skips = []
        for k in range(cfg.depth - 1):
            f = self._run(self.enc_blocks[k], f, pans[k], self.orders[k])
            skips.append(f)
            f = self.downs[k](f)
        f = self._run(self.mid_blocks, f, pans[-1], self.orders[-1])
        for k in reversed(range(cfg.depth - 1)):
            f = self.fuses[k](torch.cat([self.ups[k](f), skips[k]], dim=1))
            f = self._run(self.dec_blocks[k], f, pans[k], self.orders[k])
        return f, pans[0]

    def forward(self, y_cassi, y_pan, mask):
        """Batched ``(B, H, W')`` CASSI and ``(B, H, W)`` PAN -> (TexPrediction | None, cube ``(B, H, W, C)``)."""
        cfg = self.config
        f, p = self.features(y_cassi, y_pan, mask)
        fp = torch.cat([f, p], dim=1)
        if not cfg.tex_head:
            return None, _cl(F.softplus(self.direct_head(fp)))
        T = (T_INIT / math.log(2.0)) * F.softplus(self.t_head(fp)[:, 0])
        e = torch.sigmoid(self.e_head(f)[:, 0])
        X = _cl(F.softplus(self.x_head(fp)))
        cube = tex_synthesize_torch(T, e, X, self.grid, cfg.radiance_scale)
        return TexPrediction(T, e, X), cube


# -- losses ------------------------------------------------------------------


def loss_rec_torch(pred, truth):
    """Mean absolute error over all cube entries."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return (pred - truth).abs().mean()


def loss_measure_torch(pred, mask, step: int, response, y_cassi, y_pan):
    """Squared L1 re-measurement residual over both branches.

    The L1 norm is normalised by the number of measurement samples (CASSI plus
    PAN) before squaring, matching the per-element scaling of the
    reconstruction loss.
    """
    rc = cassi_op(pred, mask, step) - y_cassi
    rp = pan_op(pred, response) - y_pan
    n = rc.numel() + rp.numel()
    l1 = (rc.abs().sum() + rp.abs().sum()) / n
    return l1 * l1


def loss_rec(pred: SpectralCube, truth: SpectralCube) -> float:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred.data.astype(np.float64) - truth.data.astype(np.float64))))


def loss_measure(pred: SpectralCube, mask: CodedAperture, disp: DispersionSpec, response,
                 measurement: MeasurementPair) -> float:
    if (
        disp != measurement.disp
        or not np.array_equal(mask.mask, measurement.mask.mask)
        or not np.array_equal(np.asarray(response, dtype=np.float64), measurement.response)
    ):
        raise ValueError("operator parameters differ from those used to form the measurement")
    # same float32 kernels that formed the measurement, so a perfect prediction gives exactly 0
    rc = cassi_op(pred.data, mask.mask, disp.step).astype(np.float64) - np.asarray(measurement.y_cassi, np.float64)
    rp = pan_op(pred.data, measurement.response.astype(np.float32)).astype(np.float64) - np.asarray(
        measurement.y_pan, np.float64
    )
    l1 = (np.abs(rc).sum() + np.abs(rp).sum()) / (rc.size + rp.size)
    return float(l1 * l1)


def reconstruct(model: PCMambaToy, measurement: MeasurementPair):
    """Run ``model`` on one measurement; returns (TexPrediction | None, SpectralCube)."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        tex, cube = model(
            torch.as_tensor(np.asarray(measurement.y_cassi), dtype=dtype)[None],
            torch.as_tensor(np.asarray(measurement.y_pan), dtype=dtype)[None],
            torch.as_tensor(measurement.mask.mask.copy(), dtype=dtype),
        )
    if tex is not None:
        tex = TexPrediction(*(t[0] for t in tex))
    return tex, SpectralCube(cube[0].double().numpy(), model.grid)
