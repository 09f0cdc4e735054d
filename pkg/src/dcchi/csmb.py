"""Cross-modal scanning block over interleaved backbone / PAN tokens.

Every spatial position contributes exactly one token, taken either from the
backbone feature map or from the PAN feature map, so the scanned sequence has
length ``H * W`` rather than ``2 * H * W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PanImage, make_rng, round_half_up, save_pan
from .ssm import selective_scan

__all__ = [
    "BACKBONE",
    "PAN",
    "ScanOrder",
    "bayer_matrix",
    "build_scan_order",
    "save_scan_order",
    "CSMB",
    "csmb_forward",
]

BACKBONE = 0
PAN = 1


def bayer_matrix(n: int) -> np.ndarray:
    """Ordered-dither threshold matrix of size ``n`` (a power of two), values ``0 .. n*n-1``."""
    if n < 1 or n & (n - 1):
        raise ValueError("Bayer matrix size must be a power of two")
    m = np.zeros((1, 1), dtype=np.int64)
    while m.shape[0] < n:
        m = np.block([[4 * m, 4 * m + 2], [4 * m + 3, 4 * m + 1]])
    return m


@dataclass(frozen=True, eq=False)
class ScanOrder:
    """Token sequence: ``index[t]`` is the raster position scanned at step ``t``,
    ``source[t]`` is ``BACKBONE`` or ``PAN``."""

    index: np.ndarray
    source: np.ndarray
    height: int
    width: int
    bfr: float

    def __post_init__(self):
        n = self.height * self.width
        if self.index.shape != (n,) or self.source.shape != (n,):
            raise ValueError("scan order must contain exactly H*W tokens")
        if not np.array_equal(np.sort(self.index), np.arange(n)):
            raise ValueError("each spatial position must appear exactly once")
        for a in (self.index, self.source):
            a.setflags(write=False)

    def __len__(self) -> int:
        return int(self.index.size)

    @property
    def tokens(self) -> list[tuple[str, int]]:
        names = ("backbone", "pan")
        return [(names[s], int(i)) for s, i in zip(self.source, self.index)]

    @property
    def backbone_count(self) -> int:
        return int(np.sum(self.source == BACKBONE))

    def source_map(self) -> np.ndarray:
        """H x W array with the source of the token at each position."""
        out = np.empty(self.height * self.width, dtype=np.int64)
        out[self.index] = self.source
        return out.reshape(self.height, self.width)

    def permuted(self, perm) -> "ScanOrder":
        perm = np.asarray(perm)
        return ScanOrder(self.index[perm].copy(), self.source[perm].copy(), self.height, self.width, self.bfr)


def build_scan_order(height: int, width: int, bfr: float, seed: int | None = None) -> ScanOrder:
    """Raster-order token sequence with ``round(bfr * H * W)`` backbone tokens.

    Without a seed, positions are ranked by a Bayer dither matrix (ties broken
    in raster order) and the lowest-ranked ones are taken from the backbone; at
    ``bfr = 0.5`` this is a checkerboard. With a seed, the backbone positions
    are a uniformly random subset drawn from ``make_rng(seed)``.
    """
    if not (0.0 < bfr < 1.0):
        raise ValueError(f"bfr must lie in (0, 1), got {bfr}")
    if height <= 0 or width <= 0:
        raise ValueError("scan order dimensions must be positive")
    n = height * width
    k = round_half_up(bfr * n)
    if seed is None:
        size = 1
        while size < max(height, width):
            size *= 2
        rank = bayer_matrix(size)[:height, :width].ravel()
        chosen = np.lexsort((np.arange(n), rank))[:k]
    else:
        chosen = make_rng(seed).permutation(n)[:k]
    source = np.full(n, PAN, dtype=np.int64)
    source[chosen] = BACKBONE
    return ScanOrder(np.arange(n, dtype=np.int64), source, height, width, float(bfr))


def save_scan_order(order: ScanOrder, path) -> None:
    """Write the order as a PGM mask: backbone positions white, PAN black."""
    save_pan(PanImage((order.source_map() == BACKBONE).astype(np.float32)), path)


class CSMB(nn.Module):
    """Gated selective-scan block on an interleaved backbone / PAN token sequence.

    ``out = CS(LN(fb), LN(fp)) * SiLU(LN(fb)) + fb`` where ``CS`` gathers the
    tokens named by the scan order and runs DWConv -> SiLU -> SSM -> LN on the
    sequence, scattering results back to their positions. Both modalities go
    through the same LayerNorm so identical inputs give identical tokens.
    Inputs and output are channel-last ``(B, H, W, D)``.
    """

    def __init__(self, channels: int, state_size: int = 16):
        super().__init__()
        self.channels = channels
        self.state_size = state_size
        self.norm = nn.LayerNorm(channels)
        self.dwconv = nn.Conv1d(channels, channels, 3, padding=1, groups=channels)
        self.dt_proj = nn.Linear(channels, channels)
        self.B_proj = nn.Linear(channels, state_size, bias=False)
        self.C_proj = nn.Linear(channels, state_size, bias=False)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_size + 1, dtype=torch.float32)).repeat(channels, 1))
        self.D = nn.Parameter(torch.ones(channels))
        self.out_norm = nn.LayerNorm(channels)
        with torch.no_grad():
            # softplus(bias) spreads the initial step sizes over [1e-3, 1e-1]
            dt = torch.exp(torch.linspace(np.log(1e-3), np.log(1e-1), channels))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
            self.dt_proj.weight.mul_(0.1)

    def scan(self, seq):
        """SSM over a ``(B, L, D)`` sequence."""
        delta = F.softplus(self.dt_proj(seq))
        A = -torch.exp(self.A_log)
        dA = delta[..., None] * A
        Abar = torch.exp(dA)
        Bbar = torch.expm1(dA) / A * self.B_proj(seq)[:, :, None, :]
        C = self.C_proj(seq)[:, :, None, :]
        y = selective_scan(
            Abar.permute(1, 0, 2, 3), Bbar.permute(1, 0, 2, 3), C.permute(1, 0, 2, 3), self.D, seq.permute(1, 0, 2)
        )
        return y.permute(1, 0, 2)

    def cross_scan(self, zb, zp, order: ScanOrder):
        b, h, w, d = zb.shape
        idx = torch.as_tensor(order.index.copy(), device=zb.device)
        from_b = torch.as_tensor(order.source == BACKBONE, device=zb.device)[:, None]
        seq = torch.where(from_b, zb.reshape(b, h * w, d)[:, idx], zp.reshape(b, h * w, d)[:, idx])
        u = F.silu(self.dwconv(seq.transpose(1, 2))).transpose(1, 2)
        y = self.out_norm(self.scan(u))
        inv = torch.as_tensor(np.argsort(order.index), device=zb.device)
        return y[:, inv].reshape(b, h, w, d)

    def forward(self, feat_b, feat_p, order: ScanOrder):
        if feat_b.shape != feat_p.shape:
            raise ValueError(f"backbone {tuple(feat_b.shape)} and PAN {tuple(feat_p.shape)} features differ in shape")
        if feat_b.shape[1:3] != (order.height, order.width):
            raise ValueError("scan order does not match the feature map size")
        zb = self.norm(feat_b)
        zp = self.norm(feat_p)
        return self.cross_scan(zb, zp, order) * F.silu(zb) + feat_b


def csmb_forward(feat_b, feat_p, order: ScanOrder, block: CSMB):
    """Functional form: apply ``block`` to ``(H, W, D)`` or ``(B, H, W, D)`` features."""
    squeeze = feat_b.ndim == 3
    if squeeze:
        feat_b, feat_p = feat_b[None], feat_p[None]
    out = block(feat_b, feat_p, order)
    return out[0] if squeeze else out
