"""Diagonal state-space scan: ZOH discretisation, sequential and parallel scans, backward pass.

Conventions: time is axis 0. For ``D`` channels and ``N`` state dims per
channel, ``Abar``/``Bbar`` are ``(L, ..., D, N)``, ``x`` is ``(L, ..., D)``,
``C`` broadcasts against ``(L, ..., D, N)`` and the skip ``D`` against
``(..., D)``. The recurrence is

    h_t = Abar_t * h_{t-1} + Bbar_t * x_t
    y_t = sum_n C_t * h_t + D * x_t

The scan kernels are written against the common numpy / torch array surface,
so :class:`SelectiveScanFn` reuses them for autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "SsmParams",
    "DiscreteParams",
    "discretize_zoh",
    "scan_sequential",
    "scan_parallel",
    "scan_backward",
    "affine_scan",
    "SelectiveScanFn",
    "selective_scan",
]


@dataclass(frozen=True, eq=False)
class SsmParams:
    """Continuous parameters. ``A`` is ``(D, N)`` and negative; ``delta`` is ``(L, D)`` or ``(D,)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.A) >= 0):
            raise ValueError("A entries must be < 0")
        if np.any(np.asarray(self.delta) <= 0):
            raise ValueError("Delta must be > 0")


@dataclass(frozen=True, eq=False)
class DiscreteParams:
    Abar: np.ndarray
    Bbar: np.ndarray


def discretize_zoh(params: SsmParams) -> DiscreteParams:
    """Zero-order hold: ``Abar = exp(dA)``, ``Bbar = expm1(dA) / A * B`` with ``dA = delta * A``.

    The expm1 form is the diagonal reduction of ``(dA)^-1 (exp(dA) - I) dB``
    without the cancellation at small ``dA``.
    """
    delta = np.asarray(params.delta, dtype=np.float64)
    A = np.asarray(params.A, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("Delta must be > 0")
    if np.any(A == 0):
        raise ValueError("A must be nonzero")
    dA = delta[..., None] * A
    Abar = np.exp(dA)
    Bbar = np.expm1(dA) / A * np.asarray(params.B, dtype=np.float64)
    return DiscreteParams(Abar, Bbar)


def _is_numpy(a) -> bool:
    return isinstance(a, np.ndarray)


def _copy(a):
    return a.copy() if _is_numpy(a) else a.clone()


def _cat(parts):
    if _is_numpy(parts[0]):
        return np.concatenate(parts, axis=0)
    return torch.cat(parts, dim=0)


def _check(Abar, Bbar, x):
    if Abar.shape != Bbar.shape:
        raise ValueError(f"Abar shape {tuple(Abar.shape)} != Bbar shape {tuple(Bbar.shape)}")
    if tuple(x.shape) != tuple(Abar.shape[:-1]):
        raise ValueError(f"x shape {tuple(x.shape)} does not match parameters {tuple(Abar.shape)}")


def _unbroadcast(g, shape):
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(ax, keepdims=True) if _is_numpy(g) else g.sum(ax, keepdim=True)
    return g


def affine_scan(a, b):
    """Inclusive scan of affine maps ``h -> a_t h + b_t`` from ``h = 0``.

    Work-efficient Blelloch up-sweep / down-sweep over axis 0: O(L) work,
    O(log L) depth. The length is padded to a power of two with identity maps.
    """
    L = a.shape[0]
    P = 1
    while P < L:
        P *= 2
    A, B = _copy(a), _copy(b)
    if P > L:
        pad_shape = (P - L, *a.shape[1:])
        if _is_numpy(a):
            A = np.concatenate([A, np.ones(pad_shape, dtype=a.dtype)])
            B = np.concatenate([B, np.zeros(pad_shape, dtype=b.dtype)])
        else:
            A = _cat([A, a.new_ones(pad_shape)])
            B = _cat([B, b.new_zeros(pad_shape)])
    # up-sweep: right node <- right o left
    s = 1
    while s < P:
        lft, rgt = slice(s - 1, None, 2 * s), slice(2 * s - 1, None, 2 * s)
        B[rgt] = A[rgt] * B[lft] + B[rgt]
        A[rgt] = A[rgt] * A[lft]
        s *= 2
    # down-sweep for the exclusive prefix (identity at the root)
    A[P - 1] = 1
    B[P - 1] = 0
    s = P // 2
    while s >= 1:
        lft, rgt = slice(s - 1, None, 2 * s), slice(2 * s - 1, None, 2 * s)
        la, lb = _copy(A[lft]), _copy(B[lft])
        pa, pb = _copy(A[rgt]), _copy(B[rgt])
        A[lft], B[lft] = pa, pb
        A[rgt] = la * pa
        B[rgt] = la * pb + lb
        s //= 2
    # exclusive prefix evaluated at 0 is B; apply element t for the inclusive state
    return a * B[:L] + b


def _inputs(Abar, Bbar, x, h0):
    b = Bbar * x[..., None]
    if h0 is not None:
        b = _copy(b)
        b[0] = b[0] + Abar[0] * h0
    return b


def scan_sequential(disc: DiscreteParams, C, D, x, h0=None, return_states: bool = False):
    """Left-to-right evaluation of the recurrence, O(L * N) per channel."""
    Abar, Bbar = disc.Abar, disc.Bbar
    x = np.asarray(x)
    _check(Abar, Bbar, x)
    L = x.shape[0]
    h = np.zeros(Abar.shape[1:], dtype=np.result_type(Abar, Bbar, x)) if h0 is None else np.array(h0, dtype=np.float64)
    states = np.empty(Abar.shape, dtype=h.dtype)
    u = Bbar * x[..., None]
    for t in range(L):
        h = Abar[t] * h + u[t]
        states[t] = h
    y = (np.broadcast_to(C, states.shape) * states).sum(-1) + D * x
    return (y, states) if return_states else y


def scan_parallel(disc: DiscreteParams, C, D, x, h0=None, return_states: bool = False):
    """Same result as :func:`scan_sequential` via :func:`affine_scan`."""
    Abar, Bbar = disc.Abar, disc.Bbar
    _check(Abar, Bbar, x)
    states = affine_scan(Abar, _inputs(Abar, Bbar, x, h0))
    y = (C * states).sum(-1) + D * x
    return (y, states) if return_states else y


def scan_backward(disc: DiscreteParams, C, D, x, h0, dy, states=None):
    """Reverse-mode cotangents of ``y`` w.r.t. ``x, C, D, Abar, Bbar, h0``.

    With ``g_t = dL/dh_t`` the adjoint recurrence runs right to left:
    ``g_t = C_t * dy_t + Abar_{t+1} * g_{t+1}``; it is evaluated with the same
    parallel affine scan on the reversed sequence.
    """
    Abar, Bbar = disc.Abar, disc.Bbar
    _check(Abar, Bbar, x)
    if tuple(dy.shape) != tuple(x.shape):
        raise ValueError(f"dy shape {tuple(dy.shape)} != output shape {tuple(x.shape)}")
    if states is None:
        states = affine_scan(Abar, _inputs(Abar, Bbar, x, h0))
    src = C * dy[..., None]
    if _is_numpy(src):
        src = np.broadcast_to(src, Abar.shape)
        coef = np.concatenate([Abar[1:], np.zeros_like(Abar[:1])])
    else:
        src = src.expand(Abar.shape)
        coef = _cat([Abar[1:], Abar[:1] * 0])
    g = affine_scan(coef.flip(0) if not _is_numpy(coef) else coef[::-1].copy(),
                    src.flip(0) if not _is_numpy(src) else src[::-1].copy())
    g = g.flip(0) if not _is_numpy(g) else g[::-1]

    if h0 is None:
        prev = _cat([states[:1] * 0, states[:-1]])
    else:
        prev = _cat([(states[:1] * 0 + h0), states[:-1]])
    grads = {
        "x": (g * Bbar).sum(-1) + D * dy,
        "C": _unbroadcast(dy[..., None] * states, np.shape(C) if _is_numpy(C) else C.shape),
        "D": _unbroadcast(dy * x, np.shape(D) if _is_numpy(D) else D.shape),
        "Abar": g * prev,
        "Bbar": g * x[..., None],
        "h0": Abar[0] * g[0],
    }
    return grads


# -- torch autograd ----------------------------------------------------------

class SelectiveScanFn(torch.autograd.Function):
    """``y = scan(Abar, Bbar, C, D, x)`` with the hand-written backward pass."""

    @staticmethod
    def forward(ctx, Abar, Bbar, C, D, x):
        disc = DiscreteParams(Abar, Bbar)
        y, states = scan_parallel(disc, C, D, x, return_states=True)
        ctx.save_for_backward(Abar, Bbar, C, D, x, states)
        return y

    @staticmethod
    def backward(ctx, dy):
        Abar, Bbar, C, D, x, states = ctx.saved_tensors
        g = scan_backward(DiscreteParams(Abar, Bbar), C, D, x, None, dy.contiguous(), states=states)
        return g["Abar"], g["Bbar"], g["C"], g["D"], g["x"]


def selective_scan(Abar, Bbar, C, D, x):
    return SelectiveScanFn.apply(Abar, Bbar, C, D, x)
