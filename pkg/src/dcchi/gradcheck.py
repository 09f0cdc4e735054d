"""Central finite-difference gradient checks.

The relative error of a gradient is ``max|g_fd - g| / max(max|g_fd|, floor)``,
measured over the whole tensor, so isolated near-zero entries do not dominate.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "fd_grad",
    "relative_error",
    "check_module_gradients",
    "check_function_gradients",
    "check_weight_subset",
]


def relative_error(approx, exact, floor: float = 1e-12) -> float:
    a = np.asarray(approx, dtype=np.float64)
    e = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(a - e)) / max(np.max(np.abs(a)), floor)) if a.size else 0.0


def fd_grad(f, x: np.ndarray, eps: float = 1e-4, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (numpy, float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    idx = np.ndindex(x.shape) if indices is None else indices
    for i in idx:
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def _subset(n: int, max_entries: int | None, rng):
    if max_entries is None or n <= max_entries:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_entries, replace=False))


@torch.no_grad()
def _perturbed(fn, t: torch.Tensor, flat_i: int, eps: float) -> float:
    flat = t.view(-1)
    old = flat[flat_i].item()
    flat[flat_i] = old + eps
    fp = float(fn())
    flat[flat_i] = old - eps
    fm = float(fn())
    flat[flat_i] = old
    return (fp - fm) / (2 * eps)


def check_function_gradients(fn, tensors: dict, eps: float = 1e-4, max_entries: int | None = None,
                             seed: int = 0) -> dict:
    """Compare autograd gradients of scalar ``fn()`` w.r.t. float64 leaf ``tensors`` with central differences.

    ``fn`` closes over the tensors. Returns ``{name: relative error}``; with
    ``max_entries`` only a random subset of each tensor's entries is checked.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.grad = None
        t.requires_grad_(True)
    out = fn()
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    errors = {}
    for (name, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        sel = _subset(t.numel(), max_entries, rng)
        fd = np.array([_perturbed(fn, t.data, int(i), eps) for i in sel])
        errors[name] = relative_error(fd, g.reshape(-1)[sel].numpy())
    return errors


def check_module_gradients(module: torch.nn.Module, loss_fn, eps: float = 1e-4, max_entries: int | None = None,
                           seed: int = 0, names=None) -> dict:
    """Finite-difference check of every (or each named) float64 parameter of ``module``."""
    params = {n: p for n, p in module.named_parameters() if names is None or n in names}
    return check_function_gradients(loss_fn, params, eps=eps, max_entries=max_entries, seed=seed)


def check_weight_subset(module: torch.nn.Module, loss_fn, n: int = 10, eps: float = 1e-4, seed: int = 0) -> float:
    """Relative error over ``n`` weights drawn uniformly from all parameters of ``module``."""
    params = [p for p in module.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    picks = np.random.default_rng(seed).choice(sizes.sum(), size=n, replace=False)
    bounds = np.cumsum(sizes)
    out = loss_fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    fd, an = [], []
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        i = int(flat - (bounds[k - 1] if k else 0))
        fd.append(_perturbed(loss_fn, params[k].data, i, eps))
        g = grads[k]
        an.append(0.0 if g is None else g.reshape(-1)[i].item())
    return relative_error(fd, an)
