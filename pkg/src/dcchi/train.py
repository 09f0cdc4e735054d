"""Synthetic TeX scenes, training loop, checkpoints and the toy ablation harness."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .core import SceneTeX, SpectralCube, WavelengthGrid, make_random_mask, make_rng
from .forward import DispersionSpec, MeasurementPair, dcchi_measure, uniform_response
from .metrics import psnr
from .net import NetworkConfig, PCMambaToy, loss_measure_torch, loss_rec_torch
from .tex import tex_synthesize

__all__ = [
    "NumericalError",
    "Sample",
    "random_scene",
    "make_dataset",
    "cosine_lr",
    "train",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
    "sample_gradients",
    "batch_losses",
    "evaluate_psnr",
    "run_ablation",
    "ABLATION_FIELDS",
    "LOG_FIELDS",
]

LOG_FIELDS = ["iter", "lr", "L_rec", "L_m", "L_total", "psnr"]


class NumericalError(RuntimeError):
    pass


def random_scene(height: int, width: int, grid: WavelengthGrid, rng: np.random.Generator,
                 t_range=(280.0, 330.0)) -> SceneTeX:
    """Smooth temperature field, piecewise-constant emissivity, procedural texture."""
    lo, hi = t_range
    t = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 6, mode="wrap")
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    temperature = lo + (hi - lo) * t

    # Voronoi regions, one emissivity each
    n_regions = 6
    seeds = rng.random((n_regions, 2)) * [height, width]
    yy, xx = np.mgrid[:height, :width]
    owner = np.argmin((yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2, axis=-1)
    emissivity = rng.uniform(0.2, 0.95, n_regions)[owner]

    # texture: oriented gratings plus smoothed noise, modulated by a smooth spectrum per region
    u = np.zeros((height, width))
    for _ in range(3):
        k = rng.uniform(0.1, 0.6, 2) * rng.choice([-1, 1], 2)
        u += np.cos(k[0] * yy + k[1] * xx + rng.uniform(0, 2 * np.pi))
    u += 2.0 * ndimage.gaussian_filter(rng.standard_normal((height, width)), 1.5, mode="wrap")
    u = (u - u.min()) / max(u.max() - u.min(), 1e-12)
    pos = np.linspace(0.0, 1.0, grid.count)
    spectra = np.stack(
        [0.6 + 0.3 * np.sin(2 * np.pi * (rng.uniform(0.3, 1.0) * pos + rng.uniform(0, 1))) for _ in range(n_regions)]
    )
    texture = (0.2 + 0.8 * u)[..., None] * spectra[owner]
    return SceneTeX(temperature, emissivity, texture, grid)


@dataclass
class Sample:
    scene: SceneTeX
    cube: SpectralCube
    measurement: MeasurementPair


def make_dataset(config: NetworkConfig, n_scenes: int, seed: int | None = None) -> list[Sample]:
    """Scenes, their synthesised cubes and measurements under one fixed DCCHI operator."""
    rng = make_rng(config.seed if seed is None else seed)
    grid = config.grid
    mask = make_random_mask(config.height, config.width, config.mask_p, config.mask_seed)
    disp = DispersionSpec(config.disp_step)
    out = []
    for i in range(n_scenes):
        scene = random_scene(config.height, config.width, grid, rng)
        cube = tex_synthesize(scene, grid, config.radiance_scale)
        meas = dcchi_measure(cube, mask, disp, uniform_response(grid.count), config.noise_sigma,
                             config.noise_seed + i)
        out.append(Sample(scene, cube, meas))
    return out


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    """Cosine annealing from ``lr`` to ``min(lr_min, lr)`` over ``total`` steps."""
    floor = min(lr_min, lr)
    if total <= 1:
        return lr
    return floor + 0.5 * (lr - floor) * (1.0 + math.cos(math.pi * step / (total - 1)))


def _tensors(samples: list[Sample], dtype):
    yc = torch.as_tensor(np.stack([s.measurement.y_cassi for s in samples]), dtype=dtype)
    yp = torch.as_tensor(np.stack([s.measurement.y_pan for s in samples]), dtype=dtype)
    truth = torch.as_tensor(np.stack([s.cube.data for s in samples]), dtype=dtype)
    m = samples[0].measurement
    mask = torch.as_tensor(m.mask.mask.copy(), dtype=dtype)
    resp = torch.as_tensor(m.response, dtype=dtype)
    return yc, yp, truth, mask, resp


def batch_losses(model: PCMambaToy, samples: list[Sample]):
    """(L_rec, L_m, prediction) for a batch; disabled terms are returned as 0."""
    cfg = model.config
    dtype = next(model.parameters()).dtype
    yc, yp, truth, mask, resp = _tensors(samples, dtype)
    _, pred = model(yc, yp, mask)
    zero = pred.new_zeros(())
    l_rec = loss_rec_torch(pred, truth) if cfg.use_loss_rec else zero
    l_m = loss_measure_torch(pred, mask, cfg.disp_step, resp, yc, yp) if cfg.use_loss_m else zero
    return l_rec, l_m, pred


def sample_gradients(model: PCMambaToy, samples: list[Sample], workers: int = 1) -> list[torch.Tensor]:
    """Sum over ``samples`` of per-sample total-loss gradients.

    With ``workers > 1`` the per-sample backward passes run in a thread pool;
    the sum is taken in sample order so the result does not depend on
    scheduling.
    """
    params = [p for p in model.parameters() if p.requires_grad]

    def one(s):
        l_rec, l_m, _ = batch_losses(model, [s])
        return torch.autograd.grad(l_rec + l_m, params, allow_unused=True)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per = list(pool.map(one, samples))
    else:
        per = [one(s) for s in samples]
    total = []
    for i, p in enumerate(params):
        g = torch.zeros_like(p)
        for grads in per:
            if grads[i] is not None:
                g = g + grads[i]
        total.append(g)
    return total


@dataclass
class TrainResult:
    model: PCMambaToy
    log: list[dict]

    @property
    def initial_total(self) -> float:
        return self.log[0]["L_total"]

    @property
    def final_total(self) -> float:
        return self.log[-1]["L_total"]

    @property
    def final_psnr(self) -> float:
        vals = [r["psnr"] for r in self.log if r["psnr"] != ""]
        return vals[-1] if vals else float("nan")


def evaluate_psnr(model: PCMambaToy, sample: Sample) -> float:
    dtype = next(model.parameters()).dtype
    yc, yp, truth, mask, _ = _tensors([sample], dtype)
    with torch.no_grad():
        _, pred = model(yc, yp, mask)
    t = sample.cube.data.astype(np.float64)
    return float(psnr(pred[0].double().numpy(), t, float(t.max())))


def train(samples: list[Sample], config: NetworkConfig, log_path=None, eval_sample: Sample | None = None,
          dtype=torch.float32, progress=None) -> TrainResult:
    """Adam with cosine-annealed learning rate on ``L_rec + L_m``.

    Batches cycle through ``samples`` in a seeded shuffled order. When more
    than one sample is given and ``eval_sample`` is None, the last sample is
    held out for the PSNR column; a single sample is evaluated on itself.
    """
    if not samples:
        raise ValueError("training needs at least one scene")
    if eval_sample is None:
        if len(samples) > 1:
            samples, eval_sample = samples[:-1], samples[-1]
        else:
            eval_sample = samples[0]
    torch.manual_seed(config.seed)
    model = PCMambaToy(config).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = make_rng(config.seed)
    order: list[int] = []
    log: list[dict] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        for it in range(config.iterations):
            lr = cosine_lr(it, config.iterations, config.lr, config.lr_min)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = []
            while len(batch) < config.batch_size:
                if not order:
                    order = list(rng.permutation(len(samples)))
                batch.append(samples[order.pop()])
            opt.zero_grad()
            l_rec, l_m, _ = batch_losses(model, batch)
            total = l_rec + l_m
            if not torch.isfinite(total):
                raise NumericalError(
                    f"loss diverged at iteration {it}: L_rec={l_rec.item():.6g} L_m={l_m.item():.6g} lr={lr:.3g}"
                )
            if total.requires_grad:
                total.backward()
                opt.step()
            row = {"iter": it, "lr": lr, "L_rec": l_rec.item(), "L_m": l_m.item(), "L_total": total.item(), "psnr": ""}
            if it % config.eval_every == 0 or it == config.iterations - 1:
                row["psnr"] = evaluate_psnr(model, eval_sample)
            log.append(row)
            if writer is not None:
                writer.writerow(row)
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, log)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: PCMambaToy, path) -> None:
    """Weights as little-endian float64 in ``<path>`` plus a JSON manifest ``<path>.json``.

    The manifest lists (name, shape, offset) per tensor, offsets in elements,
    and the network config.
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().double().numpy().ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(arr.astype("<f8").tobytes())
        offset += arr.size
    path.write_bytes(b"".join(chunks))
    manifest = {"entries": entries, "config": model.config.to_dict()}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path, dtype=torch.float32) -> PCMambaToy:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    config = NetworkConfig(**manifest["config"])
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    model = PCMambaToy(config).to(dtype)
    state = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = torch.as_tensor(flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy(), dtype=dtype)
    model.load_state_dict(state)
    return model


ABLATION_FIELDS = ["tex_head", "loss_m", "bfr", "iterations", "final_L_rec", "final_L_m", "train_psnr", "train_ssim",
                   "heldout_psnr", "heldout_ssim"]


def run_ablation(config: NetworkConfig, n_scenes: int = 5, bfrs=(0.3, 0.5, 0.7, 0.9), tex_options=(True, False),
                 loss_m_options=(True, False), out_csv=None, progress=None) -> list[dict]:
    """Train every (TeX head, L_m, BFR) combination on the same ``n_scenes`` scenes.

    Quality is averaged over the training scenes and also measured on one extra
    held-out scene. Rows are appended to ``out_csv`` as they finish.
    """
    from dataclasses import replace

    from .metrics import ssim as ssim_fn
    from .net import reconstruct

    data = make_dataset(config, n_scenes + 1)
    train_set, held = data[:n_scenes], data[n_scenes]
    rows = []
    fh = open(out_csv, "w", newline="") if out_csv is not None else None
    writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS) if fh else None
    if writer:
        writer.writeheader()
    try:
        for tex in tex_options:
            for lm in loss_m_options:
                for bfr in bfrs:
                    cfg = replace(config, tex_head=tex, use_loss_m=lm, bfr=bfr)
                    res = train(train_set, cfg, eval_sample=held)

                    def score(s):
                        _, pred = reconstruct(res.model, s.measurement)
                        t = s.cube.data.astype(np.float64)
                        return psnr(pred.data, t, float(t.max())), ssim_fn(pred.data, t, float(t.max()))

                    tr = np.array([score(s) for s in train_set])
                    hp, hs = score(held)
                    row = {
                        "tex_head": tex,
                        "loss_m": lm,
                        "bfr": bfr,
                        "iterations": cfg.iterations,
                        "final_L_rec": res.log[-1]["L_rec"] if res.log else "",
                        "final_L_m": res.log[-1]["L_m"] if res.log else "",
                        "train_psnr": float(tr[:, 0].mean()),
                        "train_ssim": float(tr[:, 1].mean()),
                        "heldout_psnr": hp,
                        "heldout_ssim": hs,
                    }
                    rows.append(row)
                    if writer:
                        writer.writerow(row)
                        fh.flush()
                    if progress:
                        progress(row)
    finally:
        if fh:
            fh.close()
    return rows
