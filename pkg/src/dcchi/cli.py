"""``dcchi`` command line: simulate, synthesize, scan-check, scan-order, train-toy, eval.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import FormatError, PanImage, SpectralCube, WavelengthGrid, load_cube, load_pan, make_random_mask, \
    save_cube, save_pan, SceneTeX

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


class NumericFailure(Exception):
    pass


# -- config files ------------------------------------------------------------


def _parse_value(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; ``[section]`` lines are ignored."""
    out, errors = {}, []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            errors.append(f"{path}:{n}: expected key = value")
            continue
        key, val = line.split("=", 1)
        out[key.strip()] = _parse_value(val)
    if errors:
        raise ConfigError(errors)
    return out


def build_network_config(values: dict):
    """Validate ``values`` against :class:`NetworkConfig`, reporting every problem at once."""
    from .net import NetworkConfig

    known = NetworkConfig.field_names()
    errors = [f"unknown config key {k!r}" for k in values if k not in known]
    defaults = NetworkConfig()
    clean = {}
    for k, v in values.items():
        if k not in known:
            continue
        ref = getattr(defaults, k)
        if isinstance(ref, bool) and not isinstance(v, bool):
            errors.append(f"{k} must be true/false, got {v!r}")
        elif isinstance(ref, int) and not isinstance(ref, bool) and not isinstance(v, int):
            errors.append(f"{k} must be an integer, got {v!r}")
        elif isinstance(ref, float) and not isinstance(v, (int, float)):
            errors.append(f"{k} must be a number, got {v!r}")
        else:
            clean[k] = float(v) if isinstance(ref, float) else v
    # range checks on the well-typed values, so every problem is reported in one pass
    cfg = NetworkConfig.__new__(NetworkConfig)
    for k in known:
        setattr(cfg, k, clean.get(k, getattr(defaults, k)))
    cfg.extra = {}
    errors.extend(cfg.validate())
    if errors:
        raise ConfigError(errors)
    return NetworkConfig(**clean)


# -- helpers -----------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(rows, fieldnames, fh):
    w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)


def _save_plane(arr: np.ndarray, path: Path) -> None:
    """Exact float32 2-D array as a single-band HSC1 file."""
    save_cube(SpectralCube(np.asarray(arr, dtype=np.float32)[..., None], WavelengthGrid([1.0])), path)


def _load_plane(path) -> np.ndarray:
    return load_cube(path).data[..., 0]


def _preview(arr: np.ndarray, path: Path) -> None:
    save_pan(PanImage(np.clip(arr, 0, None)), path)


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .forward import DispersionSpec, dcchi_measure, uniform_response
    from .net import NetworkConfig
    from .tex import tex_synthesize
    from .train import random_scene
    from .core import make_rng

    if args.manifest:
        m = json.loads(Path(args.manifest).read_text())
        params = m["params"]
    else:
        params = {
            "cube": str(Path(args.cube).resolve()) if args.cube else None,
            "scene_seed": args.scene_seed,
            "height": args.height,
            "width": args.width,
            "bands": args.bands,
            "mask_seed": args.mask_seed,
            "mask_p": args.mask_p,
            "disp_step": args.disp_step,
            "noise_sigma": args.noise_sigma,
            "noise_seed": args.noise_seed,
            "response": args.response,
        }
    errors = []
    if params["noise_sigma"] < 0:
        errors.append("--noise-sigma must be >= 0")
    if params["disp_step"] < 0:
        errors.append("--disp-step must be >= 0")
    if not (0 < params["mask_p"] < 1):
        errors.append("--mask-p must lie in (0, 1)")
    if errors:
        raise ConfigError(errors)

    if params["cube"]:
        cube = load_cube(params["cube"])
    else:
        cfg = NetworkConfig(height=params["height"], width=params["width"], bands=params["bands"], depth=1)
        scene = random_scene(cfg.height, cfg.width, cfg.grid, make_rng(params["scene_seed"]))
        cube = tex_synthesize(scene, cfg.grid, cfg.radiance_scale)
    h, w, c = cube.shape
    response = params["response"] if params["response"] is not None else list(uniform_response(c))
    mask = make_random_mask(h, w, params["mask_p"], params["mask_seed"])
    meas = dcchi_measure(cube, mask, DispersionSpec(params["disp_step"]), response, params["noise_sigma"],
                         params["noise_seed"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_plane(meas.y_cassi, out / "y_cassi.hsc")
    _save_plane(meas.y_pan, out / "y_pan.hsc")
    save_cube(cube, out / "truth.hsc")
    save_pan(PanImage(mask.mask), out / "mask.pgm")
    _preview(meas.y_cassi, out / "y_cassi.pgm")
    _preview(meas.y_pan, out / "y_pan.pgm")
    manifest = {
        "params": {**params, "response": [float(r) for r in response]},
        "outputs": {
            "y_cassi": "y_cassi.hsc",
            "y_pan": "y_pan.hsc",
            "truth": "truth.hsc",
            "mask": "mask.pgm",
            "sha256": {n: _sha256(out / n) for n in ("y_cassi.hsc", "y_pan.hsc")},
        },
        "shapes": {"y_cassi": list(meas.y_cassi.shape), "y_pan": list(meas.y_pan.shape), "cube": [h, w, c]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {out}: y_cassi {meas.y_cassi.shape}, y_pan {meas.y_pan.shape}")
    return EXIT_OK


def load_simulation(directory):
    """MeasurementPair and ground-truth cube from a ``simulate`` output directory."""
    from .forward import DispersionSpec, MeasurementPair

    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    p = m["params"]
    truth = load_cube(d / m["outputs"]["truth"])
    h, w, _ = truth.shape
    mask = make_random_mask(h, w, p["mask_p"], p["mask_seed"])
    meas = MeasurementPair(_load_plane(d / "y_cassi.hsc"), _load_plane(d / "y_pan.hsc"), mask,
                           DispersionSpec(p["disp_step"]), np.asarray(p["response"], dtype=np.float64))
    return meas, truth


def cmd_synthesize(args) -> int:
    from .tex import tex_synthesize

    t = load_pan(args.temperature).data.astype(np.float64)
    e = load_pan(args.emissivity).data.astype(np.float64)
    x = load_cube(args.texture)
    if t.shape != e.shape or t.shape != x.shape[:2]:
        raise FormatError(f"input sizes differ: T {t.shape}, e {e.shape}, X {x.shape[:2]}")
    if np.any(e > 1):
        raise FormatError("emissivity map has values above 1")
    cube = tex_synthesize(SceneTeX(t, e, x.data, x.grid), x.grid, args.radiance_scale)
    save_cube(cube, args.out)
    Path(str(args.out) + ".json").write_text(json.dumps({"radiance_scale": args.radiance_scale}))
    print(f"wrote {args.out}: cube {cube.shape}")
    return EXIT_OK


def scan_check(instances: int = 1000, max_len: int = 4097, max_state: int = 32, seed: int = 0,
               log2_range=(10, 20), timing_csv=None, gradcheck: bool = True, repeats: int = 3,
               progress=print) -> dict:
    """Parallel vs sequential equivalence, backward-pass check and runtime sweep."""
    from .gradcheck import fd_grad, relative_error
    from .ssm import DiscreteParams, scan_backward, scan_parallel, scan_sequential

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        L = int(rng.integers(1, max_len + 1))
        N = int(rng.integers(1, max_state + 1))
        D = int(rng.integers(1, 3))
        disc = DiscreteParams(rng.uniform(0.0, 1.0, (L, D, N)), rng.normal(size=(L, D, N)))
        C, Dk, x = rng.normal(size=(L, D, N)), rng.normal(size=D), rng.normal(size=(L, D))
        h0 = rng.normal(size=(D, N))
        a = scan_sequential(disc, C, Dk, x, h0)
        b = scan_parallel(disc, C, Dk, x, h0)
        worst = max(worst, relative_error(a, b))
    result = {"equivalence_max_rel": worst}
    if instances:
        progress(f"scan equivalence: {instances} instances, max rel error {worst:.3e}")

    if gradcheck:
        L, D, N = 16, 2, 4
        Ab, Bb = rng.uniform(0.1, 0.95, (L, D, N)), rng.normal(size=(L, D, N))
        C, Dk, x, h0 = rng.normal(size=(L, D, N)), rng.normal(size=D), rng.normal(size=(L, D)), rng.normal(size=(D, N))
        dy = rng.normal(size=(L, D))
        g = scan_backward(DiscreteParams(Ab, Bb), C, Dk, x, h0, dy)
        args = {"Abar": Ab, "Bbar": Bb, "C": C, "D": Dk, "x": x, "h0": h0}

        def loss(**kw):
            return float(np.sum(scan_sequential(DiscreteParams(kw["Abar"], kw["Bbar"]), kw["C"], kw["D"], kw["x"],
                                                kw["h0"]) * dy))

        errs = {}
        for name, val in args.items():
            fd = fd_grad(lambda v, name=name: loss(**{**args, name: v}), val)
            errs[name] = relative_error(fd, g[name])
        result["gradcheck"] = errs
        progress("scan backward vs finite differences: " + ", ".join(f"{k} {v:.2e}" for k, v in errs.items()))

    if log2_range:
        from .ssm import DiscreteParams as DP

        rows = []
        # warm caches and the allocator so the shortest lengths are not penalised
        L = 2 ** log2_range[0]
        scan_sequential(DP(np.full((L, 1, 4), 0.9), np.ones((L, 1, 4))), np.ones((L, 1, 4)), 0.0, np.ones((L, 1)))
        for p in range(log2_range[0], log2_range[1] + 1):
            L = 2**p
            disc = DP(rng.uniform(0.5, 0.99, (L, 1, 4)), rng.normal(size=(L, 1, 4)))
            C, x = rng.normal(size=(L, 1, 4)), rng.normal(size=(L, 1))
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                scan_sequential(disc, C, 0.0, x)
                best = min(best, time.perf_counter() - t0)
            rows.append({"L": L, "seconds": best})
        slope = float(np.polyfit(np.log([r["L"] for r in rows]), np.log([r["seconds"] for r in rows]), 1)[0])
        result["timings"] = rows
        result["loglog_slope"] = slope
        progress(f"sequential scan runtime log-log slope over L=2^{log2_range[0]}..2^{log2_range[1]}: {slope:.3f}")
        if timing_csv:
            with open(timing_csv, "w", newline="") as fh:
                _write_csv(rows, ["L", "seconds"], fh)
    return result


def cmd_scan_check(args) -> int:
    res = scan_check(args.instances, args.max_len, args.max_state, args.seed,
                     (args.min_log2, args.max_log2) if not args.no_timing else None, args.timing_csv)
    ok = res["equivalence_max_rel"] <= 1e-12 and all(v <= 1e-5 for v in res.get("gradcheck", {}).values())
    if "loglog_slope" in res:
        ok = ok and 0.9 <= res["loglog_slope"] <= 1.15
    print("scan-check:", "PASS" if ok else "FAIL")
    if not ok:
        raise NumericFailure("scan-check failed")
    return EXIT_OK


def cmd_scan_order(args) -> int:
    from .csmb import build_scan_order, save_scan_order

    if not (0 < args.bfr < 1):
        raise ConfigError("--bfr must lie in (0, 1)")
    order = build_scan_order(args.height, args.width, args.bfr, args.seed)
    save_scan_order(order, args.out)
    print(f"wrote {args.out}: {order.backbone_count} backbone / {len(order) - order.backbone_count} PAN tokens")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .train import NumericalError, make_dataset, run_ablation, save_checkpoint, train

    if args.manifest:
        values = json.loads(Path(args.manifest).read_text())
        values.pop("extra", None)
        args.scenes = values.pop("scenes", args.scenes)
        args.ablation = values.pop("ablation", False) or args.ablation
        args.bfr = args.bfr or values.pop("bfr_sweep", None)
    else:
        values = parse_config_file(args.config) if args.config else {}
    for key, flag in (("iterations", args.iterations), ("seed", args.seed)):
        if flag is not None:
            values[key] = flag
    if args.no_tex_head:
        values["tex_head"] = False
    if args.no_loss_m:
        values["use_loss_m"] = False
    bfrs = args.bfr or [values.get("bfr", 0.7)]
    values["bfr"] = bfrs[0]
    cfg = build_network_config(values)
    bad = [b for b in bfrs if not (0 < b < 1)]
    if bad:
        raise ConfigError([f"bfr {b} outside (0, 1)" for b in bad])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "bfr_sweep": bfrs, "scenes": args.scenes,
                                                     "ablation": args.ablation}, indent=1))

    try:
        if args.ablation:
            rows = run_ablation(cfg, n_scenes=args.scenes, bfrs=tuple(bfrs) if args.bfr else (0.3, 0.5, 0.7, 0.9),
                                out_csv=out / "ablation.csv", progress=lambda r: print(r, flush=True))
            print(f"wrote {out / 'ablation.csv'} ({len(rows)} configurations)")
            return EXIT_OK
        data = make_dataset(cfg, args.scenes)
        summary = []
        for bfr in bfrs:
            run_cfg = replace(cfg, bfr=bfr)
            tag = f"bfr{bfr:g}"
            res = train(data, run_cfg, log_path=out / f"train_{tag}.csv")
            save_checkpoint(res.model, out / f"weights_{tag}.bin")
            summary.append({"bfr": bfr, "tex_head": cfg.tex_head, "loss_m": cfg.use_loss_m,
                            "initial_L_total": res.initial_total, "final_L_total": res.final_total,
                            "final_psnr": res.final_psnr})
            print(f"bfr={bfr:g}: L_total {res.initial_total:.4g} -> {res.final_total:.4g}, PSNR {res.final_psnr:.2f} dB")
    except NumericalError as exc:
        raise NumericFailure(str(exc)) from exc
    if len(bfrs) > 1:
        with open(out / "bfr_sweep.csv", "w", newline="") as fh:
            _write_csv(summary, list(summary[0]), fh)
        print(f"wrote {out / 'bfr_sweep.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import quality_report

    pred, truth = load_cube(args.pred), load_cube(args.truth)
    if pred.shape != truth.shape:
        raise FormatError(f"cube shapes differ: {pred.shape} vs {truth.shape}")
    rep = quality_report(pred.data, truth.data, args.peak)
    _write_csv(list(rep.rows()), ["band", "psnr_db", "ssim"], sys.stdout)
    if args.residual:
        save_pan(PanImage(rep.residual.astype(np.float32)), args.residual)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcchi", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch/numpy worker threads (env DCCHI_THREADS overrides)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate DCCHI measurements of a cube or a random TeX scene")
    s.add_argument("--cube", help="input HSC1 cube; a random scene is synthesised when omitted")
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--bands", type=int, default=8)
    s.add_argument("--mask-seed", type=int, default=0)
    s.add_argument("--mask-p", type=float, default=0.5)
    s.add_argument("--disp-step", type=int, default=1)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--noise-seed", type=int, default=0)
    s.add_argument("--response", type=float, nargs="+", help="PAN spectral weights (default uniform 1/C)")
    s.add_argument("--manifest", help="replay the parameters of an earlier manifest.json")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("synthesize", help="TeX synthesis of a cube from T, e and X files")
    s.add_argument("--temperature", required=True, help="temperature map (PGM + .scale sidecar), Kelvin")
    s.add_argument("--emissivity", required=True, help="emissivity map (PGM + .scale sidecar)")
    s.add_argument("--texture", required=True, help="texture cube (HSC1)")
    s.add_argument("--radiance-scale", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("scan-check", help="scan equivalence, gradient check and runtime-linearity sweep")
    s.add_argument("--instances", type=int, default=1000)
    s.add_argument("--max-len", type=int, default=4097)
    s.add_argument("--max-state", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-log2", type=int, default=10)
    s.add_argument("--max-log2", type=int, default=20)
    s.add_argument("--no-timing", action="store_true")
    s.add_argument("--timing-csv", default="scan_timing.csv")
    s.set_defaults(func=cmd_scan_check)

    s = sub.add_parser("scan-order", help="export a cross-scan order as a PGM mask")
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--bfr", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=None, help="random pattern seed (default: Bayer pattern)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scan_order)

    s = sub.add_parser("train-toy", help="train the toy reconstruction network")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--manifest", help="replay the config.json written by an earlier run")
    s.add_argument("--out", required=True, help="output directory for logs and checkpoints")
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--bfr", type=float, nargs="+", help="one or more backbone feature ratios")
    s.add_argument("--no-tex-head", action="store_true", help="direct C-channel head instead of TeX synthesis")
    s.add_argument("--no-loss-m", action="store_true", help="drop the re-measurement loss")
    s.add_argument("--ablation", action="store_true",
                   help="run {TeX on/off} x {L_m on/off} x BFR and write ablation.csv")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval", help="PSNR / SSIM of a predicted cube against ground truth, CSV on stdout")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--peak", type=float, default=None)
    s.add_argument("--residual", help="write the residual map as PGM")
    s.set_defaults(func=cmd_eval)
    return p


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    threads = int(os.environ.get("DCCHI_THREADS", args.threads))
    _set_threads(threads)
    if getattr(args, "radiance_scale", "unset") is None:
        from .tex import DEFAULT_RADIANCE_SCALE

        args.radiance_scale = DEFAULT_RADIANCE_SCALE
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
