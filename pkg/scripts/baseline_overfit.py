"""Single-scene 32x32x8 overfit run that fixes the toy-training regression thresholds.

Writes results/baseline_overfit.csv (per-iteration log) and
results/baseline_overfit.json (summary, config and wall time).
"""

import argparse
import json
import time
from pathlib import Path

import torch

from dcchi.net import NetworkConfig
from dcchi.train import make_dataset, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = NetworkConfig(iterations=args.iterations, seed=args.seed, eval_every=50)
    args.out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(cfg, 1)
    t0 = time.perf_counter()
    res = train(data, cfg, log_path=args.out / "baseline_overfit.csv",
                progress=lambda r: print(f"iter {r['iter']:5d}  L_total {r['L_total']:.5f}  PSNR {r['psnr']:.2f}")
                if r["psnr"] != "" else None)
    elapsed = time.perf_counter() - t0
    summary = {
        "initial_L_total": res.initial_total,
        "final_L_total": res.final_total,
        "ratio": res.final_total / res.initial_total,
        "final_psnr_db": res.final_psnr,
        "seconds": elapsed,
        "torch": torch.__version__,
        "config": cfg.to_dict(),
    }
    (args.out / "baseline_overfit.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=1))


if __name__ == "__main__":
    main()
