"""Toy ablation: {TeX head on/off} x {L_m on/off} x BFR on five synthetic scenes.

Report-only. Results go to results/ablation.csv; quality is averaged over the
training scenes and also measured on one held-out scene.
"""

import argparse
from pathlib import Path

import torch

from dcchi.net import NetworkConfig
from dcchi.train import run_ablation

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--scenes", type=int, default=5)
    ap.add_argument("--bfr", type=float, nargs="+", default=[0.3, 0.5, 0.7, 0.9])
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "ablation.csv")
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = NetworkConfig(iterations=args.iterations, eval_every=args.iterations)
    args.out.parent.mkdir(parents=True, exist_ok=True)

    def show(row):
        print(f"tex={row['tex_head']!s:5} L_m={row['loss_m']!s:5} bfr={row['bfr']:.1f}  "
              f"train {row['train_psnr']:.2f} dB / {row['train_ssim']:.4f}  "
              f"held-out {row['heldout_psnr']:.2f} dB / {row['heldout_ssim']:.4f}", flush=True)

    run_ablation(cfg, n_scenes=args.scenes, bfrs=tuple(args.bfr), out_csv=args.out, progress=show)


if __name__ == "__main__":
    main()
