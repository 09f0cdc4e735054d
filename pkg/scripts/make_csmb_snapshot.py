"""Regenerate tests/data/csmb_snapshot.npz: CSMB outputs under the raster order and a reversed order.

Only rerun this after an intentional change to the block's numerics.
"""

from pathlib import Path

import numpy as np
import torch

from dcchi.csmb import CSMB, build_scan_order, csmb_forward

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "csmb_snapshot.npz"


def snapshot_inputs():
    torch.manual_seed(7)
    block = CSMB(4, 8).double()
    g = torch.Generator().manual_seed(11)
    fb = torch.randn(6, 6, 4, generator=g, dtype=torch.float64)
    fp = torch.randn(6, 6, 4, generator=g, dtype=torch.float64)
    order = build_scan_order(6, 6, 0.7)
    return block, fb, fp, order


def main():
    block, fb, fp, order = snapshot_inputs()
    with torch.no_grad():
        raster = csmb_forward(fb, fp, order, block).numpy()
        reversed_ = csmb_forward(fb, fp, order.permuted(np.arange(len(order))[::-1]), block).numpy()
    OUT.parent.mkdir(parents=True, exist_ok=True)
    np.savez(OUT, raster=raster, reversed=reversed_)
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
