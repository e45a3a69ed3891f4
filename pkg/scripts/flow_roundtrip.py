#!/usr/bin/env python3
"""Depth -> flow -> depth round trip and warp PSNR over seeded ego scenes."""
import argparse
import time

import numpy as np

from flowdepth import synth
from flowdepth.flow import decompose_flow, synthesize_flow
from flowdepth.geometry import warp_image


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--min-trans", type=float, default=0.05)
    args = ap.parse_args()
    print("seed  |t|     valid_px  max_rel_err  psnr_db")
    total = 0.0
    for seed in range(args.seeds):
        b = synth.generate(synth.ego_scene_spec(seed, min_trans=args.min_trans))
        K = b.spec.K
        t0 = time.perf_counter()
        D = decompose_flow(synthesize_flow(b.D_t, b.T_cam, K), b.T_cam, K)
        total += time.perf_counter() - t0
        sel = D.mask & b.D_t.mask
        rel = np.abs(D.depth[sel] - b.D_t.depth[sel]) / b.D_t.depth[sel]
        W = warp_image(b.I_t1, b.D_t, b.T_cam, K)
        m = W.mask & b.visible_t
        psnr = 10 * np.log10(1 / np.mean((W.data[m] - b.I_t.data[m]) ** 2))
        print(f"{seed:>4}  {np.linalg.norm(b.T_cam.translation):.3f}  {sel.sum():8d}  {rel.max():11.2e}  {psnr:7.2f}")
    print(f"round-trip time {total:.2f} s")


if __name__ == "__main__":
    main()
