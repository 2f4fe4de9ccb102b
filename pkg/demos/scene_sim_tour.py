"""Render one checkerboard patch under every placement preset and save a contact sheet.

    python demos/scene_sim_tour.py --out presets.png

Each row is a preset, each column a different placement seed. The patch is a
checkerboard so that rotation, tilt and scale are easy to read by eye.
"""
import argparse

import numpy as np
import torch
from PIL import Image

from dynpatch.datasets import synthetic_scene
from dynpatch.scene_sim import PRESETS, apply_patch, sample_theta


def checkerboard(side: int = 16, cells: int = 4) -> torch.Tensor:
    k = side // cells
    board = ((torch.arange(side) // k)[:, None] + (torch.arange(side) // k)[None, :]) % 2
    return torch.stack([board.float(), 0.2 + 0.6 * board.float(), 1 - board.float()])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="presets.png")
    ap.add_argument("--columns", type=int, default=6)
    ap.add_argument("--scale", type=int, default=3, help="nearest-neighbour upscaling of each tile")
    args = ap.parse_args()

    scene = synthetic_scene(np.random.default_rng(4), max_objects=1)
    patch = checkerboard()
    rows = []
    for name in PRESETS:
        tiles = []
        for seed in range(args.columns):
            theta = sample_theta(scene, name, seed)
            out = apply_patch(scene, patch, theta).image
            tiles.append(out)
            print(f"{name:>4} seed {seed}: pos=({theta.position[0]:.2f}, {theta.position[1]:.2f}) "
                  f"size={theta.size:.3f} rot={theta.rotation:+.1f} tilt={theta.rotation3d:+.1f}")
        rows.append(torch.cat(tiles, dim=2))
    sheet = torch.cat(rows, dim=1)
    arr = (sheet.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    img = Image.fromarray(arr)
    img = img.resize((img.width * args.scale, img.height * args.scale), Image.NEAREST)
    img.save(args.out)
    print(f"saved {args.out} ({len(PRESETS)} presets x {args.columns} seeds)")


if __name__ == "__main__":
    main()
