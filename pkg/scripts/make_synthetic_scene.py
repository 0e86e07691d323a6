"""
Write the desk-scale tomography scene (cloud grid + air, 9 cameras, zenith sun)
plus a starting scene whose cloud grid is a constant initial guess.
Usage: python scripts/make_synthetic_scene.py <out_dir> [--n 16] [--peak 20] [--seed 0] [--init 2.0]
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from pathrec.services.scene_service import SceneService  # noqa: E402
from pathrec.services.synthetic_service import SyntheticSceneService  # noqa: E402


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n", type=int, default=16)
    parser.add_argument("--peak", type=float, default=20.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--rows", type=int, default=32)
    parser.add_argument("--init", type=float, default=2.0, help="constant extinction of the starting scene")
    args = parser.parse_args()

    truth = SyntheticSceneService.tomography_scene(n=args.n, peak=args.peak, seed=args.seed, rows=args.rows, cols=args.rows)
    SceneService.save_scene(truth, args.out_dir / "truth.json")
    start = SyntheticSceneService.tomography_scene(
        n=args.n, values=np.full(args.n ** 3, args.init), rows=args.rows, cols=args.rows
    )
    SceneService.save_scene(start, args.out_dir / "start.json")
    print(f"✅ Wrote truth.json (grid: truth_cloud.vgrd) and start.json to {args.out_dir}")
    print("   Ground truth: python -m pathrec render --scene truth.json --paths 4e6 --seed 1001 -o gt/")


if __name__ == "__main__":
    main()
