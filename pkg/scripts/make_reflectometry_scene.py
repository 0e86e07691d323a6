"""
Write the reflectometry scene: an open box with 14 diffuse spheres and one Phong sphere.
Usage: python scripts/make_reflectometry_scene.py <out_dir> [--kappa 0.7] [--gamma 50] [--rows 60]
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from pathrec.services.scene_service import SceneService  # noqa: E402
from pathrec.services.synthetic_service import SyntheticSceneService  # noqa: E402


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--kappa", type=float, default=0.7)
    parser.add_argument("--gamma", type=float, default=50.0)
    parser.add_argument("--rows", type=int, default=60)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    scene = SyntheticSceneService.reflectometry_scene(
        kappa_s=args.kappa, gamma=args.gamma, rows=args.rows, cols=args.rows, seed=args.seed
    )
    SceneService.save_scene(scene, args.out_dir / "reflectometry.json")
    print(f"✅ Wrote {args.out_dir / 'reflectometry.json'} (true kappa_s={args.kappa}, gamma={args.gamma})")


if __name__ == "__main__":
    main()
