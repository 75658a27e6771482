"""BO-ICP calibration on seeded BadInit scenes: success rate and runtime per budget.

    python3 scripts/calibrate_boicp.py --scenes 20 --budgets 20,40,60
"""
import argparse
import time

import numpy as np

from poseloop.boicp import BoConfig, SearchBounds, bo_icp
from poseloop.metrics import add_error
from poseloop.pipeline import plain_icp
from poseloop.simscene import generate_many


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--budgets", default="30,60", help="comma-separated total evaluation counts")
    p.add_argument("--initial", type=int, default=15, help="random evaluations before the GP takes over")
    p.add_argument("--threshold", type=float, default=0.01)
    return p.parse_args()


def run():
    args = parse()
    scenes = generate_many(["badinit"], args.scenes, args.seed)
    plain = np.array([plain_icp(s) for s in scenes])
    print(f"plain ICP success {np.mean(plain < args.threshold):.2f} on {len(scenes)} scenes")
    for budget in (int(b) for b in args.budgets.split(",")):
        cfg = BoConfig(n_initial_random=min(args.initial, budget), n_iterations=max(budget - args.initial, 0))
        t0 = time.perf_counter()
        adds = []
        for i, s in enumerate(scenes):
            best, _ = bo_icp(s.mesh_cloud, s.observed, SearchBounds(), BoConfig(**{**cfg.__dict__, "seed": i}))
            adds.append(add_error(s.mesh_cloud, s.gt_pose, best.transform))
        adds = np.array(adds)
        dt = (time.perf_counter() - t0) / len(scenes)
        print(f"budget {budget:4d}: success {np.mean(adds < args.threshold):.2f}  "
              f"median ADD {1000 * np.median(adds):.1f} mm  {dt:.1f} s/scene", flush=True)


if __name__ == "__main__":
    run()
