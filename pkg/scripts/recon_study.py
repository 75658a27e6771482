"""Reconstruction training study: chamfer-to-clean ratio and ADD change on held-out Noise scenes.

    python3 scripts/recon_study.py --train 100 --epochs 30 --lr 0.02
"""
import argparse
import time

import numpy as np

from poseloop.metrics import add_error, chamfer
from poseloop.nnet import TrainConfig
from poseloop.pipeline import plain_icp
from poseloop.reconstruct import ReconConfig, train_reconstruction
from poseloop.registration import icp_or_last
from poseloop.simscene import DEFAULT_OBJECTS, CorruptionSpec, GenConfig, generate, generate_many


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train", type=int, default=100, help="training scenes")
    p.add_argument("--test", type=int, default=20, help="held-out scenes")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--patches", type=int, default=2, help="corrupted patches per scene")
    p.add_argument("--radius", default="0.05,0.08", help="patch radius range in metres")
    p.add_argument("--magnitude", default="0.01,0.02", help="shift magnitude range in metres")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def pair(s):
    a, b = (float(v) for v in s.split(","))
    return a, b


def run():
    args = parse()
    gen = GenConfig(corruption=CorruptionSpec(args.patches, pair(args.radius), pair(args.magnitude)))
    train = [generate("noise", DEFAULT_OBJECTS[i % 3], 50_000 + i, gen) for i in range(args.train)]
    test = generate_many(["noise"], args.test, 3, config=gen)
    t0 = time.perf_counter()
    model, hist = train_reconstruction([(s.observed, s.clean, s.mesh_cloud) for s in train],
                                       TrainConfig(loss_tag="chamfer", learning_rate=args.lr, epochs=args.epochs,
                                                   batch_size=args.batch, seed=args.seed), ReconConfig())
    base = np.mean([chamfer(s.observed, s.clean) for s in train])
    print(f"trained in {time.perf_counter() - t0:.0f} s; loss / corrupted baseline per epoch:")
    print(np.round(np.array(hist.losses) / base, 3))
    ratios, better = [], 0
    for s in test:
        fixed = model.reconstruct(s.observed, s.mesh_cloud)
        ratios.append(chamfer(fixed, s.clean) / chamfer(s.observed, s.clean))
        est = icp_or_last(s.mesh_cloud, fixed, s.init_pose)
        better += add_error(s.mesh_cloud, s.gt_pose, est.transform) < plain_icp(s)
    print(f"median chamfer ratio {np.median(ratios):.3f}, ADD improved on {better}/{len(test)}")


if __name__ == "__main__":
    run()
