"""Held-out accuracy of the failure predictor and the attribution classifier.

    python3 scripts/eval_predictors.py --train 100 --test 100
"""
import argparse
import time

import numpy as np

from poseloop.attribution import ErrorClass, classify, train_attribution
from poseloop.config import RunConfig
from poseloop.failure import alignment_examples, evaluate, train_failure_model
from poseloop.simscene import CASES, DEFAULT_OBJECTS, generate

ERRORS = ("noise", "badinit", "occlusion")


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train", type=int, default=100, help="scenes per case for training")
    p.add_argument("--test", type=int, default=100, help="held-out scenes per case")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def split(n, seed0):
    return {c: [generate(c, DEFAULT_OBJECTS[i % 3], seed0 + 10_000 * k + i) for i in range(n)]
            for k, c in enumerate(CASES)}


def run():
    args = parse()
    cfg = RunConfig()
    t0 = time.perf_counter()
    tr, te = split(args.train, 1_000_000 + args.seed), split(args.test, 2_000_000 + args.seed)
    print(f"generated in {time.perf_counter() - t0:.0f} s")
    X, y = alignment_examples([s for c in CASES for s in tr[c]], cfg.icp, restarts=cfg.failure.restarts)
    net, _ = train_failure_model(X, y, cfg.failure.train, cfg.failure.hidden)
    Xt, yt = alignment_examples([s for c in CASES for s in te[c]], cfg.icp)
    print(evaluate(net, Xt, yt).report("failure predictor"))
    a = cfg.attribution
    samples = [s for c in ERRORS for s in tr[c]]
    t0 = time.perf_counter()
    model, _ = train_attribution([s.observed for s in samples], [ErrorClass.from_case(s.case) for s in samples],
                                 a.train, n_points=a.n_points)
    print(f"attribution trained in {time.perf_counter() - t0:.0f} s")
    cm = np.zeros((3, 3), dtype=int)
    for c in ERRORS:
        for s in te[c]:
            cm[ErrorClass.from_case(c), int(classify(model, s.observed).argmax)] += 1
    print("rows true, columns predicted (noise badinit occlusion)")
    print(cm)
    print(f"accuracy {np.trace(cm) / cm.sum():.4f}")


if __name__ == "__main__":
    run()
