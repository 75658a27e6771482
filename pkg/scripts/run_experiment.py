"""Full experiment through the CLI: generate, train all three models, benchmark.

    python3 scripts/run_experiment.py --out runs/exp1 --per-case 100 --bench-per-case 20
"""
import argparse
import json
import sys
import time
from pathlib import Path

from poseloop.cli import main


def step(argv):
    t0 = time.perf_counter()
    code = main(argv)
    print(f"[{time.perf_counter() - t0:7.1f} s] poseloop {' '.join(argv)} -> {code}", flush=True)
    if code:
        sys.exit(code)


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, help="experiment directory")
    p.add_argument("--config", help="base run configuration JSON")
    p.add_argument("--per-case", type=int, default=100, help="training scenes per case")
    p.add_argument("--bench-per-case", type=int, default=20, help="held-out benchmark scenes per case")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--oracle", action="store_true", help="also report true-class attribution")
    return p.parse_args()


def run():
    args = parse()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base["paths"] = {"dataset": str(out / "train"), "models": str(out / "models"), "reports": str(out / "reports")}
    cfg = out / "config.json"
    cfg.write_text(json.dumps(base, indent=1, sort_keys=True) + "\n")
    c = ["--config", str(cfg)]
    step(["gen", *c, "--per-case", str(args.per_case), "--seed", str(args.seed), "--jobs", str(args.jobs)])
    step(["gen", *c, "--per-case", str(args.bench_per_case), "--seed", str(args.seed + 1),
          "--out", str(out / "test"), "--jobs", str(args.jobs)])
    for cmd in ("train-failure", "train-attrib", "train-recon"):
        step([cmd, *c])
    step(["bench", *c, "--dataset", str(out / "test"), "--jobs", str(args.jobs)] + (["--oracle"] if args.oracle else []))


if __name__ == "__main__":
    run()
