"""Command-line entry point: ``poseloop {gen,train-failure,train-attrib,train-recon,bench,run}``.

Exit codes: 0 success, 2 user or input error, 3 runtime or training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .attribution import AttributionModel, ErrorClass, InvalidDatasetError as AttribDatasetError
from .attribution import train_attribution
from .config import ConfigError, RunConfig, load_config
from .failure import InvalidDatasetError as FailureDatasetError
from .failure import alignment_examples, train_failure_model
from .geometry import InvalidInputError
from .nnet import TrainHistory, TrainingDivergedError, WeightFileError, load_network, save_network, write_loss_csv
from .pipeline import PipelineConfig, benchmark, run, write_report
from .reconstruct import ReconstructionError, ReconstructionModel, train_reconstruction
from .simscene import CASES, DEFAULT_OBJECTS, DatasetError, GenerationError, generate, load_dataset, load_sample
from .simscene import write_dataset

log = logging.getLogger("poseloop")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 2, 3
MODEL_FILES = {"failure": "failure.json", "attribution": "attribution.json", "reconstruction": "reconstruction.json"}


class UserError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _dir(args, name: str, cfg: RunConfig) -> Path:
    value = getattr(args, name, None)
    return Path(value if value is not None else getattr(cfg.paths, name))


def _load_samples(path: Path, cases=None):
    try:
        samples = load_dataset(path)
    except (DatasetError, InvalidInputError, OSError) as exc:
        raise UserError(f"cannot read dataset {path}: {exc}") from None
    if cases is not None:
        samples = [s for s in samples if s.case in cases]
    if not samples:
        raise UserError(f"dataset {path} has no usable samples")
    return samples


def _write_model(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    writer(path)


def _gen_one(job):
    case, obj, seed, gen_cfg = job
    return generate(case, obj, seed, gen_cfg)


def load_models(models_dir: Path, cfg: RunConfig) -> PipelineConfig:
    paths = {k: models_dir / v for k, v in MODEL_FILES.items()}
    for p in paths.values():
        if not p.is_file():
            raise UserError(f"missing model file {p}")
    try:
        failure, _ = load_network(paths["failure"])
    except (WeightFileError, ValueError, KeyError) as exc:
        raise UserError(f"bad model file {paths['failure']}: {exc}") from None
    try:
        attrib = AttributionModel.load(paths["attribution"])
    except (WeightFileError, ValueError, KeyError) as exc:
        raise UserError(f"bad model file {paths['attribution']}: {exc}") from None
    try:
        recon = ReconstructionModel.load(paths["reconstruction"])
    except (WeightFileError, ValueError, KeyError) as exc:
        raise UserError(f"bad model file {paths['reconstruction']}: {exc}") from None
    p = cfg.pipeline
    return PipelineConfig(
        failure_model=failure, attribution_model=attrib, recon_model=recon, icp_config=cfg.icp,
        failure_threshold=cfg.failure.threshold, success_threshold=p.success_threshold,
        bounds=p.bounds, bo_config=p.bo, nbv_visibility_samples=p.nbv_visibility_samples,
        max_mitigation_rounds=p.max_mitigation_rounds,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _config(args)
    cases = [c.strip() for c in args.cases.split(",") if c.strip()]
    bad = [c for c in cases if c not in CASES]
    if bad or not cases:
        raise UserError(f"invalid case name(s) {bad or args.cases!r}; choose from {', '.join(CASES)}")
    objects = [o.strip() for o in args.objects.split(",")] if args.objects else list(DEFAULT_OBJECTS)
    if args.per_case < 1:
        raise UserError("--per-case must be >= 1")
    out = Path(args.out) if args.out else Path(cfg.paths.dataset)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UserError(f"output directory {out} is not writable: {exc}") from None
    jobs = []
    for ci, case in enumerate(cases):
        for i in range(args.per_case):
            seed = args.seed * 1_000_003 + ci * 10_007 + i
            jobs.append((case, objects[i % len(objects)], seed, cfg.generation))
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                samples = list(ex.map(_gen_one, jobs))
        else:
            samples = [_gen_one(j) for j in jobs]
    except KeyError as exc:
        raise UserError(f"unknown object {exc}") from None
    manifest = write_dataset(samples, out)
    log.info("wrote %d samples to %s", len(samples), manifest)
    return EXIT_OK


def cmd_train_failure(args) -> int:
    cfg = _config(args)
    samples = _load_samples(_dir(args, "dataset", cfg))
    X, y = alignment_examples(samples, cfg.icp, cfg.pipeline.success_threshold, cfg.failure.restarts)
    train_cfg = cfg.failure.train if args.seed is None else _reseed(cfg.failure.train, args.seed)
    try:
        net, losses = train_failure_model(X, y, train_cfg, cfg.failure.hidden)
    except FailureDatasetError as exc:
        raise UserError(str(exc)) from None
    models = _dir(args, "models", cfg)
    meta = {"kind": "failure", "n_samples": len(X), "restarts": cfg.failure.restarts, "n_success": int(y.sum()), "seed": train_cfg.seed,
            "success_threshold": cfg.pipeline.success_threshold, "features": "fitness_1cm,fitness_2cm,rmse_inlier,"
            "dist_mesh_to_scene,dist_scene_to_mesh,R|t row-major"}
    _write_model(models / MODEL_FILES["failure"], lambda p: save_network(p, net, meta))
    write_loss_csv(models / "failure_loss.csv", TrainHistory(losses))
    return EXIT_OK


def cmd_train_attrib(args) -> int:
    cfg = _config(args)
    samples = _load_samples(_dir(args, "dataset", cfg), cases={"noise", "badinit", "occlusion"})
    a = cfg.attribution
    train_cfg = a.train if args.seed is None else _reseed(a.train, args.seed)
    model = AttributionModel.build(a.hidden, a.head_hidden, a.n_points, seed=train_cfg.seed)
    try:
        model, hist = train_attribution([s.observed for s in samples],
                                        [ErrorClass.from_case(s.case) for s in samples], train_cfg, model=model)
    except AttribDatasetError as exc:
        raise UserError(str(exc)) from None
    models = _dir(args, "models", cfg)
    meta = {"n_samples": len(samples), "seed": train_cfg.seed}
    _write_model(models / MODEL_FILES["attribution"], lambda p: model.save(p, meta))
    write_loss_csv(models / "attribution_loss.csv", hist)
    return EXIT_OK


def cmd_train_recon(args) -> int:
    cfg = _config(args)
    samples = _load_samples(_dir(args, "dataset", cfg), cases={"noise"})
    r = cfg.reconstruct
    train_cfg = r.train if args.seed is None else _reseed(r.train, args.seed)
    try:
        model, hist = train_reconstruction([(s.observed, s.clean, s.mesh_cloud) for s in samples],
                                           train_cfg, r.model)
    except ReconstructionError as exc:
        raise UserError(str(exc)) from None
    models = _dir(args, "models", cfg)
    meta = {"n_samples": len(samples), "seed": train_cfg.seed}
    _write_model(models / MODEL_FILES["reconstruction"], lambda p: model.save(p, meta))
    write_loss_csv(models / "reconstruction_loss.csv", hist)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    samples = _load_samples(_dir(args, "dataset", cfg))
    pcfg = load_models(_dir(args, "models", cfg), cfg)
    report = benchmark(samples, pcfg, jobs=args.jobs, with_oracle=args.oracle)
    paths = write_report(report, Path(args.out) if args.out else Path(cfg.paths.reports))
    sys.stdout.write(report.text())
    log.info("reports: %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    try:
        sample = load_sample(args.sample)
    except FileNotFoundError as exc:
        raise UserError(f"missing file: {exc.filename}") from None
    except (DatasetError, InvalidInputError) as exc:
        raise UserError(str(exc)) from None
    pcfg = load_models(_dir(args, "models", cfg), cfg)
    result = run(sample, pcfg)
    sys.stdout.write(json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def _reseed(tc, seed: int):
    import dataclasses

    return dataclasses.replace(tc, seed=seed)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poseloop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, models=True):
        sp.add_argument("--config", help="run configuration JSON (defaults built in)")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory (default: paths.dataset)")
        if models:
            sp.add_argument("--models", help="model directory (default: paths.models)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="run configuration JSON (generation section is used)")
    g.add_argument("--cases", default=",".join(CASES), help="comma-separated subset of %(default)s")
    g.add_argument("--per-case", type=int, default=10, help="samples per case (default %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="base seed (default %(default)s)")
    g.add_argument("--objects", help=f"comma-separated object names (default {','.join(DEFAULT_OBJECTS)})")
    g.add_argument("--out", help="output directory (default: paths.dataset)")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (default %(default)s)")
    g.set_defaults(func=cmd_gen)

    for name, func, what in (("train-failure", cmd_train_failure, "failure predictor"),
                             ("train-attrib", cmd_train_attrib, "error attribution classifier"),
                             ("train-recon", cmd_train_recon, "reconstruction model")):
        t = sub.add_parser(name, help=f"train the {what}")
        common(t)
        t.add_argument("--seed", type=int, help="override the training seed")
        t.set_defaults(func=func)

    b = sub.add_parser("bench", help="benchmark plain ICP against the full pipeline")
    common(b)
    b.add_argument("--out", help="report directory (default: paths.reports)")
    b.add_argument("--jobs", type=int, default=1, help="worker processes (default %(default)s)")
    b.add_argument("--oracle", action="store_true", help="also run with ground-truth attribution")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("run", help="run the pipeline on one sample and print the result as JSON")
    common(r, dataset=False)
    r.add_argument("--sample", required=True, help="path to a samples/<id>.json record")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
