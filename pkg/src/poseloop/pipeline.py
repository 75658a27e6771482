"""Estimate, check, attribute, mitigate: the end-to-end loop and its benchmark harness."""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attribution import AttributionModel, ErrorClass, classify
from .boicp import BoConfig, SearchBounds, bo_icp
from .failure import (
    ConfusionMatrix,
    SuccessPrediction,
    confusion,
    extract_features,
    label_by_add,
    predict_success,
)
from .geometry import NearestNeighbors, RigidTransform
from .metrics import add_error, alignment_report
from .nnet import Network
from .reconstruct import ReconstructionModel
from .registration import IcpConfig, IcpResult, icp_or_last
from .simscene import (
    CASES,
    NoViewError,
    SceneSample,
    Viewpoint,
    hemisphere_candidates,
    next_best_view,
    visibility,
)

MITIGATION = {ErrorClass.NOISE: "reconstruct", ErrorClass.BAD_INIT: "bo_icp", ErrorClass.OCCLUSION: "nbv"}
TAGS = ("none", "reconstruct", "bo_icp", "nbv")
STAGES = ("icp", "predict", "attribute", "mitigate")
ORACLES = ("true_class", "always_reconstruct", "always_bo_icp", "always_nbv")
ARBITRATION = "highest predicted success probability among attempts"


@dataclass
class PipelineConfig:
    failure_model: Network
    attribution_model: AttributionModel
    recon_model: ReconstructionModel
    icp_config: IcpConfig = field(default_factory=IcpConfig)
    failure_threshold: float = 0.5
    success_threshold: float = 0.01
    bounds: SearchBounds = field(default_factory=SearchBounds)
    bo_config: BoConfig = field(default_factory=BoConfig)
    nbv_candidates: list[Viewpoint] | None = None  # None: default ring around the recorded look-at point
    nbv_visibility_samples: int = 512
    max_mitigation_rounds: int = 1

    def __post_init__(self):
        if not 0 <= self.failure_threshold <= 1:
            raise ValueError("failure_threshold must lie in [0, 1]")
        if not self.success_threshold > 0:
            raise ValueError("success_threshold must be positive")
        if self.max_mitigation_rounds < 0:
            raise ValueError("max_mitigation_rounds must be >= 0")


@dataclass
class Attempt:
    tag: str
    icp: IcpResult
    features: np.ndarray
    prediction: SuccessPrediction
    cloud: np.ndarray

    def to_dict(self) -> dict:
        return {"tag": self.tag, "probability": self.prediction.probability,
                "predicted_success": self.prediction.label, "fitness": self.icp.fitness,
                "inlier_rmse": self.icp.inlier_rmse, "transform": self.icp.transform.to_dict()}


@dataclass
class PipelineResult:
    case: str
    object_name: str
    seed: int
    initial: IcpResult
    features: np.ndarray
    prediction: SuccessPrediction
    attributed: ErrorClass | None
    class_probabilities: tuple[float, float, float] | None
    mitigation: str
    final_transform: RigidTransform
    final_prediction: SuccessPrediction
    add_initial: float
    add_final: float
    success: bool
    timings: dict[str, float]
    attempts: list[Attempt] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    visibility_before: float | None = None
    visibility_after: float | None = None
    success_threshold: float = 0.01

    @property
    def initial_success(self) -> bool:
        return label_by_add(self.add_initial, self.success_threshold)

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "case": self.case,
            "object": self.object_name,
            "seed": self.seed,
            "initial": {"fitness": self.initial.fitness, "inlier_rmse": self.initial.inlier_rmse,
                        "iterations": self.initial.iterations_used, "converged": self.initial.converged,
                        "transform": self.initial.transform.to_dict()},
            "features": [float(v) for v in self.features],
            "prediction": {"probability": self.prediction.probability, "success": self.prediction.label},
            "attributed": None if self.attributed is None else self.attributed.case,
            "class_probabilities": None if self.class_probabilities is None else list(self.class_probabilities),
            "mitigation": self.mitigation,
            "attempts": [a.to_dict() for a in self.attempts],
            "final_transform": self.final_transform.to_dict(),
            "final_prediction": {"probability": self.final_prediction.probability,
                                 "success": self.final_prediction.label},
            "add_initial": self.add_initial,
            "add_final": self.add_final,
            "success_threshold": self.success_threshold,
            "success": self.success,
            "errors": list(self.errors),
            "visibility_before": self.visibility_before,
            "visibility_after": self.visibility_after,
            "arbitration": ARBITRATION,
        }
        if timings:
            d["timings_ms"] = {k: 1000.0 * v for k, v in self.timings.items()}
        return d


def _attempt(tag: str, P_M: np.ndarray, cloud: np.ndarray, result: IcpResult, config: PipelineConfig,
             index: NearestNeighbors | None = None) -> Attempt:
    index = index or NearestNeighbors(cloud)
    report = alignment_report(result.transform.apply(P_M), cloud, index)
    f = extract_features(result, report)
    return Attempt(tag, result, f, predict_success(config.failure_model, f, config.failure_threshold), cloud)


def nbv_candidates(sample: SceneSample, config: PipelineConfig) -> list[Viewpoint]:
    if config.nbv_candidates is not None:
        return list(config.nbv_candidates)
    return hemisphere_candidates(sample.viewpoint.radius, look_at=tuple(sample.viewpoint.look_at))


def mitigate(tag: str, sample: SceneSample, cloud: np.ndarray, config: PipelineConfig,
             result: PipelineResult) -> Attempt:
    """Run one mitigation strategy on ``cloud``; returns the resulting attempt."""
    P_M = sample.mesh_cloud
    if tag == "reconstruct":
        fixed = config.recon_model.reconstruct(cloud, P_M)
        index = NearestNeighbors(fixed)
        est = icp_or_last(P_M, None, sample.init_pose, config.icp_config, index)
        return _attempt(tag, P_M, fixed, est, config, index)
    if tag == "bo_icp":
        index = NearestNeighbors(cloud)
        bo_cfg = BoConfig(**{**config.bo_config.__dict__, "seed": sample.seed})
        best, _trace = bo_icp(P_M, cloud, config.bounds, bo_cfg)
        est = icp_or_last(P_M, None, best.transform, config.icp_config, index)
        return _attempt(tag, P_M, cloud, est, config, index)
    if tag == "nbv":
        scene = sample.scene()
        vp, rendering, scores = next_best_view(scene, nbv_candidates(sample, config),
                                               config.nbv_visibility_samples, sample.seed,
                                               render_rays=sample.n_rays, aperture=sample.aperture)
        result.visibility_before = visibility(scene, sample.viewpoint, config.nbv_visibility_samples,
                                              sample.seed)
        result.visibility_after = float(max(scores))
        new = rendering.points
        index = NearestNeighbors(new)
        est = icp_or_last(P_M, None, sample.init_pose, config.icp_config, index)
        return _attempt(tag, P_M, new, est, config, index)
    raise ValueError(f"unknown mitigation {tag!r}")


def _run(sample: SceneSample, config: PipelineConfig, oracle: str | None = None) -> PipelineResult:
    timings = dict.fromkeys(STAGES, 0.0)
    P_M = sample.mesh_cloud
    t0 = time.perf_counter()
    index = NearestNeighbors(sample.observed)
    initial = icp_or_last(P_M, None, sample.init_pose, config.icp_config, index)
    timings["icp"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    first = _attempt("none", P_M, sample.observed, initial, config, index)
    timings["predict"] = time.perf_counter() - t0

    result = PipelineResult(
        case=sample.case, object_name=sample.object_name, seed=sample.seed, initial=initial,
        features=first.features, prediction=first.prediction, attributed=None, class_probabilities=None,
        mitigation="none", final_transform=initial.transform, final_prediction=first.prediction,
        add_initial=add_error(P_M, sample.gt_pose, initial.transform), add_final=0.0, success=False,
        timings=timings, attempts=[first], success_threshold=config.success_threshold,
    )
    current = first
    for _ in range(config.max_mitigation_rounds):
        if current.prediction.label:
            break
        t0 = time.perf_counter()
        if oracle is None:
            probs = classify(config.attribution_model, current.cloud)
            cls = probs.argmax
            result.class_probabilities = tuple(float(v) for v in probs.values)
        elif oracle == "true_class":
            cls = ErrorClass.from_case(sample.case) if sample.case != "clean" else None
        else:
            tag = oracle.removeprefix("always_")
            cls = next(c for c, t in MITIGATION.items() if t == tag)
        timings["attribute"] += time.perf_counter() - t0
        if cls is None:
            break
        result.attributed = cls
        result.mitigation = MITIGATION[cls]
        t0 = time.perf_counter()
        try:
            current = mitigate(result.mitigation, sample, current.cloud, config, result)
            result.attempts.append(current)
        except (NoViewError, ValueError, ArithmeticError) as exc:
            result.errors.append(f"{result.mitigation}: {exc}")
            timings["mitigate"] += time.perf_counter() - t0
            break
        timings["mitigate"] += time.perf_counter() - t0

    # first attempt wins ties, so an unhelpful mitigation never displaces the initial estimate
    best = max(result.attempts, key=lambda a: a.prediction.probability)
    result.final_transform = best.icp.transform
    result.final_prediction = best.prediction
    result.add_final = add_error(P_M, sample.gt_pose, best.icp.transform)
    result.success = label_by_add(result.add_final, config.success_threshold)
    return result


def run(sample: SceneSample, config: PipelineConfig) -> PipelineResult:
    return _run(sample, config)


def oracle_run(sample: SceneSample, config: PipelineConfig, oracle: str = "true_class") -> PipelineResult:
    """Like :func:`run` with the attribution stage replaced by ``oracle``."""
    if oracle not in ORACLES:
        raise ValueError(f"unknown oracle {oracle!r}; choose from {ORACLES}")
    return _run(sample, config, oracle)


def plain_icp(sample: SceneSample, config: IcpConfig | None = None) -> float:
    """ADD of a single ICP run from the sample's hypothesis."""
    est = icp_or_last(sample.mesh_cloud, sample.observed, sample.init_pose, config)
    return add_error(sample.mesh_cloud, sample.gt_pose, est.transform)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class CaseRow:
    case: str
    n: int
    icp_successes: int
    pipeline_successes: int
    oracle_successes: int | None = None

    @property
    def icp_rate(self) -> Fraction:
        return Fraction(self.icp_successes, self.n)

    @property
    def pipeline_rate(self) -> Fraction:
        return Fraction(self.pipeline_successes, self.n)

    def to_dict(self) -> dict:
        d = {"case": self.case, "n": self.n,
             "icp_successes": self.icp_successes, "icp_rate": str(self.icp_rate),
             "pipeline_successes": self.pipeline_successes, "pipeline_rate": str(self.pipeline_rate)}
        if self.oracle_successes is not None:
            d["oracle_successes"] = self.oracle_successes
            d["oracle_rate"] = str(Fraction(self.oracle_successes, self.n))
        return d


@dataclass
class BenchmarkReport:
    rows: list[CaseRow]
    failure_confusion: ConfusionMatrix
    attribution_confusion: np.ndarray  # (3, 3) true class x predicted class, attributed error scenes only
    results: list[PipelineResult]
    mitigation_counts: dict[str, int]

    @property
    def attribution_accuracy(self) -> float | None:
        n = int(self.attribution_confusion.sum())
        return None if n == 0 else float(np.trace(self.attribution_confusion)) / n

    def confusion_rate(self, true: ErrorClass, pred: ErrorClass) -> float | None:
        n = int(self.attribution_confusion[true].sum())
        return None if n == 0 else float(self.attribution_confusion[true, pred]) / n

    def to_dict(self) -> dict:
        cm = self.attribution_confusion
        return {
            "rows": [r.to_dict() for r in self.rows],
            "failure_confusion": self.failure_confusion.to_dict(),
            "attribution": {
                "class_order": [c.case for c in ErrorClass],
                "confusion": cm.tolist(),
                "accuracy": self.attribution_accuracy,
                "badinit_as_occlusion": self.confusion_rate(ErrorClass.BAD_INIT, ErrorClass.OCCLUSION),
                "occlusion_as_badinit": self.confusion_rate(ErrorClass.OCCLUSION, ErrorClass.BAD_INIT),
            },
            "mitigation_counts": self.mitigation_counts,
            "arbitration": ARBITRATION,
            "results": [r.to_dict(timings=False) for r in self.results],
        }

    def timing_summary(self) -> dict:
        out = {}
        for stage in STAGES:
            vals = [r.timings[stage] for r in self.results]
            out[f"{stage}_mean_ms"] = 1000.0 * float(np.mean(vals)) if vals else 0.0
        return out

    def text(self) -> str:
        lines = [f"{'case':<10} {'n':>4}  {'ICP success':>12}  {'ICP&Mitigation':>14}"]
        for r in self.rows:
            lines.append(f"{r.case:<10} {r.n:>4}  {float(r.icp_rate):>12.2%}  {float(r.pipeline_rate):>14.2%}")
        lines.append("")
        lines.append(self.failure_confusion.report("failure predictor (initial ICP estimate)").rstrip())
        lines.append("")
        lines.append("attribution confusion (rows true, columns predicted: noise badinit occlusion)")
        for c in ErrorClass:
            lines.append(f"  {c.case:<10} " + " ".join(f"{v:>5d}" for v in self.attribution_confusion[c]))
        acc = self.attribution_accuracy
        lines.append(f"attribution accuracy: {'n/a' if acc is None else f'{acc:.4f}'}")
        for a, b in ((ErrorClass.BAD_INIT, ErrorClass.OCCLUSION), (ErrorClass.OCCLUSION, ErrorClass.BAD_INIT)):
            rate = self.confusion_rate(a, b)
            lines.append(f"  {a.case} -> {b.case}: {'n/a' if rate is None else f'{rate:.4f}'}")
        lines.append(f"final estimate when mitigation is still predicted to fail: {ARBITRATION}")
        return "\n".join(lines) + "\n"


def _bench_one(args):
    sample, config, with_oracle = args
    res = run(sample, config)
    oracle = oracle_run(sample, config, "true_class").success if with_oracle else None
    return res, oracle


def benchmark(samples, config: PipelineConfig, jobs: int = 1, with_oracle: bool = False) -> BenchmarkReport:
    """Run the pipeline on every sample; aggregation follows input order."""
    samples = list(samples)
    work = [(s, config, with_oracle) for s in samples]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_bench_one, work))
    else:
        outs = [_bench_one(w) for w in work]
    results = [o[0] for o in outs]
    rows = []
    for case in CASES:
        idx = [i for i, s in enumerate(samples) if s.case == case]
        if not idx:
            continue
        rows.append(CaseRow(
            case, len(idx),
            sum(results[i].initial_success for i in idx),
            sum(results[i].success for i in idx),
            sum(bool(outs[i][1]) for i in idx) if with_oracle else None,
        ))
    fc = confusion([r.prediction.label for r in results], [r.initial_success for r in results])
    cm = np.zeros((3, 3), dtype=np.int64)
    for s, r in zip(samples, results):
        if s.case != "clean" and r.class_probabilities is not None:
            cm[ErrorClass.from_case(s.case), int(np.argmax(r.class_probabilities))] += 1
    counts = {t: sum(r.mitigation == t for r in results) for t in TAGS}
    return BenchmarkReport(rows, fc, cm, results, counts)


def write_report(report: BenchmarkReport, out_dir) -> dict:
    """Write ``report.txt``, ``report.json`` and the separate ``timings.json``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / "report.txt", "json": out / "report.json", "timings": out / "timings.json"}
    paths["text"].write_text(report.text())
    paths["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    paths["timings"].write_text(json.dumps(report.timing_summary(), sort_keys=True, indent=1) + "\n")
    return paths
