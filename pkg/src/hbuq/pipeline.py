"""End-to-end runs: generate, calibrate, predict and report.

Every artifact records a hash of the configuration that produced it, and
every random stream is derived from the global seed by a fixed spawn key,
so results do not depend on the number of worker processes.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    GeneratorConfig,
    ShearTwinConfig,
    load_record,
    save_json,
    save_record,
    split_segments,
    synthesize_prediction_case,
    synthesize_sdof_dataset,
    synthesize_shear_dataset,
)
from .errors import HbuqError, InvalidConfig, MissingArtifacts, TooFewSegments
from .hyper import HyperParameters, init_hyper, optimize_hyper
from .model import QUANTITIES, spec_from_dict
from .prediction import (
    PredictionConfig,
    credible_band,
    predictive_moments,
    sample_parameters,
    write_prediction,
)
from .segment import OptimizerOptions, infer_segment

MIN_CONVERGED_FRACTION = 0.9

# spawn keys of the per-task random streams
SEGMENT_STREAM = 1


@dataclass
class PipelineConfig:
    model: dict
    data: dict
    segmentation: dict
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    hyper: dict = field(default_factory=lambda: {"reference": "median"})
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerOptions(**self.optimizer)
        if isinstance(self.prediction, dict):
            self.prediction = PredictionConfig(**self.prediction)

    @classmethod
    def from_dict(cls, d):
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None
        return cfg.validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def validate(self):
        if ("generator" in self.data) == ("source" in self.data):
            raise InvalidConfig("data needs exactly one of 'generator' or 'source'")
        try:
            self.spec = spec_from_dict(self.model)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad model: {exc}") from None
        if "generator" in self.data:
            self.generator_config()
        for key in ("segment_seconds", "n_segments"):
            if key not in self.segmentation:
                raise InvalidConfig(f"segmentation needs '{key}'")
        if not self.segmentation["segment_seconds"] > 0:
            raise InvalidConfig("segment_seconds must be positive")
        if int(self.segmentation["n_segments"]) < 2:
            raise TooFewSegments("at least two segments are required")
        ref = self.hyper.get("reference", "median")
        if ref != "median" and not isinstance(ref, int):
            raise InvalidConfig("hyper reference must be 'median' or a segment index")
        if int(self.workers) < 1:
            raise InvalidConfig("workers must be at least 1")
        self.prediction.validate()
        return self

    def generator_config(self):
        g = dict(self.data["generator"])
        kind = g.get("kind", "sdof")
        cfg = GeneratorConfig.from_dict(g) if kind == "sdof" else ShearTwinConfig.from_dict(g)
        cfg.seed = self.seed
        if kind == "sdof":
            cfg.validate()
        else:
            cfg.validate(self.spec)
        return cfg

    def to_dict(self):
        return {
            "model": self.model,
            "data": self.data,
            "segmentation": self.segmentation,
            "optimizer": asdict(self.optimizer),
            "hyper": self.hyper,
            "prediction": self.prediction.to_dict(),
            "seed": self.seed,
            "workers": self.workers,
            "out": self.out,
        }

    def config_hash(self):
        """SHA-256 of everything that affects results (not workers or out)."""
        d = self.to_dict()
        d.pop("workers")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _provenance(config):
    return {"config_hash": config.config_hash(), "seed": config.seed, "version": __version__}


def _load_checked(path, config, what):
    path = Path(path)
    if not path.exists():
        raise MissingArtifacts(f"{what} not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    got = d.get("provenance", {}).get("config_hash")
    if got != config.config_hash():
        raise InvalidConfig(f"{what} {path} was produced by a different configuration")
    return d


def load_data(config):
    """The full record, regenerated deterministically or read from disk."""
    if "generator" in config.data:
        g = config.generator_config()
        if isinstance(g, GeneratorConfig):
            return synthesize_sdof_dataset(g, return_truth=True)
        return synthesize_shear_dataset(config.spec, g, return_truth=True)
    return load_record(config.data["source"]), None


def _truth_summary(truth):
    out = {"noise_std": truth["noise_std"], "block_samples": truth["block_samples"]}
    if "block_frequencies" in truth:
        out["block_parameters"] = truth["block_frequencies"][:, None].tolist()
    else:
        out["block_parameters"] = truth["block_thetas"].tolist()
    return out


def cmd_generate(config):
    """Write the synthetic record and its ground-truth sidecar."""
    if "generator" not in config.data:
        raise InvalidConfig("generate needs a 'generator' data section")
    record, truth = load_data(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    save_record(record, out / "record.csv")
    save_json({"provenance": _provenance(config), **_truth_summary(truth)}, out / "truth.json")
    return out / "record.csv"


def segment_seed(seed, index):
    ss = np.random.SeedSequence(seed, spawn_key=(SEGMENT_STREAM, index))
    return int(ss.generate_state(1)[0])


def _segment_task(args):
    index, segment, spec, options = args
    t0 = time.perf_counter()
    try:
        post = infer_segment(segment, spec, options=options)
        return index, post, None, time.perf_counter() - t0
    except (HbuqError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


def run_segments(segments, spec, options, seed, workers=1):
    """Per-segment inference; results come back in segment order.

    Failures are returned as ``(index, None, message, seconds)`` rather than
    raised so one bad segment cannot abort the run.
    """
    tasks = []
    for i, seg in enumerate(segments):
        opts = OptimizerOptions(**{**asdict(options), "seed": segment_seed(seed, i)})
        tasks.append((i, seg, spec, opts))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_segment_task, tasks))
    return [_segment_task(t) for t in tasks]


def _segment_entry(index, offset, post, error):
    entry = {"index": index, "offset": offset}
    if post is None:
        entry.update(status="failed", error=error)
    else:
        entry.update(status="converged", std=np.sqrt(np.diag(post.cov_theta)).tolist(),
                     **post.to_dict())
    return entry


def calibrate(config):
    """Segment inference followed by hyper-parameter estimation.

    Returns ``(report, exit_code, timing)``; the report holds no timings so
    it is reproducible bit for bit.
    """
    t0 = time.perf_counter()
    record, truth = load_data(config)
    seg_len = int(round(config.segmentation["segment_seconds"] / record.dt))
    segments = split_segments(record, seg_len, config.segmentation["n_segments"])
    results = run_segments(segments.segments, config.spec, config.optimizer, config.seed,
                           config.workers)
    t_seg = time.perf_counter() - t0
    entries = [_segment_entry(i, segments.offsets[i], post, err) for i, post, err, _ in results]
    posts = [post for _, post, _, _ in results if post is not None]
    n_conv = len(posts)
    report = {
        "provenance": _provenance(config),
        "parameter_names": list(config.spec.parameter_names),
        "segment_samples": seg_len,
        "segments": entries,
    }
    if n_conv < 2:
        raise TooFewSegments(f"only {n_conv} segments converged; need at least two")
    ref = config.hyper.get("reference", "median")
    ref = None if ref == "median" else int(ref)
    mu0, S0 = init_hyper(posts, ref)
    fit = optimize_hyper(posts, (mu0, S0))
    names = config.spec.parameter_names
    report["hyper"] = {
        "initial": HyperParameters(mu0, S0).to_dict(names),
        "map": fit.params.to_dict(names),
        "objective": fit.objective,
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "message": fit.message,
    }
    fraction = n_conv / len(entries)
    code = 0 if (fraction >= MIN_CONVERGED_FRACTION and fit.converged) else 1
    report["summary"] = {"n_segments": len(entries), "n_converged": n_conv,
                         "converged_fraction": fraction, "exit_code": code}
    if truth is not None:
        report["truth"] = _truth_summary(truth)
    timing = {"segments_seconds": t_seg, "total_seconds": time.perf_counter() - t0,
              "per_segment_seconds": [r[3] for r in results]}
    return report, code, timing


def cmd_calibrate(config):
    report, code, timing = calibrate(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    save_json(report, out / "report.json")
    save_json({"provenance": report["provenance"], **report["hyper"]["map"]}, out / "hyper.json")
    save_json(timing, out / "timing.json")
    return report, code


def load_hyper(path, config):
    d = _load_checked(path, config, "hyper file")
    return HyperParameters.from_dict(d)


def predict(config, hyper):
    """Sample, propagate and summarize under a fresh input.

    With a generator data section the truth of the same event is simulated
    as well and the band coverage per quantity is returned.
    """
    pc = config.prediction
    spec = config.spec
    samples = sample_parameters(hyper, pc.n_samples, config.seed, spec)
    if "generator" in config.data:
        g = config.generator_config()
        u, truth, theta_true = synthesize_prediction_case(g, spec, pc.duration, config.seed)
        dt = g.dt
    else:
        record = load_record(config.data["source"])
        dt = record.dt
        n = int(round(pc.duration / dt))
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
        u = rng.standard_normal(n) * np.std(record.inputs)
        truth = theta_true = None
    n = u.shape[-1]
    summary = predictive_moments(samples, spec, None, u, dt, n, pc.alpha0, pc.beta0,
                                 workers=config.workers)
    summary.metadata["provenance"] = _provenance(config)
    coverage = None
    if truth is not None:
        bands = credible_band(summary, pc.level)
        coverage = {}
        for q in QUANTITIES:
            x = truth.quantity(q)
            lo, hi = bands[q]
            coverage[q] = float(np.mean((lo <= x) & (x <= hi)))
        summary.metadata["truth_theta"] = np.asarray(theta_true).tolist()
        summary.metadata["coverage"] = coverage
    return summary, truth, coverage


def cmd_predict(config, hyper_path):
    hyper = load_hyper(hyper_path, config)
    summary, truth, coverage = predict(config, hyper)
    out = Path(config.out)
    paths = write_prediction(summary, out, config.prediction.level)
    if truth is not None:
        np.savetxt(out / "prediction_truth.csv",
                   np.column_stack([summary.time] + [truth.quantity(q).T for q in QUANTITIES]),
                   delimiter=",", header="t," + ",".join(
                       f"{q}{j}" for q in QUANTITIES for j in range(truth.displacement.shape[0])),
                   comments="")
    return paths, coverage


def format_hyper_table(hyper_dict):
    """Text table: mean and std per parameter, then upper-triangular
    correlation coefficients."""
    names = hyper_dict.get("names") or [f"p{i}" for i in range(len(hyper_dict["mean"]))]
    d = len(names)
    mean = np.asarray(hyper_dict["mean"])
    cov = np.asarray(hyper_dict["cov"]).reshape(d, d)
    hp = HyperParameters(mean, cov)
    width = max(8, max(len(n) for n in names) + 2)
    lines = [f"{'param':<{width}}{'mean':>12}{'std':>12}"]
    for name, m, s in zip(names, hp.mean, hp.std):
        lines.append(f"{name:<{width}}{m:>12.5g}{s:>12.5g}")
    if d > 1:
        lines.append("")
        lines.append("correlation coefficients")
        R = hp.corr
        for p in range(d):
            for q in range(p + 1, d):
                lines.append(f"  rho({names[p]}, {names[q]}) = {R[p, q]: .4f}")
    return "\n".join(lines)


def cmd_report(run_dir):
    run_dir = Path(run_dir)
    path = run_dir / "report.json"
    if not path.exists():
        raise MissingArtifacts(f"no report.json in {run_dir}")
    with open(path) as fh:
        report = json.load(fh)
    if "hyper" not in report or "summary" not in report:
        raise MissingArtifacts(f"{path} is incomplete")
    s = report["summary"]
    lines = [
        f"config {report['provenance']['config_hash'][:12]}  seed {report['provenance']['seed']}",
        f"segments: {s['n_converged']}/{s['n_segments']} converged "
        f"({report['segment_samples']} samples each)",
    ]
    failed = [e for e in report["segments"] if e["status"] != "converged"]
    for e in failed:
        lines.append(f"  segment {e['index']} failed: {e['error']}")
    h = report["hyper"]
    lines += ["", f"hyper MAP ({'converged' if h['converged'] else 'NOT converged'}, "
                  f"{h['n_iter']} iterations)", format_hyper_table(h["map"])]
    lines += ["", "closed-form start", format_hyper_table(h["initial"])]
    return "\n".join(lines)
