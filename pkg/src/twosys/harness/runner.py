"""Run an experiment config end to end and write its outputs.

Computation and writing are separate: :func:`run_experiment` returns an
:class:`ExperimentResult` and :func:`write_outputs` is the single writer.
Runs are independent (their random streams depend only on the seed and run
index), so executing them in worker processes changes speed, not results.
"""

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..diagnostics import bias_trace, diagnose, mcare
from ..errors import ImproperPosteriorError
from ..samplers.ensemble import run_sampler
from ..samplers.tuning import tune_step_size
from ..targets import RescaledTarget, find_mode, hessian_diag
from .config import build_target, resolve_sampler

log = logging.getLogger(__name__)

DIAGNOSTICS_COLUMNS = (
    "coordinate",
    "mean",
    "variance",
    "reference_mean",
    "reference_variance",
    "ess",
    "ess_between_run",
    "ess_autocorr",
    "ess_per_grad",
    "rhat",
)
BIAS_COLUMNS = ("sweep", "gradients_per_chain", "bias")
INIT_STREAM_TAG = 0x1A17


@dataclass
class ExperimentResult:
    """Everything a run produces before anything is written."""

    config: object
    seed: int
    status: str
    manifest: dict
    records: list = field(default_factory=list)
    samples: np.ndarray = None
    report: object = None
    bias: object = None
    reference: object = None


def input_hash(config, seed):
    """Git-style blob hash of the canonical inputs (config, seed, library version)."""
    payload = json.dumps(
        {"config": config.to_dict(), "seed": int(seed), "version": __version__},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def sampler_label(sampler):
    label = f"{sampler.mode} {sampler.kernel}"
    if sampler.covariance != "full":
        label += f" ({sampler.covariance})"
    return label


def _finite_or_none(v):
    v = float(v)
    return v if math.isfinite(v) else None


def initial_points(config, base, target, run):
    """Start positions of one run in the sampled coordinates."""
    n = config.sampler.particles
    if config.init == "standard-normal":
        rng = np.random.default_rng([int(config.seed), int(run), INIT_STREAM_TAG])
        x = rng.standard_normal((2, n, base.dim))
    else:
        x = base.mode()
        if x is None:
            x = find_mode(base, np.zeros(base.dim))
    if isinstance(target, RescaledTarget):
        x = target.push_forward(x)
    return x


def _execute_run(job):
    """Worker entry point; rebuilds the target so only plain data is pickled."""
    config, sampler, seed, run, scales, init = job
    base = build_target(config.target)
    target = base if scales is None else RescaledTarget(base, scales)
    transform = None if scales is None else target.pull_back
    specs = None
    if config.diagnostics.bias and base.moments is not None and base.moments.bias_specs:
        specs = base.moments.bias_specs
    return run_sampler(target, sampler, seed, run=run, init=init, transform=transform, moment_specs=specs)


def _run_all(jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [_execute_run(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_execute_run, jobs))


def run_experiment(config, seed=None, threads=1):
    """Execute every run of ``config``.

    Steps: build the target; optionally find the mode and rescale by the
    Hessian diagonal there; optionally tune ``h``; resolve ``auto`` lengths;
    run the ``R`` replicates; compute diagnostics on the pooled draws.

    A mode search that diverges (an improper posterior) excludes the
    experiment: the result has ``status == "excluded"`` and no runs.

    Raises:
        ConfigError: the target cannot be built.
        SamplingError, ConvergenceError, FactorizationError: a run failed.
    """
    started = time.perf_counter()
    seed = config.seed if seed is None else int(seed)
    config = config.with_overrides(seed=seed)
    base = build_target(config.target)
    manifest = {
        "format": "twosys-manifest",
        "library_version": __version__,
        "name": config.name,
        "seed": seed,
        "input_hash": input_hash(config, seed),
        "config": config.to_dict(),
        "target": base.describe(),
        "status": "ok",
        "exclusion": None,
        "preprocessing": {},
    }

    target, scales = base, None
    if config.rescale.enabled:
        try:
            mode = find_mode(base, np.zeros(base.dim))
        except ImproperPosteriorError as exc:
            log.warning("excluded: %s", exc)
            manifest.update(status="excluded", exclusion=str(exc), runs=[], summary={}, diagnostics={})
            manifest["wall_clock_seconds"] = time.perf_counter() - started
            return ExperimentResult(config, seed, "excluded", manifest)
        H = np.maximum(hessian_diag(base, mode, fd_step=config.rescale.fd_step), 0.0) + config.rescale.eps
        scales = 1.0 / np.sqrt(H)
        target = RescaledTarget(base, scales)
        manifest["preprocessing"]["mode"] = mode.tolist()
        manifest["preprocessing"]["scales"] = scales.tolist()

    try:
        inits = [initial_points(config, base, target, r) for r in range(config.runs)]
    except ImproperPosteriorError as exc:
        log.warning("excluded: %s", exc)
        manifest.update(status="excluded", exclusion=str(exc), runs=[], summary={}, diagnostics={})
        manifest["wall_clock_seconds"] = time.perf_counter() - started
        return ExperimentResult(config, seed, "excluded", manifest)

    h = config.sampler.h_max
    if config.tuning.enabled:
        t = config.tuning
        h, history = tune_step_size(
            target,
            resolve_sampler(config, t.h_start),
            seed,
            init=inits[0],
            probe_sweeps=t.probe_sweeps,
            h_start=t.h_start,
            target_accept=t.target_accept,
        )
        manifest["preprocessing"]["tuning_history"] = [[float(a), float(b)] for a, b in history]
        log.info("tuned step size h=%.6g after %d probes", h, len(history))
    sampler = resolve_sampler(config, h).validate()
    manifest["sampler"] = asdict(sampler)
    manifest["sampler_label"] = sampler_label(sampler)
    if sampler.kinetic:
        manifest["sampler"]["resolved_eta"] = sampler.resolved_eta

    jobs = [(config, sampler, seed, r, scales, inits[r]) for r in range(config.runs)]
    records = _run_all(jobs, threads)
    samples = np.stack([rec.samples for rec in records])

    manifest["runs"] = [
        {
            "run": rec.run,
            "acceptance_burn_in": _finite_or_none(rec.acceptance_rate("burn_in")),
            "acceptance_sampling": _finite_or_none(rec.acceptance_rate("sampling")),
            "gradients": dict(rec.gradients),
            "resets": list(rec.resets),
            "sample_sha256": hashlib.sha256(np.ascontiguousarray(rec.samples).tobytes()).hexdigest(),
        }
        for rec in records
    ]

    result = ExperimentResult(config, seed, "ok", manifest, records, samples, reference=base.moments)
    _summarise(result, sampler)
    manifest["wall_clock_seconds"] = time.perf_counter() - started
    return result


def _window_gradients(records, sampler, steps_used):
    if steps_used == records[0].samples.shape[1]:
        return sum(rec.gradients["sampling"] for rec in records)
    per_sweep = 2 * sampler.particles * sampler.gradients_per_proposal
    return len(records) * steps_used * sampler.thin * per_sweep


def _summarise(result, sampler):
    config, manifest = result.config, result.manifest
    records, samples = result.records, result.samples
    d = samples.shape[-1]
    diag = config.diagnostics

    summary = {
        "median_ess_per_grad": None,
        "min_ess_per_grad": None,
        "grads_to_low_bias": None,
        "bias_reference": False,
        "max_rhat": None,
        "mcare": None,
        "gradient_total": sum(rec.total_gradients for rec in records),
    }

    if records[0].moment_trace is not None:
        trace = np.mean([rec.moment_trace for rec in records], axis=0)
        result.bias = bias_trace(
            trace,
            result.reference.bias_specs,
            grad_counts=records[0].grad_trace,
            threshold=diag.bias_threshold,
            cumulative=diag.bias_cumulative,
        )
        summary["bias_reference"] = True
        summary["grads_to_low_bias"] = result.bias.crossing_gradients
        summary["final_bias"] = _finite_or_none(result.bias.values[-1])

    T = samples.shape[2]
    if T >= 2:
        steps_used = T if diag.ess_window is None else min(diag.ess_window, T)
        grads = _window_gradients(records, sampler, steps_used)
        report = diagnose(samples, grads, window=steps_used, estimator=diag.ess, between_form=diag.between_run_form)
        result.report = report
        summary.update(
            median_ess_per_grad=_finite_or_none(report.ess_per_grad_median),
            min_ess_per_grad=_finite_or_none(report.ess_per_grad_min),
            max_rhat=_finite_or_none(report.max_rhat),
            ess_estimator=report.estimator,
            ess_window=steps_used,
            window_gradients=int(grads),
            ess_degenerate=report.ess_degenerate,
        )
        if result.reference is not None:
            summary["mcare"] = mcare(report.means, result.reference.mean, result.reference.std)
    manifest["summary"] = summary
    manifest["diagnostics"] = {"rows": d if result.report is not None else 0}


def diagnostics_rows(result):
    """Rows of the diagnostics CSV (strings, fixed column order)."""
    rep = result.report
    if rep is None:
        return []
    ref = result.reference
    rows = []
    for j in range(rep.means.size):
        vals = [
            rep.means[j],
            rep.variances[j],
            ref.mean[j] if ref is not None else float("nan"),
            ref.cov[j, j] if ref is not None else float("nan"),
            rep.ess[j],
            rep.ess_between_run[j],
            rep.ess_autocorr[j],
            rep.ess[j] / rep.gradient_total,
            rep.rhat[j],
        ]
        rows.append([str(j)] + [repr(float(v)) for v in vals])
    return rows


def diagnostics_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAGNOSTICS_COLUMNS)
    w.writerows(diagnostics_rows(result))
    return buf.getvalue()


def bias_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BIAS_COLUMNS)
    if result.bias is not None:
        grads = result.records[0].grad_trace
        for t, v in enumerate(result.bias.values):
            w.writerow([t, int(grads[t]), repr(float(v))])
    return buf.getvalue()


def write_samples(samples, out, fmt):
    """Write ``(runs, chains, steps, dim)`` draws; returns the file names written."""
    out = Path(out)
    if fmt == "binary":
        np.ascontiguousarray(samples, dtype="<f8").tofile(out / "samples.f64")
        sidecar = {
            "file": "samples.f64",
            "dtype": "float64",
            "byte_order": "little",
            "order": "C",
            "axes": ["runs", "chains", "steps", "dim"],
            "shape": list(samples.shape),
        }
        (out / "samples.json").write_text(json.dumps(sidecar, indent=2) + "\n")
        return ["samples.f64", "samples.json"]
    if fmt == "csv":
        R, C, T, d = samples.shape
        with open(out / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "chain", "step"] + [f"x{j}" for j in range(d)])
            for r in range(R):
                for c in range(C):
                    for t in range(T):
                        w.writerow([r, c, t] + [repr(float(v)) for v in samples[r, c, t]])
        return ["samples.csv"]
    return []


def read_samples(out):
    """Load draws written by :func:`write_samples` in binary form."""
    out = Path(out)
    meta = json.loads((out / "samples.json").read_text())
    return np.fromfile(out / meta["file"], dtype="<f8").reshape(meta["shape"])


def write_outputs(result, out, emit_samples="none"):
    """Single writer stage: diagnostics CSV, bias trace, samples and manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if result.status == "ok":
        (out / "diagnostics.csv").write_text(diagnostics_csv(result))
        (out / "bias_trace.csv").write_text(bias_csv(result))
        files += ["diagnostics.csv", "bias_trace.csv"]
        files += write_samples(result.samples, out, emit_samples)
    result.manifest["files"] = files
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2, allow_nan=False, default=_json_default) + "\n")
    return out / "manifest.json"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
