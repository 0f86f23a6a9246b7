"""Experiment configuration files.

A config is a YAML document with a ``version`` key and the sections below.
Unknown keys anywhere are errors, reported with their dotted path::

    version: 1
    name: synthetic-gaussian
    seed: 2024
    runs: 4
    init: mode                    # mode | standard-normal
    target:
      name: gaussian              # gaussian | student-t | funnel
      dim: 20
      eig_min: 0.01               # precision eigenvalues, linearly spaced
      eig_max: 100.0
      spd_seed: 7                 # rotation of the eigenbasis
      precision: null             # explicit matrix overrides the above
    sampler:                      # SamplerConfig fields; see below for "auto"
      mode: adaptive-2sys
      kernel: makla
      h_max: 0.25
      burn_in: auto
      ...
    step_randomization: {enabled: false, beta: 0.5}
    tuning: {enabled: false, probe_sweeps: 200, h_start: 1.0, target_accept: null}
    rescale: {enabled: false, eps: 1.0e-8, fd_step: 1.0e-4}
    diagnostics: {ess_window: null, ess: auto, between_run_form: calibrated, bias: true, bias_cumulative: true, bias_threshold: 0.01}
    output: {dir: results, emit_samples: none}

``burn_in``, ``sweeps``, ``thin`` and ``restart_period`` accept ``auto``,
which resolves against the final step size ``h`` as ``2000 k``, ``4000 k``,
``k`` and ``200 k`` with ``k = ceil(1 / h)``.
"""

import math
from dataclasses import asdict
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..errors import ConfigError, DataError, FactorizationError
from ..linalg import random_spd
from ..samplers.ensemble import SamplerConfig
from ..targets import gaussian_target, neals_funnel, student_t_target

CONFIG_VERSION = 1
TARGET_NAMES = ("gaussian", "student-t", "funnel")
AUTO_FACTORS = {"burn_in": 2000, "sweeps": 4000, "thin": 1, "restart_period": 200}

Auto = Literal["auto"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TargetSpec(_Section):
    name: Literal["gaussian", "student-t", "funnel"] = "gaussian"
    dim: int = Field(2, ge=1)
    eig_min: float = Field(0.01, gt=0)
    eig_max: float = Field(100.0, gt=0)
    spd_seed: int = Field(0, ge=0)
    precision: Optional[List[List[float]]] = None
    nu: float = 5.0
    sigma: float = Field(3.0, gt=0)


class SamplerSpec(_Section):
    mode: Literal["vanilla", "coupled", "adaptive-1sys", "adaptive-2sys"] = "adaptive-2sys"
    kernel: Literal["mala", "truncated-mala", "makla"] = "makla"
    covariance: Literal["full", "diagonal"] = "full"
    h_max: float = 0.5
    leapfrog_L: int = 1
    eta: Optional[float] = None
    gamma: float = 1.0 / 16.0
    eta_convention: Literal["paper-literal", "persistence"] = "paper-literal"
    jitter_eps: float = 1e-6
    drift_delta: float = 1e3
    cov_cap: float = 1e6
    particles: int = 10
    burn_in: Union[int, Auto] = 1000
    sweeps: Union[int, Auto] = 1000
    thin: Union[int, Auto] = 1
    restart_period: Union[int, Auto] = 100
    restart_last: Optional[int] = None
    restart_kind: Literal["hard", "soft"] = "hard"
    step_draw: Literal["particle", "sweep"] = "particle"
    cov_ddof: Literal[0, 1] = 1


class StepRandomization(_Section):
    enabled: bool = False
    beta: float = Field(0.5, gt=0, le=1)


class TuningSpec(_Section):
    enabled: bool = False
    probe_sweeps: int = Field(200, ge=2)
    h_start: float = Field(1.0, gt=0)
    target_accept: Optional[float] = Field(None, gt=0, lt=1)


class RescaleSpec(_Section):
    enabled: bool = False
    eps: float = Field(1e-8, ge=0)
    fd_step: float = Field(1e-4, gt=0)


class DiagnosticsSpec(_Section):
    ess_window: Optional[int] = Field(None, ge=2)
    ess: Literal["auto", "between-run", "autocorrelation"] = "auto"
    between_run_form: Literal["calibrated", "literal"] = "calibrated"
    bias: bool = True
    bias_cumulative: bool = True
    bias_threshold: float = Field(0.01, gt=0)


class OutputSpec(_Section):
    dir: str = "results"
    emit_samples: Literal["none", "binary", "csv"] = "none"


class ExperimentConfig(_Section):
    version: Literal[1] = CONFIG_VERSION
    name: str = "experiment"
    seed: int = Field(0, ge=0, lt=2**64)
    runs: int = Field(4, ge=1)
    init: Literal["mode", "standard-normal"] = "mode"
    target: TargetSpec = TargetSpec()
    sampler: SamplerSpec = SamplerSpec()
    step_randomization: StepRandomization = StepRandomization()
    tuning: TuningSpec = TuningSpec()
    rescale: RescaleSpec = RescaleSpec()
    diagnostics: DiagnosticsSpec = DiagnosticsSpec()
    output: OutputSpec = OutputSpec()

    def to_dict(self):
        return self.model_dump(mode="python")

    def with_overrides(self, **changes):
        return self.model_copy(update=changes)


def _schema_errors(exc):
    out = []
    for err in exc.errors():
        loc = [str(p) for p in err["loc"] if not str(p).startswith(("int", "literal", "float", "list"))]
        # union members add their type to the location; keep the field path only
        out.append((".".join(loc) or "<root>", err["msg"]))
    # one entry per path, first message wins
    seen, unique = set(), []
    for path, msg in out:
        if path not in seen:
            seen.add(path)
            unique.append((path, msg))
    return unique


def schema_violations(data):
    """``(path, message)`` pairs for a raw mapping; empty when it parses."""
    if not isinstance(data, dict):
        return [("<root>", "config must be a mapping")]
    if "version" not in data:
        return [("version", "missing required versioning key")]
    try:
        ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        return _schema_errors(exc)
    return []


def from_dict(data):
    problems = schema_violations(data)
    if problems:
        path, msg = problems[0]
        raise ConfigError(path, msg)
    return ExperimentConfig.model_validate(data)


def parse_config(text):
    """Parse YAML text into an :class:`ExperimentConfig`.

    Raises:
        ConfigError: malformed YAML or a schema violation (with its path).
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from None
    return from_dict(data)


def serialize_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=False)


def load_raw(path):
    """Read a config file (or a shipped preset by name) as text."""
    p = Path(path)
    if p.exists():
        return p.read_text()
    shipped = shipped_config_path(str(path))
    if shipped is not None:
        return shipped.read_text()
    raise ConfigError("<file>", f"no such config file: {path}")


def load_config(path):
    return parse_config(load_raw(path))


def shipped_configs():
    """Names of the presets bundled with the package."""
    root = Path(__file__).resolve().parent.parent / "configs"
    return sorted(p.stem for p in root.glob("*.cfg"))


def shipped_config_path(name):
    root = Path(__file__).resolve().parent.parent / "configs"
    stem = name[:-4] if name.endswith(".cfg") else name
    p = root / f"{stem}.cfg"
    return p if p.exists() else None


def build_target(spec):
    """Instantiate the target described by a :class:`TargetSpec`."""
    if spec.name == "funnel":
        return neals_funnel(spec.dim, spec.sigma)
    if spec.precision is not None:
        A = np.asarray(spec.precision, dtype=float)
        if A.shape != (spec.dim, spec.dim):
            raise ConfigError("target.precision", f"expected a {spec.dim}x{spec.dim} matrix, got shape {A.shape}")
    else:
        if spec.eig_min > spec.eig_max:
            raise ConfigError("target.eig_min", f"eig_min ({spec.eig_min}) exceeds eig_max ({spec.eig_max})")
        A = random_spd(spec.dim, spec.eig_min, spec.eig_max, seed=spec.spd_seed)
    try:
        if spec.name == "gaussian":
            return gaussian_target(A)
        return student_t_target(A, spec.nu)
    except FactorizationError as exc:
        raise ConfigError("target.precision", str(exc)) from None
    except DataError as exc:
        field = "target.nu" if "nu" in str(exc) else "target.precision"
        raise ConfigError(field, str(exc)) from None


def auto_multiplier(h):
    return math.ceil(1.0 / h)


def resolve_sampler(config, h=None):
    """Effective :class:`SamplerConfig` for step size ``h`` (default ``h_max``).

    ``auto`` lengths are resolved against ``h``; step randomization sets
    ``beta`` (``1`` when disabled).
    """
    s = config.sampler
    h = s.h_max if h is None else h
    k = auto_multiplier(h)
    fields = s.model_dump()
    for name, factor in AUTO_FACTORS.items():
        if fields[name] == "auto":
            fields[name] = factor * k
    fields["h_max"] = float(h)
    fields["beta"] = config.step_randomization.beta if config.step_randomization.enabled else 1.0
    return SamplerConfig(**fields)


def config_violations(config):
    """Semantic checks beyond the schema: SPD target, sampler constraints."""
    problems = []
    try:
        build_target(config.target)
    except ConfigError as exc:
        problems.append((exc.path, str(exc).split(": ", 1)[1]))
    try:
        sampler = resolve_sampler(config)
    except (TypeError, ValueError) as exc:
        return problems + [("sampler", str(exc))]
    problems += [(f"sampler.{name}", msg) for name, msg in sampler.violations()]
    if config.diagnostics.ess == "between-run" and config.runs < 2:
        problems.append(("diagnostics.ess", "between-run ESS needs runs >= 2"))
    return problems


def resolved_summary(config):
    """Human-readable effective configuration with derived quantities."""
    sampler = resolve_sampler(config)
    lines = [f"name = {config.name}", f"seed = {config.seed}", f"runs = {config.runs}"]
    lines.append(f"target = {config.target.name} (dim {config.target.dim})")
    for key, value in asdict(sampler).items():
        lines.append(f"sampler.{key} = {value!r}")
    if sampler.kinetic:
        if sampler.eta is None:
            how = "exp(-gamma*h)" if sampler.eta_convention == "paper-literal" else "1 - exp(-gamma*h)"
            try:
                lines.append(f"resolved eta = {sampler.resolved_eta!r}  [{how}, gamma={sampler.gamma!r}, h={sampler.h_max!r}]")
            except ValueError as exc:
                lines.append(f"resolved eta = invalid ({exc})")
        else:
            lines.append(f"resolved eta = {sampler.resolved_eta!r}  [explicit]")
    k = auto_multiplier(sampler.h_max)
    for name in AUTO_FACTORS:
        if getattr(config.sampler, name) == "auto":
            lines.append(f"{name} = {getattr(sampler, name)}  [auto: {AUTO_FACTORS[name]} * ceil(1/h) = {AUTO_FACTORS[name]} * {k}]")
    lines.append(f"restart_last (tau_max) = {sampler.resolved_restart_last}")
    if config.tuning.enabled:
        lines.append("note: step size is tuned at run time; auto lengths follow the tuned h")
    return lines
