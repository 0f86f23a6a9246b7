"""Two-system ensemble scheduler: coupled and adaptive sweeps, restarts, runs.

A sweep updates system 0 and then system 1. Each half-sweep freezes the
other system, builds a preconditioner from it (directly for ``coupled``,
through a running average for ``adaptive-2sys``) and runs one independent
Metropolis-adjusted proposal per particle of the active system.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, SamplingError
from ..linalg import AdaptiveStat, ensemble_covariance, factorize, running_update
from ..targets import find_mode
from .kernels import makla_step, mala_step
from .stepsize import ETA_CONVENTIONS, StepSizeDist, eta_from_gamma, sample_step_size
from .streams import PHASE_SAMPLE, StreamFactory

log = logging.getLogger(__name__)

MODES = ("vanilla", "coupled", "adaptive-1sys", "adaptive-2sys")
KERNELS = ("mala", "truncated-mala", "makla")
RESTART_KINDS = ("hard", "soft")
COVARIANCES = ("full", "diagonal")
STEP_DRAWS = ("particle", "sweep")


@dataclass(frozen=True)
class SamplerConfig:
    """Tuning parameters for one sampler.

    ``particles`` counts particles per system; a sweep makes ``2 * particles``
    proposals. ``eta=None`` derives the refresh weight from ``gamma`` and
    ``h_max``. ``restart_last=None`` means half the burn-in, and
    ``restart_period=0`` disables restarts.
    """

    h_max: float = 0.5
    beta: float = 1.0
    leapfrog_L: int = 1
    eta: float = None
    gamma: float = 1.0 / 16.0
    eta_convention: str = "paper-literal"
    jitter_eps: float = 1e-6
    drift_delta: float = 1e3
    cov_cap: float = 1e6
    mode: str = "adaptive-2sys"
    kernel: str = "makla"
    covariance: str = "full"
    particles: int = 10
    burn_in: int = 1000
    sweeps: int = 1000
    thin: int = 1
    restart_period: int = 100
    restart_last: int = None
    restart_kind: str = "hard"
    step_draw: str = "particle"
    cov_ddof: int = 1

    @property
    def kinetic(self):
        return self.kernel == "makla"

    @property
    def resolved_eta(self):
        if self.eta is not None:
            return float(self.eta)
        return eta_from_gamma(self.gamma, self.h_max, self.eta_convention)

    @property
    def resolved_restart_last(self):
        if self.restart_last is None:
            return self.burn_in // 2
        return self.restart_last

    @property
    def gradients_per_proposal(self):
        return self.leapfrog_L if self.kinetic else 1

    def violations(self):
        """List of ``(field, message)`` pairs; empty when the config is usable."""
        out = []

        def need(cond, name, msg):
            if not cond:
                out.append((name, msg))

        need(self.h_max > 0, "h_max", "must be positive")
        need(0 < self.beta <= 1, "beta", "must lie in (0, 1]")
        need(int(self.leapfrog_L) == self.leapfrog_L and self.leapfrog_L >= 1, "leapfrog_L", "must be a positive integer")
        need(self.mode in MODES, "mode", f"must be one of {MODES}")
        need(self.kernel in KERNELS, "kernel", f"must be one of {KERNELS}")
        need(self.covariance in COVARIANCES, "covariance", f"must be one of {COVARIANCES}")
        need(self.restart_kind in RESTART_KINDS, "restart_kind", f"must be one of {RESTART_KINDS}")
        need(self.step_draw in STEP_DRAWS, "step_draw", f"must be one of {STEP_DRAWS}")
        need(self.eta_convention in ETA_CONVENTIONS, "eta_convention", f"must be one of {ETA_CONVENTIONS}")
        need(self.jitter_eps > 0, "jitter_eps", "must be positive")
        need(self.drift_delta > 0, "drift_delta", "must be positive")
        need(self.cov_cap > 0, "cov_cap", "must be positive")
        need(self.particles >= 1, "particles", "must be at least 1")
        need(self.burn_in >= 0, "burn_in", "must be non-negative")
        need(self.sweeps >= 0, "sweeps", "must be non-negative")
        need(self.thin >= 1, "thin", "must be at least 1")
        need(self.restart_period >= 0, "restart_period", "must be non-negative")
        need(self.cov_ddof in (0, 1), "cov_ddof", "must be 0 or 1")
        if self.restart_last is not None:
            need(
                self.restart_last <= self.burn_in,
                "restart_last",
                f"restart_last ({self.restart_last}) exceeds burn_in ({self.burn_in})",
            )
        if self.kinetic:
            try:
                eta = self.resolved_eta
            except ValueError as exc:
                out.append(("eta", str(exc)))
            else:
                need(0 < eta < 1, "eta", f"resolved eta {eta!r} must lie in (0, 1)")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            name, msg = problems[0]
            raise ConfigError(f"sampler.{name}", msg)
        return self


@dataclass
class EnsembleState:
    """Particles of one system with cached log-density (and gradient for MALA)."""

    positions: np.ndarray
    velocities: np.ndarray = None
    logp: np.ndarray = None
    grad: np.ndarray = None
    system_tag: int = 0

    @property
    def size(self):
        return self.positions.shape[0]


@dataclass
class SweepResult:
    accepted: list
    proposals: list
    gradients: int


def restart_schedule(period, last, burn_in):
    """Sweeps ``{period, 2 period, ...}`` up to ``min(last, burn_in)``."""
    if period <= 0:
        return []
    return list(range(period, min(last, burn_in) + 1, period))


def apply_restart(stat, kind):
    """Hard restart sets the counter to 1, soft restart to 2; the covariance is kept."""
    if kind == "hard":
        return replace(stat, counter=1)
    if kind == "soft":
        return replace(stat, counter=2)
    raise ConfigError("sampler.restart_kind", f"unknown restart kind {kind!r}")


def cross_covariance(points, cfg):
    """Ensemble covariance statistic (no jitter), optionally reduced to its diagonal."""
    C = ensemble_covariance(points, 0.0, ddof=cfg.cov_ddof)
    if cfg.covariance == "diagonal":
        C = np.diag(np.diag(C))
    return C


def _jittered(C, eps):
    C = C.copy()
    C[np.diag_indices_from(C)] += eps
    return C


def propose_system(target, state, factor, cfg, rng, eta=None):
    """Update every particle of ``state`` with the frozen preconditioner ``factor``.

    Random numbers are drawn from ``rng`` in a fixed order: uniforms of shape
    ``(N, 3)`` (two for the step size, one for acceptance), then the Gaussian
    noise with particle ``j`` on row ``j``.
    """
    x = state.positions
    n, d = x.shape
    u = rng.random((n, 3))
    dist = StepSizeDist(cfg.h_max, cfg.beta)
    if cfg.step_draw == "sweep":
        h = sample_step_size(dist, u[0, 0], u[0, 1])
    else:
        h = sample_step_size(dist, u[:, 0], u[:, 1])
    if cfg.kinetic:
        noise = rng.standard_normal((n, cfg.leapfrog_L, 2, d))
        eta = cfg.resolved_eta if eta is None else eta
        out = makla_step(
            target, x, state.velocities, state.logp, factor.sym_sqrt, h, eta, cfg.leapfrog_L, noise, u[:, 2]
        )
    else:
        noise = rng.standard_normal((n, d))
        delta = cfg.drift_delta if cfg.kernel == "truncated-mala" else None
        out = mala_step(target, x, state.logp, state.grad, factor, h, noise, u[:, 2], delta)
    new = EnsembleState(out.positions, out.velocities, out.logp, out.grad, state.system_tag)
    return new, int(np.count_nonzero(out.accepted)), out.gradients_used


def coupled_sweep(target, systems, cfg, streams, sweep, fixed_factor=None):
    """One sweep of the ensemble-chain sampler.

    For each system ``s`` in turn the preconditioner is the covariance of the
    other system plus ``jitter_eps * I``; the other system is left untouched.
    ``fixed_factor`` replaces the cross covariance (vanilla chains).
    """
    systems = list(systems)
    accepted, proposals, grads = [0, 0], [0, 0], 0
    eta = cfg.resolved_eta if cfg.kinetic else None
    for s in (0, 1):
        if fixed_factor is None:
            other = systems[1 - s].positions
            factor = factorize(_jittered(cross_covariance(other, cfg), cfg.jitter_eps))
        else:
            factor = fixed_factor
        systems[s], acc, g = propose_system(target, systems[s], factor, cfg, streams.generator(sweep, s), eta)
        accepted[s] += acc
        proposals[s] += systems[s].size
        grads += g
    return tuple(systems), SweepResult(accepted, proposals, grads)


def adaptive_sweep(target, systems, stats, cfg, streams, sweep):
    """One sweep of the adaptive sampler.

    ``adaptive-2sys``: ``stats[i]`` averages covariances of system ``i`` and
    preconditions system ``1 - i``; it is updated just before it is used.
    The two statistics share one adaptation counter ``K`` that advances
    after every system's turn (twice per sweep), so in sweep ``m`` (without
    restarts) ``stats[1]`` is updated with weight ``1/(2m-1)`` and
    ``stats[0]`` with ``1/(2m)``. Both ``counter`` fields carry that shared
    value.

    ``adaptive-1sys``: a single statistic (``stats`` has length 1) is updated
    from all particles, used for both systems, and advanced once per sweep.
    """
    systems = list(systems)
    stats = list(stats)
    accepted, proposals, grads = [0, 0], [0, 0], 0
    eta = cfg.resolved_eta if cfg.kinetic else None
    if cfg.mode == "adaptive-2sys":
        for s in (0, 1):
            o = 1 - s
            stat = running_update(stats[o], cross_covariance(systems[o].positions, cfg))
            factor = factorize(_jittered(stat.cov, cfg.jitter_eps))
            systems[s], acc, g = propose_system(target, systems[s], factor, cfg, streams.generator(sweep, s), eta)
            stats[o] = stat
            stats = [st.advanced() for st in stats]
            accepted[s] += acc
            proposals[s] += systems[s].size
            grads += g
    elif cfg.mode == "adaptive-1sys":
        pooled = np.concatenate([systems[0].positions, systems[1].positions])
        stat = running_update(stats[0], cross_covariance(pooled, cfg))
        factor = factorize(_jittered(stat.cov, cfg.jitter_eps))
        for s in (0, 1):
            systems[s], acc, g = propose_system(target, systems[s], factor, cfg, streams.generator(sweep, s), eta)
            accepted[s] += acc
            proposals[s] += systems[s].size
            grads += g
        stats[0] = stat.advanced()
    else:
        raise ConfigError("sampler.mode", f"{cfg.mode!r} is not an adaptive mode")
    return tuple(systems), tuple(stats), SweepResult(accepted, proposals, grads)


@dataclass
class RunRecord:
    """Everything one run produces.

    Attributes:
        samples: thinned post-burn-in draws, shape ``(2 * particles, T, d)``;
            chains ``0..N-1`` belong to system 0.
        accepted, proposals: per phase (``burn_in``/``sampling``) and system.
        gradients: fresh gradient evaluations per phase; ``warmup`` covers
            the initial gradient cache of MALA kernels.
        grad_trace: cumulative per-chain gradients after each sweep
            (index 0 is the initial state).
        moment_trace: chain-averaged statistics after each sweep, shape
            ``(burn_in + sweeps + 1, k)``, or ``None``.
        counters, stat_norms: adaptation counter and spectral norm of every
            statistic after each sweep (empty for non-adaptive modes).
        resets: sweeps at which the adaptation was restarted.
    """

    config: SamplerConfig
    seed: int
    run: int
    samples: np.ndarray
    accepted: dict
    proposals: dict
    gradients: dict
    grad_trace: np.ndarray
    moment_trace: np.ndarray = None
    counters: np.ndarray = None
    stat_norms: np.ndarray = None
    resets: list = field(default_factory=list)
    final_stats: tuple = ()

    def acceptance_rate(self, phase="sampling"):
        props = sum(self.proposals[phase])
        return float(sum(self.accepted[phase]) / props) if props else float("nan")

    @property
    def total_gradients(self):
        return sum(self.gradients.values())


def initial_positions(target, init, particles):
    """Broadcast ``init`` to shape ``(2, particles, d)``; default is the mode."""
    d = target.dim
    if init is None:
        init = target.mode()
        if init is None:
            init = find_mode(target, np.zeros(d))
    init = np.asarray(init, dtype=float)
    if init.shape == (d,):
        return np.broadcast_to(init, (2, particles, d)).copy()
    if init.shape == (2, particles, d):
        return init.copy()
    raise ConfigError("init", f"initial positions must have shape ({d},) or (2, {particles}, {d}), got {init.shape}")


def _initial_state(target, positions, cfg, streams, tag):
    x = positions
    if cfg.kinetic:
        # sweep index 0 is reserved for initial draws
        v = streams.generator(0, tag).standard_normal(x.shape)
        return EnsembleState(x, v, target.log_density(x), None, tag), 0
    lp, g = target.logp_and_grad(x)
    return EnsembleState(x, None, lp, g, tag), x.shape[0]


def _statistics(moment_specs, positions, transform):
    x = positions if transform is None else transform(positions)
    return [float(np.mean(spec.f(x))) for spec in moment_specs]


def run_sampler(target, cfg, seed, run=0, init=None, transform=None, moment_specs=None,
                stream_phase=PHASE_SAMPLE):
    """Burn in with adaptation and restarts, then collect thinned samples.

    Args:
        target: density to sample (possibly a rescaled one).
        cfg: :class:`SamplerConfig`.
        seed: root seed; together with ``run`` it fixes every random draw.
        init: start point(s), see :func:`initial_positions`.
        transform: applied to recorded positions, e.g. ``RescaledTarget.pull_back``.
        moment_specs: statistics averaged over all chains after each sweep.
        stream_phase: separates tuning probes from production streams.

    Returns:
        A :class:`RunRecord`.
    """
    cfg.validate()
    streams = StreamFactory(seed, run, stream_phase)
    n, d = cfg.particles, target.dim
    x0 = initial_positions(target, init, n)

    systems, warmup = [], 0
    for s in (0, 1):
        st, g = _initial_state(target, x0[s], cfg, streams, s)
        systems.append(st)
        warmup += g
    systems = tuple(systems)

    adaptive = cfg.mode.startswith("adaptive")
    n_stats = 2 if cfg.mode == "adaptive-2sys" else 1
    stats = tuple(AdaptiveStat(np.eye(d), 1, cfg.cov_cap) for _ in range(n_stats)) if adaptive else ()
    fixed = factorize(np.eye(d)) if cfg.mode == "vanilla" else None
    reset_at = set(restart_schedule(cfg.restart_period, cfg.resolved_restart_last, cfg.burn_in)) if adaptive else set()

    total = cfg.burn_in + cfg.sweeps
    kept = cfg.sweeps // cfg.thin
    samples = np.empty((2 * n, kept, d))
    accepted = {"burn_in": [0, 0], "sampling": [0, 0]}
    proposals = {"burn_in": [0, 0], "sampling": [0, 0]}
    gradients = {"warmup": warmup, "burn_in": 0, "sampling": 0}
    grad_trace = np.empty(total + 1, dtype=np.int64)
    grad_trace[0] = 1 if warmup else 0
    per_sweep = cfg.gradients_per_proposal
    moment_trace = None
    if moment_specs:
        moment_trace = np.empty((total + 1, len(moment_specs)))
        moment_trace[0] = _statistics(moment_specs, np.concatenate([st.positions for st in systems]), transform)
    counters = np.empty((total, n_stats), dtype=np.int64) if adaptive else np.empty((total, 0), dtype=np.int64)
    norms = np.empty((total, n_stats)) if adaptive else np.empty((total, 0))
    resets = []
    k = 0

    for t in range(1, total + 1):
        if adaptive:
            systems, stats, res = adaptive_sweep(target, systems, stats, cfg, streams, t)
        else:
            systems, res = coupled_sweep(target, systems, cfg, streams, t, fixed_factor=fixed)
        phase = "burn_in" if t <= cfg.burn_in else "sampling"
        for s in (0, 1):
            accepted[phase][s] += res.accepted[s]
            proposals[phase][s] += res.proposals[s]
        gradients[phase] += res.gradients
        grad_trace[t] = grad_trace[t - 1] + per_sweep

        if adaptive:
            if t in reset_at:
                stats = tuple(apply_restart(st, cfg.restart_kind) for st in stats)
                resets.append(t)
            counters[t - 1] = [st.counter for st in stats]
            norms[t - 1] = [np.linalg.norm(st.cov, 2) for st in stats]

        for st in systems:
            if not np.all(np.isfinite(st.positions)):
                raise SamplingError(f"non-finite position after sweep {t} (system {st.system_tag})")

        pos = None
        if t > cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0 and k < kept:
            pos = np.concatenate([st.positions for st in systems])
            samples[:, k] = pos if transform is None else transform(pos)
            k += 1
        if moment_trace is not None:
            if pos is None:
                pos = np.concatenate([st.positions for st in systems])
            moment_trace[t] = _statistics(moment_specs, pos, transform)

    return RunRecord(
        config=cfg,
        seed=int(seed),
        run=int(run),
        samples=samples,
        accepted=accepted,
        proposals=proposals,
        gradients=gradients,
        grad_trace=grad_trace,
        moment_trace=moment_trace,
        counters=counters,
        stat_norms=norms,
        resets=resets,
        final_stats=stats,
    )
