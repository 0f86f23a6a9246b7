from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twosys.errors import ConfigError
from twosys.linalg import AdaptiveStat, ensemble_covariance, factorize, random_spd
from twosys.samplers import (
    EnsembleState,
    SamplerConfig,
    StreamFactory,
    adaptive_sweep,
    apply_restart,
    coupled_sweep,
    propose_system,
    restart_schedule,
    run_sampler,
)
from twosys.samplers.kernels import makla_step, mala_step
from twosys.targets import gaussian_target, neals_funnel

A2 = np.array([[2.0, 1.0], [1.0, 2.0]])


def _systems(target, cfg, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in (0, 1):
        x = rng.standard_normal((cfg.particles, target.dim))
        if cfg.kinetic:
            out.append(EnsembleState(x, rng.standard_normal(x.shape), target.log_density(x), None, s))
        else:
            lp, g = target.logp_and_grad(x)
            out.append(EnsembleState(x, None, lp, g, s))
    return tuple(out)


# -------------------------------------------------------------- config rules


def test_config_defaults_valid():
    assert SamplerConfig().violations() == []


def test_config_restart_last_beyond_burn_in_names_both():
    (field, msg), = SamplerConfig(burn_in=100, restart_last=200).violations()
    assert field == "restart_last" and "burn_in" in msg and "restart_last" in msg


def test_config_eta_must_be_in_open_interval():
    cfg = SamplerConfig(eta=1.0)
    assert [f for f, _ in cfg.violations()] == ["eta"]
    with pytest.raises(ConfigError, match="sampler.eta"):
        cfg.validate()


def test_config_resolved_quantities():
    cfg = SamplerConfig(h_max=0.25, gamma=1 / 16, burn_in=1000)
    assert cfg.resolved_eta == pytest.approx(np.exp(-1 / 64))
    assert cfg.resolved_restart_last == 500
    assert SamplerConfig(kernel="makla", leapfrog_L=3).gradients_per_proposal == 3
    assert SamplerConfig(kernel="mala", leapfrog_L=3).gradients_per_proposal == 1


# ----------------------------------------------------------------- restarts


def test_restart_schedule():
    assert restart_schedule(100, 500, 1000) == [100, 200, 300, 400, 500]
    assert restart_schedule(100, 450, 1000) == [100, 200, 300, 400]
    assert restart_schedule(0, 500, 1000) == []
    assert restart_schedule(100, 2000, 300) == [100, 200, 300]


@given(st.integers(1, 200), st.integers(0, 5000))
def test_restart_schedule_count(period, burn_in):
    last = burn_in // 2
    assert len(restart_schedule(period, last, burn_in)) == last // period


def test_hard_restart_then_update_is_batch():
    from twosys.linalg import running_update

    P = np.diag([7.0, 3.0])
    B = np.array([[2.0, 0.5], [0.5, 1.0]])
    stat = apply_restart(AdaptiveStat(P, counter=37), "hard")
    assert stat.counter == 1
    np.testing.assert_array_equal(stat.cov, P)
    np.testing.assert_array_equal(running_update(stat, B).cov, B)


def test_soft_restart_then_update_is_average():
    from twosys.linalg import running_update

    P = np.diag([7.0, 3.0])
    B = np.diag([1.0, 1.0])
    stat = apply_restart(AdaptiveStat(P, counter=37), "soft")
    assert stat.counter == 2
    np.testing.assert_allclose(running_update(stat, B).cov, B / 2 + P / 2)


def test_restarts_fire_in_run():
    cfg = SamplerConfig(kernel="mala", mode="adaptive-2sys", particles=3, burn_in=1000, sweeps=0,
                        restart_period=100, h_max=0.3)
    rec = run_sampler(gaussian_target(A2), cfg, seed=1)
    assert rec.resets == [100, 200, 300, 400, 500]
    # one shared counter, advanced after each system's turn (two per sweep)
    assert rec.counters[0].tolist() == [3, 3]
    assert rec.counters[98].tolist() == [199, 199]
    # the reset at sweep 100 restarts it at 1
    assert rec.counters[99].tolist() == [1, 1]
    assert rec.counters[100].tolist() == [3, 3]
    assert rec.counters[-1].tolist() == [1001, 1001]


# ----------------------------------------------------------- sweep contracts


@pytest.mark.parametrize("kernel", ["mala", "truncated-mala", "makla"])
def test_frozen_system_untouched_during_half_sweep(kernel):
    t = neals_funnel(3, 1.0)
    cfg = SamplerConfig(kernel=kernel, mode="coupled", particles=5, h_max=0.4, eta=0.3)
    s0, s1 = _systems(t, cfg)
    before = [a.copy() for a in (s1.positions, s1.logp)]
    factor = factorize(ensemble_covariance(s1.positions, cfg.jitter_eps))
    new0, _, _ = propose_system(t, s0, factor, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(s1.positions, before[0])
    np.testing.assert_array_equal(s1.logp, before[1])
    assert not np.array_equal(new0.positions, s0.positions)


@pytest.mark.parametrize("mode", ["coupled", "adaptive-2sys", "adaptive-1sys"])
def test_sweeps_do_not_mutate_inputs(mode):
    t = gaussian_target(A2)
    cfg = SamplerConfig(kernel="mala", mode=mode, particles=4, h_max=0.5)
    systems = _systems(t, cfg)
    snap = [s.positions.copy() for s in systems]
    streams = StreamFactory(3)
    if mode == "coupled":
        out, res = coupled_sweep(t, systems, cfg, streams, 1)
    else:
        stats = tuple(AdaptiveStat.identity(2) for _ in range(2 if mode == "adaptive-2sys" else 1))
        out, _, res = adaptive_sweep(t, systems, stats, cfg, streams, 1)
    for s, x in zip(systems, snap):
        np.testing.assert_array_equal(s.positions, x)
    assert res.proposals == [4, 4]


def test_coupled_sweep_second_half_uses_updated_first_system():
    # the preconditioner for system 1 must come from system 0 after its move
    t = gaussian_target(A2)
    cfg = SamplerConfig(kernel="mala", mode="coupled", particles=4, h_max=0.5)
    systems = _systems(t, cfg)
    streams = StreamFactory(9)
    (n0, n1), _ = coupled_sweep(t, systems, cfg, streams, 1)
    f0 = factorize(ensemble_covariance(systems[1].positions, cfg.jitter_eps))
    m0, _, _ = propose_system(t, systems[0], f0, cfg, streams.generator(1, 0))
    f1 = factorize(ensemble_covariance(m0.positions, cfg.jitter_eps))
    m1, _, _ = propose_system(t, systems[1], f1, cfg, streams.generator(1, 1))
    np.testing.assert_array_equal(n0.positions, m0.positions)
    np.testing.assert_array_equal(n1.positions, m1.positions)


def test_all_rejected_sweep_keeps_state():
    t = gaussian_target(A2)
    cfg = SamplerConfig(kernel="mala", mode="coupled", particles=4, h_max=1e6)
    systems = _systems(t, cfg)
    (n0, n1), res = coupled_sweep(t, systems, cfg, StreamFactory(0), 1)
    assert res.accepted == [0, 0]
    np.testing.assert_array_equal(n0.positions, systems[0].positions)
    np.testing.assert_array_equal(n1.positions, systems[1].positions)


def test_adaptive_first_sweep_statistic_is_cross_covariance():
    t = gaussian_target(A2)
    cfg = SamplerConfig(kernel="mala", mode="adaptive-2sys", particles=5, h_max=0.5)
    systems = _systems(t, cfg)
    stats = (AdaptiveStat(np.diag([9.0, 9.0])), AdaptiveStat(np.diag([9.0, 9.0])))
    out, new_stats, _ = adaptive_sweep(t, systems, stats, cfg, StreamFactory(0), 1)
    # stats[1] is built from system 1 (unchanged while system 0 moves) at K = 1 ...
    np.testing.assert_array_equal(new_stats[1].cov, ensemble_covariance(systems[1].positions))
    # ... stats[0] from system 0 after its move, at K = 2
    np.testing.assert_allclose(new_stats[0].cov, ensemble_covariance(out[0].positions) / 2 + np.diag([4.5, 4.5]),
                               rtol=1e-14)
    assert [s.counter for s in new_stats] == [3, 3]


def test_adaptive_constant_ensembles_converge():
    t = gaussian_target(A2)
    cfg = SamplerConfig(kernel="mala", mode="adaptive-2sys", particles=5, h_max=1e6)  # everything rejected
    systems = _systems(t, cfg)
    stats = (AdaptiveStat.identity(2), AdaptiveStat.identity(2))
    streams = StreamFactory(0)
    for m in range(1, 50):
        systems, stats, res = adaptive_sweep(t, systems, stats, cfg, streams, m)
        assert res.accepted == [0, 0]
    # stats[1] was overwritten at K = 1; stats[0] only sees the even counter
    # values K = 2m, so a fraction prod_m (1 - 1/(2m)) of the identity remains
    B0, B1 = (ensemble_covariance(s.positions) for s in systems)
    residual = np.prod([1 - 1 / (2 * m) for m in range(1, 50)])
    np.testing.assert_allclose(stats[1].cov, B1, rtol=1e-13)
    np.testing.assert_allclose(stats[0].cov, B0 + (np.eye(2) - B0) * residual, rtol=1e-12, atol=1e-14)


def test_adaptive_1sys_single_statistic():
    t = gaussian_target(A2)
    cfg = SamplerConfig(kernel="mala", mode="adaptive-1sys", particles=4, h_max=0.5)
    systems = _systems(t, cfg)
    _, stats, _ = adaptive_sweep(t, systems, (AdaptiveStat.identity(2),), cfg, StreamFactory(0), 1)
    assert len(stats) == 1 and stats[0].counter == 2
    pooled = np.concatenate([s.positions for s in systems])
    np.testing.assert_array_equal(stats[0].cov, ensemble_covariance(pooled))


def test_adaptive_statistic_approaches_true_covariance():
    A = random_spd(4, 0.1, 10.0, 5)
    t = gaussian_target(A)
    true = t.moments.cov
    errs = []
    for burn in (300, 3000):
        cfg = SamplerConfig(kernel="mala", mode="adaptive-2sys", particles=8, h_max=0.5, burn_in=burn,
                            sweeps=0, restart_period=0)
        rec = run_sampler(t, cfg, seed=2)
        errs.append(max(np.linalg.norm(s.cov - true) / np.linalg.norm(true) for s in rec.final_stats))
    assert errs[1] < errs[0]


# ------------------------------------------------------- particle permutation


@pytest.mark.parametrize("kernel", ["mala", "makla"])
def test_particle_permutation_commutes(kernel):
    t = neals_funnel(3, 1.0)
    rng = np.random.default_rng(4)
    n = 6
    x = rng.standard_normal((n, 3))
    v = rng.standard_normal((n, 3))
    f = factorize(random_spd(3, 0.5, 2.0, 1))
    h = rng.uniform(0.1, 0.5, n)
    u = rng.random(n)
    perm = rng.permutation(n)
    if kernel == "mala":
        noise = rng.standard_normal((n, 3))
        lp, g = t.logp_and_grad(x)
        a = mala_step(t, x, lp, g, f, h, noise, u)
        b = mala_step(t, x[perm], lp[perm], g[perm], f, h[perm], noise[perm], u[perm])
    else:
        noise = rng.standard_normal((n, 2, 2, 3))
        lp = t.log_density(x)
        a = makla_step(t, x, v, lp, f.sym_sqrt, h, 0.3, 2, noise, u)
        b = makla_step(t, x[perm], v[perm], lp[perm], f.sym_sqrt, h[perm], 0.3, 2, noise[perm], u[perm])
        np.testing.assert_array_equal(a.velocities[perm], b.velocities)
    np.testing.assert_array_equal(a.positions[perm], b.positions)
    np.testing.assert_array_equal(a.accepted[perm], b.accepted)


def test_frozen_statistic_invariant_to_permutation():
    X = np.random.default_rng(0).standard_normal((7, 3))
    perm = np.random.default_rng(1).permutation(7)
    np.testing.assert_allclose(ensemble_covariance(X[perm]), ensemble_covariance(X), rtol=1e-13)


# --------------------------------------------------------- gradient counting


@pytest.mark.parametrize(
    "kernel, mode, L",
    [("mala", "coupled", 1), ("truncated-mala", "adaptive-2sys", 1), ("mala", "vanilla", 1),
     ("makla", "coupled", 1), ("makla", "adaptive-2sys", 3), ("makla", "adaptive-1sys", 2)],
)
def test_gradient_counts_exact(counting, kernel, mode, L):
    t = counting(gaussian_target(A2))
    N, M, B = 3, 40, 25
    cfg = SamplerConfig(kernel=kernel, mode=mode, leapfrog_L=L, particles=N, burn_in=B, sweeps=M, h_max=0.3, eta=0.3)
    rec = run_sampler(t, cfg, seed=5)
    per = L if kernel == "makla" else 1
    warm = 0 if kernel == "makla" else 2 * N
    assert rec.gradients == {"warmup": warm, "burn_in": 2 * B * N * per, "sampling": 2 * M * N * per}
    assert t.gradients == rec.total_gradients
    assert rec.grad_trace[-1] == (1 if warm else 0) + (B + M) * per


def test_zero_sweeps(counting):
    t = counting(gaussian_target(A2))
    rec = run_sampler(t, SamplerConfig(kernel="mala", mode="coupled", particles=2, burn_in=5, sweeps=0), seed=0)
    assert rec.samples.shape == (4, 0, 2)
    assert rec.gradients["sampling"] == 0


# ---------------------------------------------------------- run determinism


@pytest.mark.parametrize("kernel", ["mala", "makla"])
def test_run_is_deterministic(kernel):
    cfg = SamplerConfig(kernel=kernel, mode="adaptive-2sys", particles=3, burn_in=30, sweeps=40, h_max=0.4,
                        beta=0.5, restart_period=10)
    t = neals_funnel(3, 1.0)
    a = run_sampler(t, cfg, seed=123, run=2)
    b = run_sampler(t, cfg, seed=123, run=2)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.accepted == b.accepted
    c = run_sampler(t, cfg, seed=123, run=3)
    assert not np.array_equal(a.samples, c.samples)


def test_thinning_and_shapes():
    cfg = SamplerConfig(kernel="mala", mode="coupled", particles=2, burn_in=3, sweeps=10, thin=3)
    rec = run_sampler(gaussian_target(A2), cfg, seed=0)
    assert rec.samples.shape == (4, 3, 2)


def test_initial_positions_validated():
    cfg = SamplerConfig(kernel="mala", mode="coupled", particles=2, burn_in=0, sweeps=1)
    with pytest.raises(ConfigError):
        run_sampler(gaussian_target(A2), cfg, seed=0, init=np.zeros(3))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_rejection_sweep_keeps_state_hypothesis(seed):
    t = gaussian_target(A2)
    cfg = replace(SamplerConfig(), kernel="makla", mode="coupled", particles=3, h_max=1e8, eta=0.5)
    systems = _systems(t, cfg, seed % 1000)
    (n0, n1), res = coupled_sweep(t, systems, cfg, StreamFactory(seed), 1)
    if res.accepted == [0, 0]:
        np.testing.assert_array_equal(n0.velocities, -systems[0].velocities)
        np.testing.assert_array_equal(n1.positions, systems[1].positions)
