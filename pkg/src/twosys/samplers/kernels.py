"""Metropolis-adjusted Langevin proposal kernels.

Every function is vectorised over a leading batch of particles: positions
are ``(N, d)`` (or ``(d,)``), step sizes are scalars or ``(N,)``.
Preconditioners are passed as :class:`~twosys.linalg.SpdFactorization`.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ProposalOutcome:
    """Result of one proposal + accept/reject for a batch of particles.

    ``gradients_used`` is the total over the batch: one gradient per
    particle for MALA kernels, ``L`` per particle for MAKLA.
    """

    positions: np.ndarray
    velocities: np.ndarray
    logp: np.ndarray
    grad: np.ndarray
    accepted: np.ndarray
    log_accept_prob: np.ndarray
    gradients_used: int


def _col(h):
    h = np.asarray(h, dtype=float)
    return h[..., None] if h.ndim else h


def truncated_drift(g, delta):
    """Clip ``g`` to Euclidean norm at most ``delta`` (along the last axis)."""
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * (delta / np.maximum(delta, norm))


def _drift(grad, delta):
    return grad if delta is None else truncated_drift(grad, delta)


def mala_mean(x, grad, factor, h, delta=None):
    """Proposal mean ``x + h C d(x)``, with ``d`` the (optionally truncated) gradient."""
    return x + _col(h) * (_drift(grad, delta) @ factor.source)


def mala_propose(x, grad, factor, h, noise, delta=None):
    """Draw ``y ~ N(x + h C d(x), 2 h C)`` using ``noise`` ~ N(0, I).

    ``grad`` is the gradient of the log-density at ``x``; ``delta`` switches
    on drift truncation.
    """
    return mala_mean(x, grad, factor, h, delta) + np.sqrt(2.0 * _col(h)) * (noise @ factor.cholesky.T)


def mala_log_q(y, x, grad, factor, h, delta=None):
    """Normalised log-density of the MALA proposal ``q(y | x)``."""
    h = np.asarray(h, dtype=float)
    r = (y - mala_mean(x, grad, factor, h, delta)) @ factor.cholesky_inv.T
    d = factor.dim
    return (
        -np.einsum("...i,...i->...", r, r) / (4.0 * h)
        - 0.5 * d * np.log(4.0 * math.pi * h)
        - 0.5 * factor.logdet
    )


def mala_log_ratio(x, y, logp_x, grad_x, logp_y, grad_y, factor, h, delta=None):
    """``log[rho(y) q(x|y) / (rho(x) q(y|x))]`` from precomputed values.

    The normalising constants of ``q`` cancel because ``h`` and ``C`` are
    shared by both directions, so only the quadratic forms are evaluated.
    """
    h = np.asarray(h, dtype=float)
    Li = factor.cholesky_inv.T
    r_fwd = (y - mala_mean(x, grad_x, factor, h, delta)) @ Li
    r_rev = (x - mala_mean(y, grad_y, factor, h, delta)) @ Li
    quad = np.einsum("...i,...i->...", r_fwd, r_fwd) - np.einsum("...i,...i->...", r_rev, r_rev)
    with np.errstate(invalid="ignore"):
        out = logp_y - logp_x + quad / (4.0 * h)
    return np.where(np.isnan(out), -np.inf, out)


def mala_accept_log_ratio(target, x, y, factor, h, delta=None):
    """``log min(1, rho(y) q(x|y) / (rho(x) q(y|x)))`` for a target object."""
    lx, gx = target.logp_and_grad(x)
    ly, gy = target.logp_and_grad(y)
    return np.minimum(0.0, mala_log_ratio(x, y, lx, gx, ly, gy, factor, h, delta))


def mala_step(target, x, logp_x, grad_x, factor, h, noise, u, delta=None):
    """Propose from every particle and accept with ``u < alpha``.

    Returns a :class:`ProposalOutcome`; non-finite proposals are rejected.
    """
    y = mala_propose(x, grad_x, factor, h, noise, delta)
    with np.errstate(all="ignore"):
        logp_y, grad_y = target.logp_and_grad(y)
        log_alpha = np.minimum(0.0, mala_log_ratio(x, y, logp_x, grad_x, logp_y, grad_y, factor, h, delta))
    finite = np.isfinite(logp_y) & np.all(np.isfinite(grad_y), axis=-1) & np.all(np.isfinite(y), axis=-1)
    log_alpha = np.where(finite, log_alpha, -np.inf)
    accept = np.log(u) < log_alpha
    acc = accept[..., None]
    n = 1 if np.ndim(x) == 1 else x.shape[0]
    return ProposalOutcome(
        positions=np.where(acc, y, x),
        velocities=None,
        logp=np.where(accept, logp_y, logp_x),
        grad=np.where(acc, grad_y, grad_x),
        accepted=accept,
        log_accept_prob=log_alpha,
        gradients_used=n,
    )


def oabao_trajectory(target, x, v, sqrt_c, h, eta, n_steps, noise, logp_x=None):
    """Run ``n_steps`` OABAO steps.

    Args:
        target: density with ``log_density`` and ``grad_log_density``.
        x, v: start position and velocity, ``(N, d)`` or ``(d,)``.
        sqrt_c: symmetric square root of the preconditioner.
        h: step size, scalar or ``(N,)``.
        eta: refresh weight; each O step is ``sqrt(1-eta) v + sqrt(eta) xi``.
        n_steps: number of steps ``L``; each costs one gradient.
        noise: standard normals of shape ``(..., L, 2, d)``.
        logp_x: cached log-density at ``x``.

    Returns:
        ``(x_L, v_L, delta, logp_L)`` where ``delta`` is the accumulated energy
        increase ``sum_i H(x_{i+1}, v''_{i+1}) - H(x_i, v'_i)`` with
        ``H(x, v) = -log rho(x) + |v|^2 / 2``. Particles whose trajectory left
        the finite range get ``delta = +inf``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    noise = np.asarray(noise, dtype=float)
    hc = _col(h)
    keep, refresh = math.sqrt(1.0 - eta), math.sqrt(eta)
    R = sqrt_c.T  # symmetric; row-vector convention
    lp = target.log_density(x) if logp_x is None else logp_x
    delta = np.zeros(np.shape(lp))
    with np.errstate(all="ignore"):
        for i in range(n_steps):
            v1 = keep * v + refresh * noise[..., i, 0, :]
            e0 = -lp + 0.5 * np.einsum("...i,...i->...", v1, v1)
            x_half = x + 0.5 * hc * (v1 @ R)
            g = target.grad_log_density(x_half)
            v2 = v1 + hc * (g @ R)
            x = x_half + 0.5 * hc * (v2 @ R)
            lp = target.log_density(x)
            e1 = -lp + 0.5 * np.einsum("...i,...i->...", v2, v2)
            delta = delta + (e1 - e0)
            v = keep * v2 + refresh * noise[..., i, 1, :]
        bad = ~(
            np.isfinite(delta)
            & np.all(np.isfinite(x), axis=-1)
            & np.all(np.isfinite(v), axis=-1)
        )
    delta = np.where(bad, np.inf, delta)
    return x, v, delta, lp


def makla_step(target, x, v, logp_x, sqrt_c, h, eta, n_steps, noise, u):
    """One MAKLA proposal per particle.

    Accepts ``(x_L, v_L)`` with probability ``min(1, exp(-delta))``; a
    rejected particle keeps its position and reverses its velocity.
    """
    xL, vL, delta, lpL = oabao_trajectory(target, x, v, sqrt_c, h, eta, n_steps, noise, logp_x)
    log_alpha = np.minimum(0.0, -delta)
    accept = np.log(u) < log_alpha
    acc = accept[..., None]
    n = 1 if np.ndim(x) == 1 else x.shape[0]
    return ProposalOutcome(
        positions=np.where(acc, xL, x),
        velocities=np.where(acc, vL, -v),
        logp=np.where(accept, lpL, logp_x),
        grad=None,
        accepted=accept,
        log_accept_prob=log_alpha,
        gradients_used=n * n_steps,
    )


def makla_propose(target, x, v, sqrt_c, h, eta, n_steps, rng, logp_x=None):
    """Single-batch MAKLA proposal drawing its noise from ``rng``."""
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    noise = rng.standard_normal(batch + (n_steps, 2, x.shape[-1]))
    u = rng.random(batch)
    if logp_x is None:
        logp_x = target.log_density(x)
    return makla_step(target, x, v, logp_x, sqrt_c, h, eta, n_steps, noise, u)
