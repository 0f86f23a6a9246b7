"""Randomised step sizes and the velocity-refresh parameter."""

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class StepSizeDist:
    """Mixture of a point mass at ``h_max`` (weight ``beta``) and
    ``h_max * c`` with ``c`` drawn from the density ``3 (1 - c)^2`` on (0, 1).
    """

    h_max: float
    beta: float = 1.0

    def __post_init__(self):
        if not self.h_max > 0:
            raise DataError("h_max must be positive")
        if not 0 < self.beta <= 1:
            raise DataError("beta must lie in (0, 1]")

    @property
    def mean(self):
        return self.h_max * (self.beta + (1.0 - self.beta) / 4.0)


def sample_step_size(dist, u1, u2):
    """Map two uniforms on [0, 1) to a step size.

    ``u1 < beta`` selects ``h_max``; otherwise ``u2`` goes through the
    inverse CDF ``F^{-1}(u) = 1 - (1 - u)^{1/3}``. Vectorised over arrays.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    frac = 1.0 - np.cbrt(1.0 - u2)
    # u2 == 0 would give a zero step; the continuous part has no mass there
    frac = np.where(frac > 0, frac, np.finfo(float).tiny)
    h = np.where(u1 < dist.beta, dist.h_max, dist.h_max * frac)
    return h if h.ndim else float(h)


def continuous_cdf(c):
    """CDF of the continuous component, ``1 - (1 - c)^3``."""
    c = np.clip(np.asarray(c, dtype=float), 0.0, 1.0)
    return 1.0 - (1.0 - c) ** 3


ETA_CONVENTIONS = ("paper-literal", "persistence")


def eta_from_gamma(gamma, h, convention="paper-literal"):
    """Velocity refresh weight from a friction ``gamma`` and step ``h``.

    ``paper-literal`` gives ``exp(-gamma h)``; ``persistence`` gives
    ``1 - exp(-gamma h)``.
    """
    if not gamma * h > 0:
        raise DataError("gamma * h must be positive")
    if convention == "paper-literal":
        return math.exp(-gamma * h)
    if convention == "persistence":
        return -math.expm1(-gamma * h)
    raise DataError(f"unknown eta convention {convention!r}; expected one of {ETA_CONVENTIONS}")
