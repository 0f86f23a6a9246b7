"""Target densities with analytic gradients and exact reference moments.

All targets accept a batch of points of shape ``(..., d)`` and return
log-densities of shape ``(...)`` and gradients of shape ``(..., d)``.
Log-densities are unnormalised.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .errors import ConvergenceError, DataError, ImproperPosteriorError
from .linalg import check_symmetric, factorize


@dataclass(frozen=True)
class MomentSpec:
    """Exact mean and variance of a scalar statistic ``f`` under the target."""

    name: str
    f: object
    expectation: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise DataError(f"moment {self.name!r} needs positive variance")


@dataclass(frozen=True)
class ReferenceMoments:
    """Exact first and second moments, plus the statistics used for bias."""

    mean: np.ndarray
    cov: np.ndarray
    bias_specs: tuple = field(default=())

    @property
    def std(self):
        return np.sqrt(np.diag(self.cov))


def coordinate_specs(mean, var):
    """One :class:`MomentSpec` per coordinate, ``f_i(x) = x_i``."""
    return tuple(
        MomentSpec(f"x{i}", lambda x, i=i: np.asarray(x)[..., i], float(m), float(v))
        for i, (m, v) in enumerate(zip(mean, var))
    )


class TargetDensity:
    """Unnormalised density with gradient.

    Subclasses override :meth:`logp_and_grad`; the single-output methods
    are derived from it unless a cheaper version exists.
    """

    name = "target"
    moments = None

    def __init__(self, dim):
        if dim < 1:
            raise DataError("dimension must be positive")
        self.dim = int(dim)

    def logp_and_grad(self, x):
        raise NotImplementedError

    def log_density(self, x):
        return self.logp_and_grad(x)[0]

    def grad_log_density(self, x):
        return self.logp_and_grad(x)[1]

    def mode(self):
        """Known maximiser, or ``None`` when it must be searched for."""
        return None

    def describe(self):
        return {"name": self.name, "dim": self.dim}


class FunctionTarget(TargetDensity):
    """Target built from plain callables (used for ad hoc densities)."""

    def __init__(self, dim, log_density, grad_log_density, name="function", moments=None):
        super().__init__(dim)
        self._logp = log_density
        self._grad = grad_log_density
        self.name = name
        self.moments = moments

    def log_density(self, x):
        return self._logp(np.asarray(x, dtype=float))

    def grad_log_density(self, x):
        return self._grad(np.asarray(x, dtype=float))

    def logp_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        return self._logp(x), self._grad(x)


def _chi_mean(d):
    return math.sqrt(2.0) * math.exp(gammaln((d + 1) / 2.0) - gammaln(d / 2.0))


class GaussianTarget(TargetDensity):
    """Zero-mean Gaussian with precision matrix ``A``."""

    name = "gaussian"

    def __init__(self, precision):
        A = check_symmetric(precision)
        super().__init__(A.shape[0])
        self.precision = A
        Li = factorize(A).cholesky_inv
        cov = Li.T @ Li
        d = self.dim
        norm_mean = _chi_mean(d)
        norm_spec = MomentSpec(
            "precision_norm", self.precision_norm, norm_mean, max(d - norm_mean**2, 1e-300)
        )
        self.moments = ReferenceMoments(
            mean=np.zeros(d),
            cov=cov,
            bias_specs=(norm_spec,),
        )

    def precision_norm(self, x):
        """``||A^{1/2} x||`` evaluated as ``sqrt(x^T A x)``."""
        x = np.asarray(x, dtype=float)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, self.precision, x), 0.0))

    def logp_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        Ax = x @ self.precision
        return -0.5 * np.einsum("...i,...i->...", x, Ax), -Ax

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.einsum("...i,...i->...", x, x @ self.precision)

    def grad_log_density(self, x):
        return -(np.asarray(x, dtype=float) @ self.precision)

    def mode(self):
        return np.zeros(self.dim)


class StudentTTarget(TargetDensity):
    """Multivariate Student-t with scale ``A^{-1}`` and ``nu`` degrees of freedom."""

    name = "student-t"

    def __init__(self, precision, nu):
        A = check_symmetric(precision)
        super().__init__(A.shape[0])
        if not nu > 2:
            raise DataError("nu must exceed 2 for a finite covariance")
        self.precision = A
        self.nu = float(nu)
        d, nu = self.dim, self.nu
        Li = factorize(A).cholesky_inv
        cov = nu / (nu - 2.0) * (Li.T @ Li)
        # ||A^{1/2} x|| = chi_d * sqrt(nu / w), w ~ chi^2_nu
        inv_sqrt_w = math.exp(gammaln((nu - 1) / 2.0) - gammaln(nu / 2.0)) / math.sqrt(2.0)
        norm_mean = _chi_mean(d) * math.sqrt(nu) * inv_sqrt_w
        norm_sq = d * nu / (nu - 2.0)
        norm_spec = MomentSpec("precision_norm", self.precision_norm, norm_mean, norm_sq - norm_mean**2)
        self.moments = ReferenceMoments(mean=np.zeros(d), cov=cov, bias_specs=(norm_spec,))

    def precision_norm(self, x):
        x = np.asarray(x, dtype=float)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, self.precision, x), 0.0))

    def logp_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        Ax = x @ self.precision
        q = np.einsum("...i,...i->...", x, Ax)
        d, nu = self.dim, self.nu
        logp = -0.5 * (d + nu) * np.log1p(q / nu)
        grad = -((d + nu) / (nu + q))[..., None] * Ax
        return logp, grad

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        q = np.einsum("...i,...i->...", x, x @ self.precision)
        return -0.5 * (self.dim + self.nu) * np.log1p(q / self.nu)

    def grad_log_density(self, x):
        return self.logp_and_grad(x)[1]

    def mode(self):
        return np.zeros(self.dim)


class NealsFunnel(TargetDensity):
    """Neal's funnel on ``(x, y_1, ..., y_{d-1})``.

    ``x ~ N(0, sigma^2)`` and ``y_i | x ~ N(0, e^x)``; the ``-(d-1) x / 2``
    term is the log normaliser of the conditional.
    """

    name = "funnel"

    def __init__(self, dim, sigma):
        if dim < 2:
            raise DataError("funnel needs dim >= 2")
        if not sigma > 0:
            raise DataError("sigma must be positive")
        super().__init__(dim)
        self.sigma = float(sigma)
        var = np.full(dim, funnel_moment(1, self.sigma))
        var[0] = self.sigma**2
        mean = np.zeros(dim)
        self.moments = ReferenceMoments(mean=mean, cov=np.diag(var), bias_specs=coordinate_specs(mean, var))

    def logp_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        x = z[..., 0]
        y = z[..., 1:]
        s2 = self.sigma**2
        half_ysq = 0.5 * np.einsum("...i,...i->...", y, y)
        with np.errstate(over="ignore", invalid="ignore"):
            ex = np.exp(-x)
            logp = -0.5 * x * x / s2 - 0.5 * (self.dim - 1) * x - ex * half_ysq
            grad = np.empty_like(z)
            grad[..., 0] = -x / s2 - 0.5 * (self.dim - 1) + ex * half_ysq
            grad[..., 1:] = -ex[..., None] * y
        return logp, grad

    def log_density(self, z):
        z = np.asarray(z, dtype=float)
        x = z[..., 0]
        y = z[..., 1:]
        with np.errstate(over="ignore", invalid="ignore"):
            return (
                -0.5 * x * x / self.sigma**2
                - 0.5 * (self.dim - 1) * x
                - 0.5 * np.exp(-x) * np.einsum("...i,...i->...", y, y)
            )

    def grad_log_density(self, z):
        return self.logp_and_grad(z)[1]

    def mode(self):
        m = np.zeros(self.dim)
        m[0] = -0.5 * (self.dim - 1) * self.sigma**2
        return m

    def describe(self):
        return {"name": self.name, "dim": self.dim, "sigma": self.sigma}


def gaussian_target(A):
    return GaussianTarget(A)


def student_t_target(A, nu):
    return StudentTTarget(A, nu)


def neals_funnel(d, sigma):
    return NealsFunnel(d, sigma)


def funnel_moment(k, sigma):
    """``E[y_i^{2k}]`` under the funnel: ``2^k (2k)! / (4^k k!) * exp(k^2 sigma^2 / 2)``."""
    if k < 1 or int(k) != k:
        raise DataError("k must be a positive integer")
    k = int(k)
    coeff = 2**k * math.factorial(2 * k) / (4**k * math.factorial(k))
    return coeff * math.exp(k * k * sigma * sigma / 2.0)


def funnel_raw_moment(n, sigma):
    """``E[y_i^n]`` for any order ``n >= 1``; odd orders vanish by symmetry."""
    if n % 2:
        return 0.0
    return funnel_moment(n // 2, sigma)


def gradient_error(target, x, rel_step=1e-5):
    """Relative error between the analytic gradient and central differences.

    The error is ``||g_fd - g|| / max(1, ||g||)`` with per-coordinate step
    ``rel_step * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = rel_step * np.maximum(1.0, np.abs(x))
    E = np.eye(d) * h
    fp = target.log_density(x + E)
    fm = target.log_density(x - E)
    g_fd = (fp - fm) / (2 * h)
    g = target.grad_log_density(x)
    return float(np.linalg.norm(g_fd - g) / max(1.0, np.linalg.norm(g)))


def find_mode(target, x0, tol=1e-6, max_iter=10_000, divergence_window=20):
    """Maximise the log-density starting from ``x0``.

    Stops once ``||grad|| <= tol * max(1, ||grad(x0)||)``. Backed by
    ``scipy.optimize`` BFGS on the negative log-density.

    Raises:
        ImproperPosteriorError: the gradient norm grew monotonically over the
            last ``divergence_window`` iterations to far above its start, or
            the log-density overflowed to ``+inf``.
        ConvergenceError: the tolerance was not reached within ``max_iter``.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    g0 = target.grad_log_density(x0)
    if not np.all(np.isfinite(g0)):
        raise DataError("gradient is not finite at the starting point")
    g0_norm = float(np.linalg.norm(g0))
    goal = tol * max(1.0, g0_norm)
    if g0_norm <= goal:
        return x0

    norms = []

    def fun(x):
        with np.errstate(over="ignore", invalid="ignore"):
            lp, g = target.logp_and_grad(x)
        if float(lp) == np.inf:
            raise ImproperPosteriorError("log density is unbounded above; possibly improper posterior")
        return -float(lp), -np.asarray(g, dtype=float)

    def watch(xk):
        norms.append(float(np.linalg.norm(target.grad_log_density(xk))))
        tail = norms[-divergence_window:]
        if (
            len(tail) == divergence_window
            and all(b > a for a, b in zip(tail, tail[1:]))
            and tail[-1] > 1e6 * max(1.0, g0_norm)
        ):
            raise ImproperPosteriorError(
                f"gradient norm increased for {divergence_window} iterations "
                f"(now {tail[-1]:.3g}); possibly improper posterior"
            )

    x = x0
    # restart BFGS a few times: its inverse-Hessian estimate can stall on
    # badly scaled problems before reaching an absolute gradient tolerance
    for _ in range(5):
        res = optimize.minimize(
            fun,
            x,
            jac=True,
            method="BFGS",
            callback=watch,
            options={"gtol": goal / math.sqrt(target.dim), "maxiter": max_iter},
        )
        x = res.x
        if np.linalg.norm(target.grad_log_density(x)) <= goal:
            return x
    raise ConvergenceError(
        f"mode search stopped with gradient norm {np.linalg.norm(target.grad_log_density(x)):.3g} > {goal:.3g}"
    )


def hessian_diag(target, x, fd_step=1e-4):
    """Diagonal of ``-Hessian(log density)`` by central differences of the gradient.

    The step for coordinate ``i`` is ``fd_step * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("point must be finite")
    d = x.shape[-1]
    h = fd_step * np.maximum(1.0, np.abs(x))
    E = np.eye(d) * h
    g_plus = target.grad_log_density(x + E)
    g_minus = target.grad_log_density(x - E)
    return (np.diagonal(g_minus) - np.diagonal(g_plus)) / (2 * h)


class RescaledTarget(TargetDensity):
    """``g(z) = rho(a * z)`` with elementwise positive scales ``a``.

    No Jacobian term is added: it is a constant and cancels in every
    acceptance ratio.
    """

    def __init__(self, base, scales):
        a = np.asarray(scales, dtype=float)
        if a.shape != (base.dim,) or not np.all(a > 0) or not np.all(np.isfinite(a)):
            raise DataError("scales must be a finite positive vector of length dim")
        super().__init__(base.dim)
        self.base = base
        self.scales = a
        self.name = f"rescaled-{base.name}"

    def logp_and_grad(self, z):
        lp, g = self.base.logp_and_grad(self.pull_back(z))
        return lp, g * self.scales

    def log_density(self, z):
        return self.base.log_density(self.pull_back(z))

    def grad_log_density(self, z):
        return self.base.grad_log_density(self.pull_back(z)) * self.scales

    def pull_back(self, z):
        """Map draws of ``z`` to the original coordinates ``x = a * z``."""
        return np.asarray(z, dtype=float) * self.scales

    def push_forward(self, x):
        return np.asarray(x, dtype=float) / self.scales

    def mode(self):
        m = self.base.mode()
        return None if m is None else self.push_forward(m)

    def describe(self):
        return {**self.base.describe(), "rescaled": True}


def rescale(target, mode, eps=1e-8, fd_step=1e-4):
    """Rescale coordinates by ``a_i = 1 / sqrt(H_ii + eps)`` at ``mode``.

    Negative curvature estimates are clamped to zero before adding ``eps``.
    """
    H = np.maximum(hessian_diag(target, mode, fd_step=fd_step), 0.0) + eps
    if not np.all(H > 0):
        raise DataError("zero curvature along a coordinate; use eps > 0")
    return RescaledTarget(target, 1.0 / np.sqrt(H))
