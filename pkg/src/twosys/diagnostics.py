"""Effective sample size, R-hat, bias and error metrics.

Sample tensors have shape ``(runs, chains, steps, dim)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def as_sample_tensor(samples, min_steps=2):
    X = np.asarray(samples, dtype=float)
    if X.ndim != 4:
        raise DataError(f"expected (runs, chains, steps, dim), got shape {X.shape}")
    R, N, T, d = X.shape
    if R < 1 or N < 1 or T < min_steps or d < 1:
        raise DataError(f"sample tensor too small: {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("samples contain non-finite values")
    return X


BETWEEN_RUN_FORMS = ("literal", "calibrated")


def ess_between_run(samples, j=None, window=None, form="literal"):
    """ESS from the spread of per-run means.

    ``literal``: ``ESS_j = R N T Var(x_j) / Var(run means of x_j)`` with
    unbiased variances over all draws and over the ``R`` run means.

    ``calibrated``: ``R Var(x_j) / Var(run means of x_j)``, i.e. the literal
    value divided by ``N T``. For independent draws a run mean has variance
    ``Var(x_j) / (N T)``, so this form is about ``R N T``, the total number
    of draws, and is the one to divide by gradient counts.

    ``window`` keeps only the last ``window`` steps of every chain. A zero
    run-mean variance gives ``inf`` (check with :func:`math.isinf`).

    Returns:
        A float for a single coordinate ``j``, otherwise an array over
        coordinates.
    """
    X = as_sample_tensor(samples)
    if window is not None:
        X = X[:, :, -window:, :]
    R, N, T, d = X.shape
    if R < 2:
        raise DataError("between-run ESS needs at least two runs")
    if form not in BETWEEN_RUN_FORMS:
        raise DataError(f"unknown form {form!r}; expected one of {BETWEEN_RUN_FORMS}")
    flat = X.reshape(-1, d)
    total_var = flat.var(axis=0, ddof=1)
    run_means = X.mean(axis=(1, 2))
    between = run_means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = R * N * T if form == "literal" else R
        ess = np.where(between > 0, scale * total_var / np.where(between > 0, between, 1.0), np.inf)
    return float(ess[j]) if j is not None else ess


def autocovariance(x):
    """Biased autocovariance at all lags via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    return acov / n


def integrated_autocorr_time(x):
    """IACT by Geyer's initial positive sequence.

    Pairs ``rho_{2m} + rho_{2m+1}`` are summed while positive, giving
    ``tau = -1 + 2 sum_m (rho_{2m} + rho_{2m+1})``. ``tau`` is floored at
    ``1 / log10(T)`` so anticorrelated chains report a finite ESS above ``T``.
    Returns ``nan`` for a constant chain.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 10:
        raise DataError("need at least 10 draws")
    acov = autocovariance(x)
    if not acov[0] > 0:
        return float("nan")
    rho = acov / acov[0]
    m = (n - 1) // 2
    pairs = rho[0 : 2 * m : 2] + rho[1 : 2 * m + 1 : 2]
    nonpos = np.flatnonzero(pairs <= 0)
    stop = nonpos[0] if nonpos.size else pairs.size
    tau = -1.0 + 2.0 * float(np.sum(pairs[:stop]))
    return max(tau, 1.0 / math.log10(n))


def ess_autocorrelation(chain):
    """``T / tau`` for a single scalar chain; ``nan`` if the chain is constant."""
    chain = np.asarray(chain, dtype=float).ravel()
    tau = integrated_autocorr_time(chain)
    return chain.size / tau if np.isfinite(tau) else float("nan")


def ess_autocorrelation_chains(chains):
    """Sum of per-chain autocorrelation ESS over an array of shape ``(C, T)``."""
    chains = np.asarray(chains, dtype=float)
    return float(sum(ess_autocorrelation(c) for c in chains))


def gelman_rubin(chains):
    """Potential scale reduction ``sqrt(((n-1)/n W + B/n) / W)``.

    Args:
        chains: array-like of shape ``(m, n)``, ``m >= 2`` chains of length ``n``.

    Returns:
        R-hat, or ``nan`` when every chain is constant (``W = 0``).
    """
    C = np.asarray(chains, dtype=float)
    if C.ndim != 2 or C.shape[0] < 2 or C.shape[1] < 2:
        raise DataError("need at least 2 chains of length >= 2")
    m, n = C.shape
    W = float(np.mean(C.var(axis=1, ddof=1)))
    B = n * float(C.mean(axis=1).var(ddof=1))
    if W == 0:
        return float("nan")
    return math.sqrt(((n - 1) / n * W + B / n) / W)


def pooled_rhat(samples, window=None):
    """Per-coordinate R-hat treating every (run, particle) series as a chain."""
    X = as_sample_tensor(samples)
    if window is not None:
        X = X[:, :, -window:, :]
    R, N, T, d = X.shape
    chains = X.reshape(R * N, T, d)
    return np.array([gelman_rubin(chains[:, :, j]) for j in range(d)])


@dataclass
class BiasTrace:
    values: np.ndarray
    crossing_index: int = None
    crossing_gradients: int = None

    @property
    def reached(self):
        return self.crossing_index is not None


def bias_trace(estimates, moment_specs, grad_counts=None, threshold=0.01, cumulative=True):
    """Normalised squared error of moment estimates over iterations.

    Args:
        estimates: ``(T, k)`` cross-run, cross-chain averages of each
            statistic at every iteration.
        moment_specs: ``k`` :class:`~twosys.targets.MomentSpec` values.
        grad_counts: cumulative gradients per chain at each iteration;
            defaults to the iteration index.
        threshold: the bias level to cross (strictly).
        cumulative: average the estimates over iterations ``0..t`` before
            scoring. With ``False`` each iteration is scored on its own.

    Returns:
        :class:`BiasTrace` with ``max_i (f_hat_{t,i} - E f_i)^2 / Var f_i``
        and the first iteration (and its gradient count) strictly below
        ``threshold``; ``None`` when never reached.
    """
    F = np.asarray(estimates, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[1] != len(moment_specs):
        raise DataError("one estimate column per moment spec is required")
    if cumulative:
        F = np.cumsum(F, axis=0) / np.arange(1, F.shape[0] + 1)[:, None]
    mu = np.array([m.expectation for m in moment_specs])
    var = np.array([m.variance for m in moment_specs])
    L = np.max((F - mu) ** 2 / var, axis=1)
    hits = np.flatnonzero(L < threshold)
    if not hits.size:
        return BiasTrace(L)
    t = int(hits[0])
    grads = np.arange(F.shape[0]) if grad_counts is None else np.asarray(grad_counts)
    return BiasTrace(L, t, int(grads[t]))


def mcare(estimated_means, reference_means, reference_stds):
    """``max_j |mu_hat_j - mu_j| / std_j``."""
    est = np.asarray(estimated_means, dtype=float)
    ref = np.asarray(reference_means, dtype=float)
    std = np.asarray(reference_stds, dtype=float)
    if np.any(std <= 0):
        raise DataError("reference standard deviations must be positive")
    return float(np.max(np.abs(est - ref) / std))


def ess_per_grad(ess, gradient_total):
    """``(median, min)`` of per-coordinate ESS divided by the gradient count."""
    if not gradient_total > 0:
        raise DataError("gradient total must be positive")
    ess = np.asarray(ess, dtype=float)
    return float(np.median(ess)) / gradient_total, float(np.min(ess)) / gradient_total


@dataclass
class DiagnosticsReport:
    """Per-coordinate diagnostics of a sample tensor.

    ``ess`` is the estimator selected in :func:`diagnose`; both estimators
    are kept.
    """

    ess: np.ndarray
    ess_between_run: np.ndarray
    ess_autocorr: np.ndarray
    rhat: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    gradient_total: int
    ess_per_grad_median: float
    ess_per_grad_min: float
    ess_degenerate: list = field(default_factory=list)
    estimator: str = "between-run"

    @property
    def max_rhat(self):
        finite = self.rhat[~np.isnan(self.rhat)]
        return float(finite.max()) if finite.size else float("nan")


AUTO_BETWEEN_MIN_RUNS = 4
ESS_ESTIMATORS = ("auto", "between-run", "autocorrelation")


def diagnose(samples, gradient_total, window=None, estimator="auto", between_form="calibrated"):
    """Compute every estimator on ``samples``.

    ESS (both estimators) uses only the last ``window`` steps of every chain;
    R-hat, means and variances use all the draws passed in.

    Args:
        samples: ``(runs, chains, steps, dim)`` post-burn-in draws.
        gradient_total: fresh gradient evaluations spent producing the draws
            the ESS is computed from (the window, when one is given).
        window: ESS window length in steps.
        estimator: ESS used for ``ess`` and ESS/Grad. ``auto`` picks the
            between-run estimator with at least ``AUTO_BETWEEN_MIN_RUNS``
            runs, else the autocorrelation one (with very few runs the
            run-mean variance has too few degrees of freedom).
        between_form: ``calibrated`` or ``literal``, see :func:`ess_between_run`.
    """
    if estimator not in ESS_ESTIMATORS:
        raise DataError(f"unknown ESS estimator {estimator!r}; expected one of {ESS_ESTIMATORS}")
    full = as_sample_tensor(samples)
    X = full if window is None else full[:, :, -window:, :]
    R, N, T, d = X.shape
    flat = full.reshape(-1, d)
    between = ess_between_run(X, form=between_form) if R >= 2 else np.full(d, np.nan)
    if T >= 10:
        series = X.reshape(R * N, T, d)
        auto = np.array([ess_autocorrelation_chains(series[:, :, j]) for j in range(d)])
    else:
        auto = np.full(d, np.nan)
    rhat = pooled_rhat(full) if R * N >= 2 else np.full(d, np.nan)
    if estimator == "auto":
        estimator = "between-run" if R >= AUTO_BETWEEN_MIN_RUNS else "autocorrelation"
    if estimator == "between-run" and R < 2:
        raise DataError("between-run ESS needs at least two runs")
    ess = between if estimator == "between-run" else auto
    med, mn = ess_per_grad(ess, gradient_total)
    return DiagnosticsReport(
        ess=ess,
        ess_between_run=between,
        ess_autocorr=auto,
        rhat=rhat,
        means=flat.mean(axis=0),
        variances=flat.var(axis=0, ddof=1),
        gradient_total=int(gradient_total),
        ess_per_grad_median=med,
        ess_per_grad_min=mn,
        ess_degenerate=[int(j) for j in np.flatnonzero(~np.isfinite(ess))],
        estimator=estimator,
    )
