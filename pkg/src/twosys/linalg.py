"""Dense SPD utilities and the covariance estimators used by the samplers.

Matrices are plain ``numpy`` arrays. The only structured types are the
:class:`SpdFactorization` (cached square roots of a covariance) and the
:class:`AdaptiveStat` (a running covariance average with a counter).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, FactorizationError

SYMMETRY_RTOL = 1e-12


def _as_square(C):
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise DataError(f"expected a non-empty square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise DataError("matrix contains non-finite entries")
    return C


def check_symmetric(C, rtol=SYMMETRY_RTOL):
    """Return ``C`` symmetrised, raising if it is asymmetric beyond ``rtol``."""
    C = _as_square(C)
    scale = max(np.max(np.abs(C)), np.finfo(float).tiny)
    if np.max(np.abs(C - C.T)) > rtol * scale:
        raise DataError("matrix is not symmetric")
    return 0.5 * (C + C.T)


def ensemble_covariance(points, jitter=0.0, ddof=1):
    """Sample covariance of an ensemble plus ``jitter * I``.

    Args:
        points: array of shape ``(N, d)``.
        jitter: non-negative diagonal loading.
        ddof: 1 for the unbiased estimator (default), 0 for the biased one.

    Returns:
        ``(d, d)`` covariance. With a single point the spread term is zero,
        so the result is ``jitter * I``.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DataError(f"expected points of shape (N, d), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("ensemble contains non-finite positions")
    if jitter < 0:
        raise DataError("jitter must be non-negative")
    n, d = X.shape
    if n - ddof <= 0:
        cov = np.zeros((d, d))
    else:
        R = X - X.mean(axis=0)
        cov = (R.T @ R) / (n - ddof)
        cov = 0.5 * (cov + cov.T)
    if jitter:
        cov[np.diag_indices(d)] += jitter
    return cov


@dataclass(frozen=True)
class SpdFactorization:
    """A positive-definite matrix with its Cholesky factor and principal root.

    Attributes:
        source: the factorised matrix ``C``.
        cholesky: lower-triangular ``L`` with ``L @ L.T == C``.
        sym_sqrt: symmetric ``R`` with ``R @ R == C``.
        cholesky_inv: ``L^{-1}``, used to evaluate Gaussian densities.
        logdet: ``log det C``.
    """

    source: np.ndarray
    cholesky: np.ndarray
    sym_sqrt: np.ndarray
    cholesky_inv: np.ndarray
    logdet: float

    @property
    def dim(self):
        return self.source.shape[0]


def factorize(C):
    """Factorise an SPD matrix.

    Raises:
        FactorizationError: if the smallest eigenvalue is not positive.
    """
    C = check_symmetric(C)
    w, V = np.linalg.eigh(C)
    if w[0] <= 0:
        raise FactorizationError(
            f"matrix is not positive definite: smallest eigenvalue {w[0]:.6g}",
            eigenvalue=float(w[0]),
        )
    R = (V * np.sqrt(w)) @ V.T
    R = 0.5 * (R + R.T)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        # eigh said positive but Cholesky disagrees: eigenvalue at roundoff level
        raise FactorizationError(str(exc), eigenvalue=float(w[0])) from exc
    L_inv = np.linalg.solve(L, np.eye(C.shape[0]))
    return SpdFactorization(
        source=C,
        cholesky=L,
        sym_sqrt=R,
        cholesky_inv=np.tril(L_inv),
        logdet=float(np.sum(np.log(w))),
    )


def operator_norm(C):
    """Spectral norm of a symmetric matrix."""
    return float(np.max(np.abs(np.linalg.eigvalsh(C))))


def cap_operator_norm(C, cap):
    """Rescale ``C`` so that its spectral norm is at most ``cap``.

    Returns ``C`` itself (not a copy) when it is already within the cap.
    """
    if cap <= 0:
        raise DataError("cap must be positive")
    norm = operator_norm(C)
    if norm <= cap:
        return C
    return C * (cap / norm)


@dataclass(frozen=True)
class AdaptiveStat:
    """Running covariance average ``cov`` with adaptation counter ``counter``.

    The counter is the weight denominator of the next update; it is not
    advanced by :func:`running_update` itself.
    """

    cov: np.ndarray
    counter: int = 1
    cap: float = 1e6

    def __post_init__(self):
        if self.counter < 1:
            raise DataError("adaptation counter must be >= 1")
        if self.cap <= 0:
            raise DataError("cap must be positive")

    @classmethod
    def identity(cls, dim, cap=1e6):
        return cls(cov=np.eye(dim), counter=1, cap=cap)

    def advanced(self):
        return replace(self, counter=self.counter + 1)


def running_update(stat, batch_cov):
    """Blend ``batch_cov`` into the running average with weight ``1/K``.

    Computes ``batch_cov / K + (1 - 1/K) * stat.cov`` and caps its spectral
    norm at ``stat.cap``. At ``K == 1`` the history is discarded and the
    result is ``batch_cov`` bit for bit (before capping).
    """
    B = np.asarray(batch_cov, dtype=float)
    if B.shape != stat.cov.shape:
        raise DataError(f"dimension mismatch: stat {stat.cov.shape}, batch {B.shape}")
    K = stat.counter
    if K == 1:
        new = B.copy()
    else:
        new = B / K + (1.0 - 1.0 / K) * stat.cov
    return replace(stat, cov=cap_operator_norm(new, stat.cap))


def random_orthogonal(dim, rng):
    """Haar-distributed orthogonal matrix (QR of a Gaussian, sign-corrected)."""
    Z = rng.standard_normal((dim, dim))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.diag(R))


def random_spd(dim, eig_min, eig_max, seed=None):
    """SPD matrix with eigenvalues linearly spaced in ``[eig_min, eig_max]``.

    The eigenbasis is a Haar-random rotation drawn from ``seed``.
    """
    if dim < 1:
        raise DataError("dimension must be positive")
    if not 0 < eig_min <= eig_max:
        raise DataError("need 0 < eig_min <= eig_max")
    rng = np.random.default_rng(seed)
    eigs = np.linspace(eig_min, eig_max, dim)
    Q = random_orthogonal(dim, rng)
    A = (Q * eigs) @ Q.T
    return 0.5 * (A + A.T)
