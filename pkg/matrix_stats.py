"""Triangular linear algebra and matrix-variate samplers.

Covers lower/upper Cholesky factors, Bartlett-type samplers for Wishart and
inverse-Wishart Cholesky factors, the mirror-Wishart distribution and Haar
distributed orthogonal matrices. Every sampler takes a
``numpy.random.Generator``; :class:`RngStream` makes reproducible ones.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

import config
from tensor_core import NotPositiveDefiniteError, ParameterError, ShapeError


@dataclass(frozen=True)
class RngStream:
    """
    Reproducible random stream identified by a (seed, stream) pair.

    ``generator()`` always returns a fresh PCG64 generator seeded from
    ``SeedSequence([seed, stream])``, so identical pairs replay identical
    draws. Child streams hash ``(seed, stream, key)`` into a new stream id,
    which is how replicates and chains get independent streams that depend
    only on their index.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.stream < 0:
            raise ParameterError("seed and stream must be non-negative integers")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def child(self, key: int) -> "RngStream":
        words = np.random.SeedSequence([self.seed, self.stream, int(key)]).generate_state(2, np.uint32)
        return RngStream(self.seed, int(words[0]) | (int(words[1]) << 32))


def _as_square(M, name: str = "matrix") -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {M.shape}")
    return M


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def check_spd(M, name: str = "matrix") -> np.ndarray:
    """
    Validate a symmetric positive definite matrix.

    Args:
        M: Candidate matrix.
        name: Label used in error messages.

    Returns:
        np.ndarray: The matrix as float64.
    """
    M = _as_square(M, name)
    if not np.all(np.isfinite(M)):
        raise ParameterError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny)
    if np.max(np.abs(M - M.T)) > config.SYMMETRY_RTOL * scale:
        raise ParameterError(f"{name} is not symmetric")
    chol_lower(M)
    return M


def check_lower_triangular(L, name: str = "factor") -> np.ndarray:
    L = _as_square(L, name)
    if np.any(np.triu(L, 1) != 0):
        raise ParameterError(f"{name} is not lower triangular")
    if np.any(np.diag(L) <= 0) or not np.all(np.isfinite(L)):
        raise NotPositiveDefiniteError(f"{name} needs a strictly positive diagonal")
    return L


def check_orthogonal(Q, name: str = "rotation") -> np.ndarray:
    Q = _as_square(Q, name)
    if np.max(np.abs(Q.T @ Q - np.eye(Q.shape[0]))) > config.ORTHOGONALITY_TOLERANCE:
        raise ParameterError(f"{name} is not orthogonal")
    return Q


def chol_lower(M) -> np.ndarray:
    """
    Lower triangular Cholesky factor L with L L^T = M.

    Raises NotPositiveDefiniteError when a pivot falls below
    ``config.PIVOT_RTOL`` times the largest diagonal entry.
    """
    M = _as_square(M)
    try:
        L = cholesky(symmetrize(M), lower=True)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {e}") from e
    pivots = np.diag(L) ** 2
    if np.any(pivots <= config.PIVOT_RTOL * np.max(np.abs(np.diag(M)))):
        raise NotPositiveDefiniteError("matrix is numerically singular (Cholesky pivot too small)")
    return L


def _exchange(q: int) -> np.ndarray:
    return np.eye(q)[::-1]


def chol_upper(M) -> np.ndarray:
    """Upper triangular U with U U^T = M, via U = J chol_lower(J M J) J."""
    M = _as_square(M)
    J = _exchange(M.shape[0])
    return J @ chol_lower(J @ M @ J) @ J


def log_det_triangular(T: np.ndarray) -> float:
    """Log-determinant of a triangular matrix with positive diagonal."""
    diag = np.diag(T)
    if np.any(diag <= 0):
        raise NotPositiveDefiniteError("triangular factor has a nonpositive diagonal entry")
    return float(np.sum(np.log(diag)))


def log_det_spd(M: np.ndarray) -> float:
    return 2.0 * log_det_triangular(chol_lower(M))


def spd_inverse(M: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor."""
    M = _as_square(M)
    try:
        factor = cho_factor(symmetrize(M), lower=True)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {e}") from e
    return symmetrize(cho_solve(factor, np.eye(M.shape[0])))


def lower_inverse(L: np.ndarray) -> np.ndarray:
    return solve_triangular(L, np.eye(L.shape[0]), lower=True)


def _check_dof(nu: float, q: int) -> None:
    if q < 1:
        raise ParameterError(f"dimension must be >= 1, got {q}")
    if not nu > q - 1:
        raise ParameterError(f"degrees of freedom {nu} must exceed q - 1 = {q - 1}")


def sample_wishart_chol(nu: float, q: int, rng: np.random.Generator) -> np.ndarray:
    """
    Bartlett factor V of a Wishart_q(nu, I) draw, so V V^T ~ Wishart.

    Args:
        nu: Degrees of freedom, nu > q - 1.
        q: Dimension.
        rng: Random generator.

    Returns:
        np.ndarray: Lower triangular V with V[i,i]^2 ~ chi^2_{nu-i}
        (0-based i) and standard normal entries below the diagonal.
    """
    _check_dof(nu, q)
    V = np.zeros((q, q))
    V[np.diag_indices(q)] = np.sqrt(rng.chisquare(nu - np.arange(q)))
    rows, cols = np.tril_indices(q, -1)
    V[rows, cols] = rng.standard_normal(rows.size)
    return V


def _sample_sequential_lower(shapes: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """
    Row-by-row lower triangular draw with W[i,i]^2 ~ inverse-gamma(shape_i, 1/2)
    and W[i,:i] | . ~ N(0, W[i,i]^2 W[:i,:i]^T W[:i,:i]).
    """
    q = len(shapes)
    W = np.zeros((q, q))
    for i, shape in enumerate(shapes):
        W[i, i] = np.sqrt(1.0 / rng.gamma(shape, 2.0))
        if i > 0:
            W[i, :i] = W[i, i] * (W[:i, :i].T @ rng.standard_normal(i))
    return W


def sample_inverse_wishart_chol(nu: float, q: int, rng: np.random.Generator) -> np.ndarray:
    """
    Lower Cholesky factor W of an inverse-Wishart_q(nu, I) draw.

    Uses the Bartlett decomposition for the inverse-Wishart: with 1-based i,
    W[i,i]^2 ~ inverse-gamma((nu - q + i)/2, 1/2) and the leading row block
    is conditionally normal. Then (W W^T)^{-1} ~ Wishart_q(nu, I).
    """
    _check_dof(nu, q)
    return _sample_sequential_lower([(nu - q + i) / 2.0 for i in range(1, q + 1)], rng)


def sample_inverse_bartlett_chol(nu: float, q: int, rng: np.random.Generator) -> np.ndarray:
    """
    Lower triangular W whose inverse is a Wishart Bartlett factor.

    Same row construction as :func:`sample_inverse_wishart_chol` but with
    W[i,i]^2 ~ inverse-gamma((nu - i + 1)/2, 1/2). The entries of W^{-1} are
    then independent, squared diagonals gamma((nu - i + 1)/2, 1/2) and
    standard normal below the diagonal. This is the law of Phi^{-1} L in a
    Gibbs mode update.
    """
    _check_dof(nu, q)
    return _sample_sequential_lower([(nu - i + 1) / 2.0 for i in range(1, q + 1)], rng)


def mirror_wishart_mean(nu: float, Phi) -> np.ndarray:
    """
    Mean of a mirror-Wishart_q(nu, Phi) matrix: nu U D U^T, where U U^T is the
    upper Cholesky factorization of Phi and d_j = (nu + q + 1 - 2j)/nu.
    """
    Phi = _as_square(Phi, "scale matrix")
    q = Phi.shape[0]
    _check_dof(nu, q)
    U = chol_upper(Phi)
    d = (nu + q + 1 - 2 * np.arange(1, q + 1)) / nu
    return symmetrize(nu * (U * d) @ U.T)


def sample_mirror_wishart(nu: float, Phi, rng: np.random.Generator) -> np.ndarray:
    """
    Draw S = U V^T V U^T with V a Wishart Bartlett factor and U U^T the upper
    Cholesky factorization of Phi.
    """
    Phi = _as_square(Phi, "scale matrix")
    q = Phi.shape[0]
    _check_dof(nu, q)
    U = chol_upper(Phi)
    B = U @ sample_wishart_chol(nu, q, rng).T
    return symmetrize(B @ B.T)


def sample_haar_orthogonal(q: int, rng: np.random.Generator) -> np.ndarray:
    """
    Haar distributed q x q orthogonal matrix.

    QR-decomposes a standard normal matrix and flips each column of Q by the
    sign of the matching diagonal entry of R.
    """
    if q < 1:
        raise ParameterError(f"dimension must be >= 1, got {q}")
    while True:
        Q, R = np.linalg.qr(rng.standard_normal((q, q)))
        signs = np.sign(np.diag(R))
        if np.all(signs != 0):
            return Q * signs
