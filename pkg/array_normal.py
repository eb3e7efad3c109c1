"""Array normal model: separable covariance, density, sampling, group actions and losses."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import solve_triangular

import config
from matrix_stats import (
    check_spd,
    chol_lower,
    log_det_triangular,
    sample_haar_orthogonal,
    symmetrize,
)
from tensor_core import (
    NotPositiveDefiniteError,
    ParameterError,
    ShapeError,
    check_dims,
    frob_norm_sq,
    kron_list,
    tucker_product,
    tucker_solve_lower,
)


def unit_determinant(M: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Rescale an SPD matrix to determinant one.

    Returns:
        Tuple[np.ndarray, float]: (M / det(M)^{1/q}, det(M)^{1/q}).
    """
    q = M.shape[0]
    scale = float(np.exp(2.0 * log_det_triangular(chol_lower(M)) / q))
    return symmetrize(M / scale), scale


@dataclass(frozen=True, eq=False)
class SeparableCovariance:
    """
    Covariance sigma2 * (Sigma_K kron ... kron Sigma_1) with det(Sigma_k) = 1.

    ``factor_chols`` holds the lower Cholesky factors Psi_k of each Sigma_k
    and is filled on construction, which also validates the invariants.
    """

    sigma2: float
    factors: Tuple[np.ndarray, ...]
    factor_chols: Tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        sigma2 = float(self.sigma2)
        if not np.isfinite(sigma2) or sigma2 <= 0:
            raise ParameterError(f"sigma2 must be a positive finite number, got {self.sigma2}")
        factors = tuple(
            symmetrize(check_spd(np.atleast_2d(np.asarray(F, dtype=np.float64)), f"factor {k}"))
            for k, F in enumerate(self.factors)
        )
        if not factors:
            raise ParameterError("at least one covariance factor is required")
        chols = []
        for k, F in enumerate(factors):
            L = chol_lower(F)
            if abs(np.exp(log_det_triangular(L) * 2.0) - 1.0) > config.DET_TOLERANCE:
                raise ParameterError(f"factor {k} does not have unit determinant")
            chols.append(L)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "factor_chols", tuple(chols))

    @classmethod
    def identity(cls, dims: Sequence[int], sigma2: float = 1.0) -> "SeparableCovariance":
        return cls(sigma2, tuple(np.eye(d) for d in check_dims(dims)))

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(F.shape[0] for F in self.factors)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def total_covariance(self, cap: Optional[int] = None) -> np.ndarray:
        """Dense sigma2 * (Sigma_K kron ... kron Sigma_1); only for small p."""
        return self.sigma2 * kron_list(self.factors[::-1], cap=cap)

    def precisions(self) -> List[np.ndarray]:
        """Per-mode precision matrices (sigma2 Sigma_k)^{-1}."""
        out = []
        for L in self.factor_chols:
            Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
            out.append(symmetrize(Linv.T @ Linv) / self.sigma2)
        return out

    def allclose(self, other: "SeparableCovariance", rtol: float = 1e-8, atol: float = 0.0) -> bool:
        if self.dims != other.dims:
            return False
        return bool(
            np.isclose(self.sigma2, other.sigma2, rtol=rtol, atol=atol)
            and all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.factors, other.factors))
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"sigma2": self.sigma2, "factors": [F.tolist() for F in self.factors]}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SeparableCovariance":
        try:
            sigma2, raw = payload["sigma2"], payload["factors"]
        except KeyError as e:
            raise ParameterError(f"covariance payload is missing {e}") from e
        if not isinstance(raw, list):
            raise ParameterError("covariance factors must be a list of matrices")
        try:
            return cls(float(sigma2), tuple(np.asarray(F, dtype=np.float64) for F in raw))
        except (ParameterError, ShapeError):
            raise
        except NotPositiveDefiniteError as e:
            raise ParameterError(f"covariance payload is invalid: {e}") from e
        except (TypeError, ValueError) as e:
            raise ParameterError(f"covariance payload has malformed values: {e}") from e


def normalize_factors(sigma2_raw: float, raw: Sequence[np.ndarray]) -> SeparableCovariance:
    """
    Move the scale of each raw factor into sigma2.

    Args:
        sigma2_raw: Positive scalar multiplying the raw Kronecker product.
        raw: Positive definite matrices, one per mode.

    Returns:
        SeparableCovariance: Same total covariance with det(Sigma_k) = 1.
    """
    factors = []
    sigma2 = float(sigma2_raw)
    for M in raw:
        F, scale = unit_determinant(np.atleast_2d(np.asarray(M, dtype=np.float64)))
        factors.append(F)
        sigma2 *= scale
    return SeparableCovariance(sigma2, tuple(factors))


def random_covariance(dims: Sequence[int], rng: np.random.Generator, spread: float = 0.5) -> SeparableCovariance:
    """Random separable covariance, handy for tests and studies away from the identity."""
    raw = []
    for d in check_dims(dims):
        A = np.eye(d) + spread * rng.standard_normal((d, d))
        raw.append(A @ A.T + 0.1 * np.eye(d))
    return normalize_factors(float(np.exp(spread * rng.standard_normal())), raw)


def _split_samples(X: np.ndarray, dims: Tuple[int, ...]) -> int:
    if X.shape[:-1] != dims or X.ndim != len(dims) + 1:
        raise ShapeError(f"data of shape {X.shape} does not match covariance dims {dims} plus a sample mode")
    return X.shape[-1]


def log_density_raw(X: np.ndarray, sigma2: float, factor_chols: Sequence[np.ndarray]) -> float:
    """
    Array normal log-density for factors that need not have unit determinant.

    Args:
        X: Data of shape (p_1, ..., p_K, n).
        sigma2: Scale.
        factor_chols: Lower Cholesky factors Psi_k of each Sigma_k.

    Returns:
        float: Log-density summed over the n samples.
    """
    dims = tuple(L.shape[0] for L in factor_chols)
    n = _split_samples(X, dims)
    p = int(np.prod(dims))
    log_dets = sum((p / d) * 2.0 * log_det_triangular(L) for d, L in zip(dims, factor_chols))
    resid = tucker_solve_lower(X, list(enumerate(factor_chols)))
    return float(
        -0.5 * n * p * np.log(2.0 * np.pi)
        - 0.5 * n * p * np.log(sigma2)
        - 0.5 * n * log_dets
        - frob_norm_sq(resid) / (2.0 * sigma2)
    )


def log_density(X: np.ndarray, cov: SeparableCovariance) -> float:
    """Log-density of data with a trailing sample mode under ``cov``."""
    return log_density_raw(X, cov.sigma2, cov.factor_chols)


def sample_array_normal(
    dims: Sequence[int], cov: SeparableCovariance, n: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Draw n mean-zero samples stacked along a trailing mode.

    Returns sigma * Z x {Psi_1, ..., Psi_K, I_n} for standard normal Z.
    """
    dims = check_dims(dims)
    if dims != cov.dims:
        raise ShapeError(f"dims {dims} do not match covariance dims {cov.dims}")
    if n < 1:
        raise ParameterError(f"sample size must be >= 1, got {n}")
    shape = dims + (int(n),)
    Z = np.reshape(rng.standard_normal(int(np.prod(shape))), shape, order="F")
    return np.sqrt(cov.sigma2) * tucker_product(Z, list(enumerate(cov.factor_chols)))


@dataclass(frozen=True, eq=False)
class GroupElement:
    """
    Element (a, A_1, ..., A_K) with a > 0 and det(A_k) = 1.

    Lower triangular A_k give the triangular group the UMREE is equivariant
    under; general unit-determinant A_k give the special linear group;
    orthogonal A_k give rotations.
    """

    a: float
    mats: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.a > 0:
            raise ParameterError(f"group scale must be positive, got {self.a}")
        mats = tuple(np.atleast_2d(np.asarray(A, dtype=np.float64)) for A in self.mats)
        for k, A in enumerate(mats):
            if A.shape[0] != A.shape[1]:
                raise ShapeError(f"group matrix {k} is not square")
            if abs(np.linalg.det(A) - 1.0) > config.DET_TOLERANCE:
                raise ParameterError(f"group matrix {k} does not have unit determinant")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "mats", mats)

    @classmethod
    def identity(cls, dims: Sequence[int]) -> "GroupElement":
        return cls(1.0, tuple(np.eye(d) for d in check_dims(dims)))

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(A.shape[0] for A in self.mats)

    def inverse(self) -> "GroupElement":
        return GroupElement(1.0 / self.a, tuple(np.linalg.inv(A) for A in self.mats))


def _unit_det_matrix(A: np.ndarray) -> np.ndarray:
    det = np.linalg.det(A)
    if det < 0:
        A = A.copy()
        A[0] = -A[0]
        det = -det
    return A / det ** (1.0 / A.shape[0])


def random_special_linear(dims: Sequence[int], rng: np.random.Generator) -> GroupElement:
    mats = tuple(_unit_det_matrix(np.eye(d) + 0.3 * rng.standard_normal((d, d))) for d in check_dims(dims))
    return GroupElement(float(np.exp(0.5 * rng.standard_normal())), mats)


def random_lower_group(dims: Sequence[int], rng: np.random.Generator) -> GroupElement:
    mats = []
    for d in check_dims(dims):
        L = np.tril(0.5 * rng.standard_normal((d, d)), -1) + np.diag(np.exp(0.3 * rng.standard_normal(d)))
        mats.append(L / np.exp(np.mean(np.log(np.diag(L)))))
    return GroupElement(float(np.exp(0.5 * rng.standard_normal())), tuple(mats))


def random_orthogonal_group(dims: Sequence[int], rng: np.random.Generator) -> GroupElement:
    mats = []
    for d in check_dims(dims):
        Q = sample_haar_orthogonal(d, rng)
        if np.linalg.det(Q) < 0:
            Q[:, 0] = -Q[:, 0]
        mats.append(Q)
    return GroupElement(1.0, tuple(mats))


def act_on_data(g: GroupElement, X: np.ndarray) -> np.ndarray:
    """Map X to a * X x {A_1, ..., A_K, I_n}."""
    K = len(g.mats)
    if X.ndim not in (K, K + 1) or X.shape[:K] != g.dims:
        raise ShapeError(f"data of shape {X.shape} does not match group dims {g.dims}")
    return g.a * tucker_product(X, list(enumerate(g.mats)))


def act_on_param(g: GroupElement, cov: SeparableCovariance) -> SeparableCovariance:
    """
    Map (sigma, Psi_k) to (a sigma, A_k Psi_k).

    Expressed on covariances as sigma2 -> a^2 sigma2 and
    Sigma_k -> A_k Sigma_k A_k^T, followed by a fresh Cholesky factorization
    since A_k Psi_k is not triangular for general A_k.
    """
    if g.dims != cov.dims:
        raise ShapeError(f"group dims {g.dims} do not match covariance dims {cov.dims}")
    factors = tuple(symmetrize(A @ F @ A.T) for A, F in zip(g.mats, cov.factors))
    return SeparableCovariance(g.a ** 2 * cov.sigma2, factors)


def nonnegative_loss(loss: float, scale: float) -> float:
    """
    Snap a loss that rounding pushed just below zero back to zero.

    Losses below ``-config.LOSS_ROUNDING_RTOL * max(scale, 1)`` are returned
    unchanged and logged.
    """
    loss = float(loss)
    if loss >= 0.0:
        return loss
    if loss >= -config.LOSS_ROUNDING_RTOL * max(float(scale), 1.0):
        return 0.0
    logger.warning(f"negative loss {loss:.3e} exceeds rounding tolerance for scale {scale:.3e}")
    return loss


def _check_same_dims(truth: SeparableCovariance, estimate: SeparableCovariance) -> None:
    if truth.dims != estimate.dims:
        raise ShapeError(f"covariance dims differ: {truth.dims} vs {estimate.dims}")


def _relative_traces(truth: SeparableCovariance, estimate: SeparableCovariance) -> List[float]:
    # tr(S_k Sigma_k^{-1}) = ||Psi_k^{-1} chol(S_k)||_F^2
    return [
        float(np.sum(solve_triangular(Psi, R, lower=True) ** 2))
        for Psi, R in zip(truth.factor_chols, estimate.factor_chols)
    ]


def weighted_stein_loss(
    truth: SeparableCovariance, estimate: SeparableCovariance, weights: Sequence[float]
) -> float:
    """
    Weighted multiway Stein's loss.

    Args:
        truth: True covariance (sigma2, Sigma_k).
        estimate: Estimate (s2, S_k).
        weights: Positive weight per mode.

    Returns:
        float: (s2/sigma2) sum_k (w_k/p_k) tr(S_k Sigma_k^{-1})
        - (sum w) log(s2/sigma2) - sum w.
    """
    _check_same_dims(truth, estimate)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (truth.order,) or np.any(weights <= 0):
        raise ParameterError(f"need {truth.order} positive weights, got {weights.tolist()}")
    ratio = estimate.sigma2 / truth.sigma2
    traces = np.asarray(_relative_traces(truth, estimate))
    dims = np.asarray(truth.dims, dtype=np.float64)
    total = weights.sum()
    trace_term = ratio * float(np.sum(weights / dims * traces))
    log_term = total * float(np.log(ratio))
    return nonnegative_loss(trace_term - log_term - total, trace_term + abs(log_term) + total)


def multiway_stein_loss(truth: SeparableCovariance, estimate: SeparableCovariance) -> float:
    """Multiway Stein's loss: the weighted loss with every weight equal to p."""
    return weighted_stein_loss(truth, estimate, [truth.size] * truth.order)


def stein_loss_matrices(S: np.ndarray, Sigma: np.ndarray) -> float:
    """Stein's loss tr(S Sigma^{-1}) - log|S Sigma^{-1}| - p for dense SPD matrices."""
    L_sigma = chol_lower(Sigma)
    B = solve_triangular(L_sigma, chol_lower(S), lower=True)
    trace_term = float(np.sum(B ** 2))
    log_term = 2.0 * float(np.sum(np.log(np.abs(np.diag(B)))))
    return nonnegative_loss(trace_term - log_term - S.shape[0], trace_term + abs(log_term) + S.shape[0])


def stein_loss_full(
    truth: SeparableCovariance, estimate: SeparableCovariance, cap: Optional[int] = None
) -> float:
    """Stein's loss on the full p x p covariance matrices (p limited by the Kronecker cap)."""
    _check_same_dims(truth, estimate)
    return stein_loss_matrices(estimate.total_covariance(cap), truth.total_covariance(cap))
