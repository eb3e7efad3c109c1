"""Covariance estimators for the array normal model.

Provides the flip-flop MLE, a Gibbs sampler for the posterior under the
right invariant prior, the equivariant estimators built on its output
(multiway Stein UMREE, its weighted variant and the Stein's-loss UMREE), and
the multiway Takemura estimator that averages UMREEs over random rotations.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import solve_triangular

import config
from array_normal import (
    SeparableCovariance,
    log_density_raw,
    normalize_factors,
    unit_determinant,
)
from matrix_stats import (
    RngStream,
    check_orthogonal,
    chol_lower,
    chol_upper,
    log_det_spd,
    lower_inverse,
    sample_haar_orthogonal,
    sample_wishart_chol,
    spd_inverse,
    symmetrize,
)
from tensor_core import (
    ArrayNormalError,
    KronCapError,
    NotPositiveDefiniteError,
    ParameterError,
    ShapeError,
    frob_norm_sq,
    kron_list,
    matricize,
    modes_except,
    tucker_product,
    tucker_solve_lower,
)


class EstimationError(ArrayNormalError):
    """An estimator could not produce a valid covariance estimate."""


_WARNED = set()


def _warn_once(key: Tuple, message: str) -> None:
    if key not in _WARNED:
        _WARNED.add(key)
        logger.warning(message)


def _data_shape(X: np.ndarray) -> Tuple[Tuple[int, ...], int, int]:
    """Split data of shape (p_1, ..., p_K, n) into (dims, n, p)."""
    if X.ndim < 2:
        raise ShapeError(f"data needs at least one mode plus a trailing sample mode, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ParameterError("data contains non-finite entries")
    dims = tuple(X.shape[:-1])
    return dims, X.shape[-1], int(np.prod(dims))


def mode_cross_product(X: np.ndarray, factor_chols: Sequence[np.ndarray], mode: int) -> np.ndarray:
    """
    Residual cross-product X_(k) Psi_{-k}^{-T} Psi_{-k}^{-1} X_(k)^T.

    Args:
        X: Data with a trailing sample mode.
        factor_chols: Current lower Cholesky factors, one per mode.
        mode: Mode k left untouched.

    Returns:
        np.ndarray: The p_k x p_k cross-product matrix.
    """
    K = len(factor_chols)
    Y = tucker_solve_lower(X, [(j, factor_chols[j]) for j in modes_except(K, mode)])
    Yk = matricize(Y, mode)
    return symmetrize(Yk @ Yk.T)


@dataclass
class EstimatorOutput:
    """An estimate together with the diagnostics of the run that produced it."""

    estimate: SeparableCovariance
    method: str
    iterations: int = 0
    final_objective: Optional[float] = None
    kept_draws: int = 0
    seed: Optional[int] = None
    scale_matrices: Optional[List[np.ndarray]] = None
    objective_trace: List[float] = field(default_factory=list)

    def diagnostics(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "kept_draws": self.kept_draws,
            "final_objective": self.final_objective,
            "seed": self.seed,
        }

    def to_dict(self) -> Dict[str, Any]:
        payload = self.estimate.to_dict()
        payload["diagnostics"] = self.diagnostics()
        return payload


# ---------------------------------------------------------------------------
# Flip-flop MLE
# ---------------------------------------------------------------------------

def mle_flipflop(
    X: np.ndarray,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    init: Optional[SeparableCovariance] = None,
) -> EstimatorOutput:
    """
    Maximum likelihood estimate by block coordinate ascent over the modes.

    Each mode update sets sigma2 Sigma_k to the maximizer given the other
    factors, X_(k) Psi_{-k}^{-T} Psi_{-k}^{-1} X_(k)^T p_k / (n p), and then
    splits it into a unit-determinant factor and the new sigma2. The
    log-likelihood is nondecreasing across sweeps.

    Args:
        X: Data of shape (p_1, ..., p_K, n).
        tol: Relative log-likelihood change that stops the iteration.
        max_iter: Maximum number of sweeps.
        init: Optional starting point (identity factors by default).

    Returns:
        EstimatorOutput: Estimate with the log-likelihood trace.
    """
    tol = config.FLIPFLOP_TOL if tol is None else tol
    max_iter = config.FLIPFLOP_MAX_ITER if max_iter is None else max_iter
    dims, n, p = _data_shape(X)
    K = len(dims)
    for k, d in enumerate(dims):
        if n * p / d < d:
            _warn_once(("mle", dims, n, k), f"mode {k}: n*p/p_k = {n * p / d:g} < p_k = {d}; the MLE may not exist")

    if init is not None:
        if init.dims != dims:
            raise ShapeError(f"initial value dims {init.dims} do not match data dims {dims}")
        chols = list(init.factor_chols)
        sigma2 = init.sigma2
    else:
        chols = [np.eye(d) for d in dims]
        sigma2 = frob_norm_sq(X) / (n * p)
        if sigma2 <= 0:
            raise EstimationError("data are identically zero")

    loglik = log_density_raw(X, sigma2, chols)
    trace = [loglik]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for k in range(K):
            update = mode_cross_product(X, chols, k) * dims[k] / (n * p)
            try:
                factor, sigma2 = unit_determinant(update)
                chols[k] = chol_lower(factor)
            except NotPositiveDefiniteError as e:
                raise EstimationError(f"mode {k} update is singular (rank-deficient matricization)") from e
        new_loglik = log_density_raw(X, sigma2, chols)
        trace.append(new_loglik)
        logger.debug(f"flip-flop sweep {iterations}: log-likelihood {new_loglik:.12g}")
        converged = abs(new_loglik - loglik) <= tol * max(abs(loglik), 1.0)
        loglik = new_loglik
        if converged:
            break
    else:
        logger.info(f"flip-flop stopped at max_iter={max_iter} without meeting tol={tol:g}")

    estimate = SeparableCovariance(sigma2, tuple(symmetrize(L @ L.T) for L in chols))
    return EstimatorOutput(estimate, "mle", iterations=iterations, final_objective=loglik, objective_trace=trace)


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------

@dataclass
class GibbsConfig:
    """
    Schedule and seed for one Gibbs run.

    ``full_precision`` also accumulates the dense p x p precision needed by
    the Stein's-loss UMREE; ``keep_draws`` stores every kept (sigma2, Psi_k).
    """

    total_iters: Optional[int] = None
    burn_in: Optional[int] = None
    init: Optional[SeparableCovariance] = None
    rng: RngStream = field(default_factory=lambda: RngStream(config.MASTER_SEED))
    keep_draws: bool = False
    full_precision: bool = False

    def __post_init__(self):
        if self.total_iters is None:
            self.total_iters = config.GIBBS_TOTAL_ITERS
        if self.burn_in is None:
            self.burn_in = config.GIBBS_BURN_IN
        if self.burn_in < 0 or self.burn_in >= self.total_iters:
            raise ParameterError(
                f"burn_in ({self.burn_in}) must be in [0, total_iters) with total_iters={self.total_iters}"
            )


@dataclass
class GibbsChain:
    """Running sums of posterior draws kept after burn-in."""

    dims: Tuple[int, ...]
    n: int
    seed: int
    total_iters: int
    precision_sums: List[np.ndarray]
    kept: int = 0
    full_precision_sum: Optional[np.ndarray] = None
    draws: List[Tuple[float, Tuple[np.ndarray, ...]]] = field(default_factory=list)

    def mean_precisions(self) -> List[np.ndarray]:
        """Monte Carlo estimates of E[(sigma2 Sigma_k)^{-1} | X]."""
        if self.kept == 0:
            raise EstimationError("chain has no kept draws")
        return [S / self.kept for S in self.precision_sums]

    def mean_full_precision(self) -> np.ndarray:
        """Monte Carlo estimate of E[(Sigma_K^{-1} kron ... kron Sigma_1^{-1}) / sigma2 | X]."""
        if self.full_precision_sum is None:
            raise EstimationError("chain was run without the full precision accumulator")
        if self.kept == 0:
            raise EstimationError("chain has no kept draws")
        return self.full_precision_sum / self.kept


def _mode_draw(
    M: np.ndarray, nu: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One full-conditional draw for a mode.

    With Phi Phi^T = M and V a Wishart(nu, I) Bartlett factor, the precision
    P = Phi^{-T} V^T V Phi^{-1} is mirror-Wishart(nu, M^{-1}), and
    L = Phi V^{-1} is the lower Cholesky factor of P^{-1}.
    """
    Phi = chol_lower(M)
    V = sample_wishart_chol(nu, M.shape[0], rng)
    C = solve_triangular(Phi, V.T, lower=True, trans="T")
    L = np.tril(solve_triangular(V, Phi.T, lower=True, trans="T").T)
    return symmetrize(C @ C.T), L


def gibbs_chain(X: np.ndarray, cfg: Optional[GibbsConfig] = None) -> GibbsChain:
    """
    Run the Gibbs sampler for (sigma, Psi_1, ..., Psi_K) given data X.

    One sweep visits the modes in order k = 0, ..., K-1. For each mode it
    forms the residual cross-product M_k, draws the precision
    (sigma2 Sigma_k)^{-1} from its mirror-Wishart full conditional with
    n p / p_k degrees of freedom, and recovers sigma and Psi_k from the
    Cholesky factor of its inverse. Draws after burn-in are accumulated.

    Args:
        X: Data of shape (p_1, ..., p_K, n).
        cfg: Schedule, starting point and random stream.

    Returns:
        GibbsChain: Accumulated posterior sums.
    """
    cfg = cfg or GibbsConfig()
    dims, n, p = _data_shape(X)
    K = len(dims)
    if n <= p:
        _warn_once(
            ("posterior", dims, n),
            f"n = {n} <= prod(p_k) = {p}: posterior propriety is not guaranteed for these dimensions",
        )
    if cfg.full_precision and p > config.KRON_CAP:
        raise KronCapError(f"full precision accumulator needs p <= {config.KRON_CAP}, got {p}")

    if cfg.init is not None:
        if cfg.init.dims != dims:
            raise ShapeError(f"initial value dims {cfg.init.dims} do not match data dims {dims}")
        chols = list(cfg.init.factor_chols)
        sigma2 = cfg.init.sigma2
    else:
        chols = [np.eye(d) for d in dims]
        sigma2 = frob_norm_sq(X) / (n * p)

    chain = GibbsChain(
        dims=dims,
        n=n,
        seed=cfg.rng.seed,
        total_iters=cfg.total_iters,
        precision_sums=[np.zeros((d, d)) for d in dims],
        full_precision_sum=np.zeros((p, p)) if cfg.full_precision else None,
    )
    rng = cfg.rng.generator()

    for t in range(cfg.total_iters):
        keep = t >= cfg.burn_in
        for k in range(K):
            M = mode_cross_product(X, chols, k)
            try:
                P, L = _mode_draw(M, n * p / dims[k], rng)
            except NotPositiveDefiniteError as e:
                raise NotPositiveDefiniteError(f"mode {k} residual cross-product is not positive definite") from e
            log_sigma = float(np.mean(np.log(np.diag(L))))
            sigma2 = float(np.exp(2.0 * log_sigma))
            chols[k] = L / np.exp(log_sigma)
            if keep:
                chain.precision_sums[k] += P
        if keep:
            chain.kept += 1
            if chain.full_precision_sum is not None:
                inverses = [lower_inverse(L) for L in chols]
                chain.full_precision_sum += kron_list([Li.T @ Li for Li in inverses[::-1]]) / sigma2
            if cfg.keep_draws:
                chain.draws.append((sigma2, tuple(L.copy() for L in chols)))

    logger.debug(f"Gibbs chain done: dims={dims}, n={n}, kept={chain.kept}")
    return chain


def sample_scale_conditional(
    X: np.ndarray, factor_chols: Sequence[np.ndarray], rng: np.random.Generator
) -> float:
    """
    Draw 1/sigma2 from its full conditional gamma(n p / 2, rate = ||X x {Psi^{-1}}||^2 / 2).

    The sampler itself never needs this step; it is kept for checking the
    posterior.
    """
    dims, n, p = _data_shape(X)
    rate = frob_norm_sq(tucker_solve_lower(X, list(enumerate(factor_chols)))) / 2.0
    return float(rng.gamma(n * p / 2.0, 1.0 / rate))


# ---------------------------------------------------------------------------
# UMREE
# ---------------------------------------------------------------------------

def umree_from_precisions(
    mean_precisions: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None
) -> Tuple[SeparableCovariance, List[np.ndarray]]:
    """
    Closed-form UMREE from posterior means of (sigma2 Sigma_k)^{-1}.

    With E_k the inverse of each posterior mean, Sigma_k = E_k / |E_k|^{1/p_k}
    and sigma2 = (sum_k w_k |E_k|^{-1/p_k} / sum w)^{-1}. Equal weights give
    the multiway Stein's loss UMREE.

    Returns:
        Tuple[SeparableCovariance, List[np.ndarray]]: The estimate and the E_k.
    """
    K = len(mean_precisions)
    weights = np.ones(K) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (K,) or np.any(weights <= 0):
        raise ParameterError(f"need {K} positive weights, got {np.ravel(weights).tolist()}")
    scale_matrices, factors, inverse_scales = [], [], []
    for k, P in enumerate(mean_precisions):
        try:
            E = spd_inverse(P)
            F, scale = unit_determinant(E)
        except NotPositiveDefiniteError as e:
            raise EstimationError(f"posterior mean precision for mode {k} is singular") from e
        scale_matrices.append(E)
        factors.append(F)
        inverse_scales.append(1.0 / scale)
    sigma2 = 1.0 / float(np.dot(weights / weights.sum(), inverse_scales))
    return SeparableCovariance(sigma2, tuple(factors)), scale_matrices


def umree(chain: GibbsChain) -> EstimatorOutput:
    """UMREE under multiway Stein's loss from a completed chain."""
    estimate, scale_matrices = umree_from_precisions(chain.mean_precisions())
    return EstimatorOutput(
        estimate,
        "umree",
        iterations=chain.total_iters,
        kept_draws=chain.kept,
        seed=chain.seed,
        scale_matrices=scale_matrices,
    )


def umree_weighted(chain: GibbsChain, weights: Sequence[float]) -> EstimatorOutput:
    """UMREE under weighted multiway Stein's loss; only sigma2 depends on the weights."""
    estimate, scale_matrices = umree_from_precisions(chain.mean_precisions(), weights)
    return EstimatorOutput(
        estimate,
        "umree_weighted",
        iterations=chain.total_iters,
        kept_draws=chain.kept,
        seed=chain.seed,
        scale_matrices=scale_matrices,
    )


def posterior_multiway_objective(candidate: SeparableCovariance, mean_precisions: Sequence[np.ndarray]) -> float:
    """
    Posterior expected multiway Stein's loss of ``candidate``, up to a constant.

    Equals s2 sum_k (p/p_k) tr(S_k E[(sigma2 Sigma_k)^{-1} | X]) - K p log s2.
    """
    p = candidate.size
    K = candidate.order
    trace_sum = sum(
        (p / F.shape[0]) * float(np.sum(F * P)) for F, P in zip(candidate.factors, mean_precisions)
    )
    return candidate.sigma2 * trace_sum - K * p * np.log(candidate.sigma2)


def james_stein_estimate(X: np.ndarray) -> np.ndarray:
    """
    Closed-form UMREE for a single mode: U^{-T} D^{-1} U^{-1} / n with
    U U^T the upper Cholesky factorization of (X X^T)^{-1} and
    d_j = (n + p + 1 - 2j) / n.
    """
    dims, n, p = _data_shape(X)
    if len(dims) != 1:
        raise ShapeError("the closed form applies to matrix data (one mode plus samples)")
    U = chol_upper(spd_inverse(X @ X.T))
    d = (n + p + 1 - 2 * np.arange(1, p + 1)) / n
    Uinv = np.linalg.inv(U)
    return symmetrize((Uinv.T / d) @ Uinv / n)


# ---------------------------------------------------------------------------
# UMREE under Stein's loss
# ---------------------------------------------------------------------------

def stein_objective(mean_full_precision: np.ndarray, factors: Sequence[np.ndarray]) -> float:
    """
    Posterior expected Stein's loss up to a constant for the covariance
    kron(F_K, ..., F_1): tr(M kron F) - sum_k (p/p_k) log|F_k|.
    """
    p = mean_full_precision.shape[0]
    C = kron_list(list(factors)[::-1])
    log_dets = sum((p / F.shape[0]) * log_det_spd(F) for F in factors)
    return float(np.sum(mean_full_precision * C)) - log_dets


def stein_minimize(
    mean_full_precision: np.ndarray,
    dims: Sequence[int],
    init: Optional[SeparableCovariance] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> Tuple[SeparableCovariance, List[float], int]:
    """
    Minimize the posterior expected Stein's loss over separable covariances.

    Args:
        mean_full_precision: p x p posterior mean of the full precision.
        dims: Mode dimensions (p_1, ..., p_K).
        init: Starting point; identity factors by default.
        tol: Relative objective change that stops the iteration.
        max_iter: Maximum number of sweeps.

    Returns:
        Tuple[SeparableCovariance, List[float], int]: Minimizer, objective
        trace (starting value first) and number of sweeps.
    """
    tol = config.STEIN_TOL if tol is None else tol
    max_iter = config.STEIN_MAX_ITER if max_iter is None else max_iter
    dims = tuple(int(d) for d in dims)
    K = len(dims)
    p = int(np.prod(dims))
    if p > config.KRON_CAP:
        raise KronCapError(f"Stein's-loss UMREE needs p <= {config.KRON_CAP}, got {p}")
    M = symmetrize(np.asarray(mean_full_precision, dtype=np.float64))
    if M.shape != (p, p):
        raise ShapeError(f"precision of shape {M.shape} does not match dims {dims}")
    evals, evecs = np.linalg.eigh(M)
    if evals[0] <= 0:
        raise NotPositiveDefiniteError("accumulated full precision is not positive definite")
    root = (evecs * np.sqrt(evals)) @ evecs.T
    # mode-K matricization of this (p_1, ..., p_K, p) array is the square root
    root_tensor = np.reshape(root, dims + (p,), order="F")
    unfolded = [matricize(root_tensor, k) for k in range(K)]

    if init is None:
        factors = [np.eye(d) for d in dims]
    else:
        factors = [F.copy() for F in init.factors]
        factors[0] = init.sigma2 * factors[0]

    objective = stein_objective(M, factors)
    trace = [objective]
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        for k in range(K):
            partial = tucker_product(root_tensor, [(j, factors[j]) for j in modes_except(K, k)])
            G = symmetrize(matricize(partial, k) @ unfolded[k].T)
            factors[k] = (p / dims[k]) * spd_inverse(G)
        new_objective = stein_objective(M, factors)
        trace.append(new_objective)
        logger.debug(f"Stein iteration {sweeps}: objective {new_objective:.12g}")
        converged = abs(new_objective - objective) <= tol * max(abs(objective), 1.0)
        objective = new_objective
        if converged:
            break
    return normalize_factors(1.0, factors), trace, sweeps


def stein_umree(
    chain: GibbsChain, tol: Optional[float] = None, max_iter: Optional[int] = None
) -> EstimatorOutput:
    """
    UMREE under Stein's loss on the full covariance.

    Starts from the multiway UMREE of the same chain and iterates the
    mode-wise minimizer until the objective settles; the objective is
    convex along geodesics, so the limit is the global minimizer.
    """
    start, _ = umree_from_precisions(chain.mean_precisions())
    estimate, trace, sweeps = stein_minimize(chain.mean_full_precision(), chain.dims, start, tol, max_iter)
    return EstimatorOutput(
        estimate,
        "stein_umree",
        iterations=sweeps,
        final_objective=trace[-1],
        kept_draws=chain.kept,
        seed=chain.seed,
        objective_trace=trace,
    )


# ---------------------------------------------------------------------------
# Multiway Takemura estimator
# ---------------------------------------------------------------------------

def mwte(
    X: np.ndarray,
    T: Optional[int] = None,
    cfg: Optional[GibbsConfig] = None,
    rng: Optional[RngStream] = None,
    rotations: Optional[Sequence[Sequence[np.ndarray]]] = None,
    scale_average: str = "variance",
) -> EstimatorOutput:
    """
    Randomized multiway Takemura estimator.

    For each of T rotations (Gamma_1, ..., Gamma_K), drawn from the Haar
    measure unless given, the UMREE of the rotated data is rotated back,
    trace-normalized and averaged per mode; the averages are rescaled to
    unit determinant. Draw t runs its Gibbs chain on ``cfg.rng.child(t)``.

    Args:
        X: Data of shape (p_1, ..., p_K, n).
        T: Number of rotations.
        cfg: Gibbs schedule shared by the T chains.
        rng: Stream for the rotations (defaults to a child of cfg.rng).
        rotations: Optional explicit rotations, one list of K matrices per draw.
        scale_average: "variance" averages the sigma2 estimates;
            "sd" averages their square roots and squares the mean.

    Returns:
        EstimatorOutput: The averaged estimate.
    """
    T = config.MWTE_T if T is None else T
    cfg = cfg or GibbsConfig()
    if rotations is not None:
        T = len(rotations)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if scale_average not in ("variance", "sd"):
        raise ParameterError(f"scale_average must be 'variance' or 'sd', got {scale_average!r}")
    dims, n, p = _data_shape(X)
    K = len(dims)
    rng = rng or cfg.rng.child(2 ** 32)
    generator = rng.generator()

    sums = [np.zeros((d, d)) for d in dims]
    scales = []
    kept = 0
    started = time.time()
    for t in range(T):
        if rotations is not None:
            gammas = [check_orthogonal(G, f"rotation {t} mode {k}") for k, G in enumerate(rotations[t])]
            if len(gammas) != K:
                raise ShapeError(f"rotation {t} has {len(gammas)} matrices, expected {K}")
        else:
            gammas = [sample_haar_orthogonal(d, generator) for d in dims]
        rotated = tucker_product(X, list(enumerate(gammas)))
        chain = gibbs_chain(rotated, replace(cfg, rng=cfg.rng.child(t), full_precision=False))
        estimate = umree(chain).estimate
        kept += chain.kept
        for k, (G, F) in enumerate(zip(gammas, estimate.factors)):
            sums[k] += G.T @ F @ G / np.trace(F)
        scales.append(estimate.sigma2)

    if scale_average == "variance":
        sigma2 = float(np.mean(scales))
    else:
        sigma2 = float(np.mean(np.sqrt(scales))) ** 2
    factors = tuple(unit_determinant(symmetrize(S / T))[0] for S in sums)
    logger.debug(f"MWTE with T={T} finished in {time.time() - started:.2f}s")
    return EstimatorOutput(
        SeparableCovariance(sigma2, factors), "mwte", iterations=T, kept_draws=kept, seed=cfg.rng.seed
    )
