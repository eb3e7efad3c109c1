#!/usr/bin/env python3
"""
Tests for the flip-flop MLE, the Gibbs sampler and the equivariant
estimators built from it.
"""

import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from loguru import logger

# Add project root to path
project_root = Path(__file__).parent
sys.path.append(str(project_root))

import estimators  # noqa: E402
from array_normal import (  # noqa: E402
    SeparableCovariance,
    act_on_data,
    act_on_param,
    log_density,
    normalize_factors,
    random_covariance,
    random_lower_group,
    sample_array_normal,
)
from estimators import (  # noqa: E402
    EstimationError,
    GibbsChain,
    GibbsConfig,
    gibbs_chain,
    james_stein_estimate,
    mle_flipflop,
    mwte,
    posterior_multiway_objective,
    sample_scale_conditional,
    stein_minimize,
    stein_objective,
    stein_umree,
    umree,
    umree_from_precisions,
    umree_weighted,
)
from matrix_stats import RngStream, mirror_wishart_mean, spd_inverse  # noqa: E402
from tensor_core import ParameterError, tucker_solve_lower  # noqa: E402


def _data(dims, n, seed, cov=None):
    cov = cov or random_covariance(dims, np.random.default_rng(seed))
    return sample_array_normal(dims, cov, n, RngStream(seed).generator())


def _random_spd(q, rng):
    A = rng.standard_normal((q, q))
    return A @ A.T / q + 0.2 * np.eye(q)


# ---------------------------------------------------------------------------
# Flip-flop MLE
# ---------------------------------------------------------------------------

def test_mle_single_mode_is_sample_covariance():
    X = _data((3,), 10, 40)
    out = mle_flipflop(X)
    np.testing.assert_allclose(out.estimate.total_covariance(), X @ X.T / 10, rtol=1e-8)
    assert out.method == "mle"

    x = np.array([[1.0, -2.0, 0.5]])
    assert mle_flipflop(x).estimate.sigma2 == pytest.approx(np.sum(x ** 2) / 3, rel=1e-12)


def test_mle_log_likelihood_monotone():
    rng = np.random.default_rng(41)
    for trial in range(100):
        dims = [(2, 3), (3, 2, 2), (2, 2)][trial % 3]
        n = int(rng.integers(3, 6))
        X = rng.standard_normal(dims + (n,)) * rng.uniform(0.5, 2.0)
        trace = mle_flipflop(X, max_iter=50).objective_trace
        assert np.all(np.diff(trace) >= -1e-9)


def test_mle_beats_nearby_parameters():
    X = _data((2, 3), 5, 42)
    out = mle_flipflop(X)
    best = log_density(X, out.estimate)
    rng = np.random.default_rng(43)
    for _ in range(100):
        raw = []
        for F in out.estimate.factors:
            E = 0.05 * rng.standard_normal(F.shape)
            raw.append(F + E @ E.T + 0.01 * (E + E.T))
        nearby = normalize_factors(out.estimate.sigma2 * np.exp(0.05 * rng.standard_normal()), raw)
        assert log_density(X, nearby) <= best + 1e-9


def test_mle_equivariance():
    dims = (2, 3)
    X = _data(dims, 6, 44)
    g = random_lower_group(dims, np.random.default_rng(45))
    start = SeparableCovariance.identity(dims)
    base = mle_flipflop(X, tol=0.0, max_iter=200, init=start).estimate
    moved = mle_flipflop(act_on_data(g, X), tol=0.0, max_iter=200, init=act_on_param(g, start)).estimate
    assert moved.allclose(act_on_param(g, base), rtol=1e-6, atol=1e-9)


def test_mle_singular_mode_names_the_mode():
    X = np.random.default_rng(46).standard_normal((3, 2, 1))
    with pytest.raises(EstimationError, match="mode 0"):
        mle_flipflop(X)


# ---------------------------------------------------------------------------
# Gibbs sampler and UMREE
# ---------------------------------------------------------------------------

def test_gibbs_config_validation():
    with pytest.raises(ParameterError):
        GibbsConfig(total_iters=10, burn_in=10)
    cfg = GibbsConfig()
    assert cfg.total_iters == 1250 and cfg.burn_in == 250


def test_gibbs_chain_deterministic():
    X = _data((2, 3), 4, 47)
    cfg = GibbsConfig(total_iters=60, burn_in=10, rng=RngStream(5), keep_draws=True)
    a = gibbs_chain(X, cfg)
    b = gibbs_chain(X, cfg)
    assert a.kept == b.kept == 50
    assert len(a.draws) == 50
    for sa, sb in zip(a.precision_sums, b.precision_sums):
        np.testing.assert_array_equal(sa, sb)
    c = gibbs_chain(X, replace(cfg, rng=RngStream(6)))
    assert not np.array_equal(a.precision_sums[0], c.precision_sums[0])


def test_gibbs_single_mode_matches_mirror_wishart_mean():
    X = _data((3,), 10, 48)
    chain = gibbs_chain(X, GibbsConfig(total_iters=10250, burn_in=250, rng=RngStream(7)))
    assert chain.kept == 10000
    target = mirror_wishart_mean(10.0, spd_inverse(X @ X.T))
    estimate = chain.mean_precisions()[0]
    scale = np.sqrt(np.outer(np.diag(target), np.diag(target)))
    assert np.all(np.abs(estimate - target) <= 0.02 * scale)


def test_umree_single_mode_is_james_stein():
    X = _data((3,), 10, 49)
    chain = gibbs_chain(X, GibbsConfig(total_iters=10250, burn_in=250, rng=RngStream(8)))
    estimate = umree(chain).estimate.total_covariance()
    target = james_stein_estimate(X)
    assert np.linalg.norm(estimate - target) <= 0.02 * np.linalg.norm(target)


def test_umree_equivariance_draw_by_draw():
    # with matching starting points and streams the chain on gX is the g-image of the chain on X
    dims = (2, 3)
    X = _data(dims, 4, 50)
    g = random_lower_group(dims, np.random.default_rng(51))
    start = SeparableCovariance.identity(dims)
    cfg = GibbsConfig(total_iters=200, burn_in=50, rng=RngStream(9), init=start)
    base = umree(gibbs_chain(X, cfg)).estimate
    moved = umree(gibbs_chain(act_on_data(g, X), replace(cfg, init=act_on_param(g, start)))).estimate
    assert moved.allclose(act_on_param(g, base), rtol=1e-8, atol=1e-10)


def test_scale_conditional_mean():
    dims, n = (2, 3), 2
    truth = random_covariance(dims, np.random.default_rng(52))
    X = _data(dims, n, 53, truth)
    rate = float(np.sum(tucker_solve_lower(X, list(enumerate(truth.factor_chols))) ** 2)) / 2.0
    rng = RngStream(10).generator()
    draws = [sample_scale_conditional(X, truth.factor_chols, rng) for _ in range(10000)]
    assert np.mean(draws) == pytest.approx((n * 6 / 2.0) / rate, rel=0.02)


def test_umree_degenerate_chain():
    dims = (2, 3)
    chain = GibbsChain(dims=dims, n=1, seed=0, total_iters=10, precision_sums=[5.0 * np.eye(d) for d in dims], kept=5)
    estimate = umree(chain).estimate
    assert estimate.allclose(SeparableCovariance.identity(dims), rtol=1e-12, atol=1e-12)


def test_umree_closed_form_is_optimal():
    dims = (2, 3)
    rng = np.random.default_rng(54)
    for _ in range(10):
        precisions = [_random_spd(d, rng) for d in dims]
        optimum, _ = umree_from_precisions(precisions)
        best = posterior_multiway_objective(optimum, precisions)
        for i in range(10000):
            if i % 2:
                candidate = random_covariance(dims, rng, spread=1.0)
            else:
                # small perturbations of the optimum
                raw = [F + 0.05 * _random_spd(F.shape[0], rng) for F in optimum.factors]
                candidate = normalize_factors(optimum.sigma2 * np.exp(0.1 * rng.standard_normal()), raw)
            assert posterior_multiway_objective(candidate, precisions) >= best - 1e-9


def test_umree_weighted():
    X = _data((2, 3), 4, 55)
    chain = gibbs_chain(X, GibbsConfig(total_iters=100, burn_in=20, rng=RngStream(11)))
    plain = umree(chain).estimate
    equal = umree_weighted(chain, [2.0, 2.0]).estimate
    assert equal.allclose(plain, rtol=1e-12)
    skewed = umree_weighted(chain, [1.0, 9.0]).estimate
    for a, b in zip(skewed.factors, plain.factors):
        np.testing.assert_allclose(a, b, rtol=1e-12)

    E = [np.diag([2.0, 8.0]), np.diag([1.0, 1.0, 27.0])]
    w = np.array([1.0, 3.0])
    cov, scale_matrices = umree_from_precisions([spd_inverse(M) for M in E], w)
    inv_dets = np.array([1.0 / 4.0, 1.0 / 3.0])
    assert cov.sigma2 == pytest.approx(1.0 / np.dot(w / w.sum(), inv_dets), rel=1e-12)
    np.testing.assert_allclose(scale_matrices[0], E[0], rtol=1e-12, atol=1e-14)
    with pytest.raises(ParameterError):
        umree_weighted(chain, [1.0, -1.0])


def test_full_precision_accumulator_single_mode():
    X = _data((3,), 8, 56)
    chain = gibbs_chain(X, GibbsConfig(total_iters=50, burn_in=10, rng=RngStream(12), full_precision=True))
    np.testing.assert_allclose(chain.mean_full_precision(), chain.mean_precisions()[0], rtol=1e-8)


def test_posterior_propriety_warning(monkeypatch):
    monkeypatch.setattr("estimators._WARNED", set())
    messages = []
    sink = logger.add(messages.append, level="WARNING")
    try:
        X = _data((3, 3), 3, 57)
        gibbs_chain(X, GibbsConfig(total_iters=5, burn_in=1, rng=RngStream(13)))
    finally:
        logger.remove(sink)
    assert any("posterior propriety" in str(m) for m in messages)


# ---------------------------------------------------------------------------
# UMREE under Stein's loss
# ---------------------------------------------------------------------------

def test_stein_minimize_identity_fixed_point():
    dims = (2, 3)
    estimate, trace, _ = stein_minimize(np.eye(6), dims)
    assert estimate.allclose(SeparableCovariance.identity(dims), rtol=1e-10, atol=1e-10)
    assert trace[-1] == pytest.approx(trace[0])


def test_stein_umree_single_mode_matches_umree():
    X = _data((3,), 8, 58)
    chain = gibbs_chain(X, GibbsConfig(total_iters=200, burn_in=50, rng=RngStream(14), full_precision=True))
    np.testing.assert_allclose(
        stein_umree(chain).estimate.total_covariance(), umree(chain).estimate.total_covariance(), rtol=1e-8
    )


def test_stein_objective_monotone():
    rng = np.random.default_rng(59)
    for trial in range(100):
        dims = [(2, 3), (2, 2, 3), (3, 4), (2, 2, 2)][trial % 4]
        p = int(np.prod(dims))
        M = _random_spd(p, rng)
        _, trace, _ = stein_minimize(M, dims, tol=0.0, max_iter=30)
        trace = np.asarray(trace)
        assert np.all(np.diff(trace) <= 1e-9 * (1.0 + np.abs(trace[:-1])))


def test_stein_umree_does_not_exceed_start():
    X = _data((2, 3), 3, 60)
    chain = gibbs_chain(X, GibbsConfig(total_iters=150, burn_in=30, rng=RngStream(15), full_precision=True))
    out = stein_umree(chain)
    start, _ = umree_from_precisions(chain.mean_precisions())
    raw = [F.copy() for F in start.factors]
    raw[0] = start.sigma2 * raw[0]
    assert out.final_objective <= stein_objective(chain.mean_full_precision(), raw) + 1e-9
    assert out.objective_trace[0] == pytest.approx(stein_objective(chain.mean_full_precision(), raw))


# ---------------------------------------------------------------------------
# Multiway Takemura estimator
# ---------------------------------------------------------------------------

def test_mwte_identity_rotation_is_umree():
    dims = (2, 3)
    X = _data(dims, 4, 61)
    cfg = GibbsConfig(total_iters=100, burn_in=20, rng=RngStream(16))
    out = mwte(X, cfg=cfg, rotations=[[np.eye(d) for d in dims]])
    reference = umree(gibbs_chain(X, replace(cfg, rng=cfg.rng.child(0)))).estimate
    assert out.estimate.allclose(reference, rtol=1e-10, atol=1e-12)
    assert out.iterations == 1


def test_mwte_random_rotations():
    dims = (2, 3)
    X = _data(dims, 3, 62)
    cfg = GibbsConfig(total_iters=80, burn_in=20, rng=RngStream(17))
    a = mwte(X, T=3, cfg=cfg)
    b = mwte(X, T=3, cfg=cfg)
    assert a.estimate.allclose(b.estimate, rtol=0.0)
    assert a.kept_draws == 3 * 60
    sd = mwte(X, T=3, cfg=cfg, scale_average="sd")
    assert sd.estimate.sigma2 <= a.estimate.sigma2 * (1 + 1e-12)
    for F, G in zip(sd.estimate.factors, a.estimate.factors):
        np.testing.assert_allclose(F, G)

    with pytest.raises(ParameterError):
        mwte(X, T=0, cfg=cfg)
    with pytest.raises(ParameterError):
        mwte(X, T=1, cfg=cfg, scale_average="median")
    with pytest.raises(ParameterError):
        mwte(X, cfg=cfg, rotations=[[np.diag([2.0, 0.5]), np.eye(3)]])


def test_mwte_ignores_scale_of_per_rotation_factors(monkeypatch):
    dims = (2, 3)
    X = _data(dims, 3, 64)
    cfg = GibbsConfig(total_iters=60, burn_in=10, rng=RngStream(18))
    reference = mwte(X, T=3, cfg=cfg).estimate

    unscaled = estimators.umree
    multipliers = iter([(3.7, 0.2), (0.05, 11.0), (2.0, 2.0)])

    def rescaled_umree(chain):
        estimate = unscaled(chain).estimate
        factors = tuple(c * F for c, F in zip(next(multipliers), estimate.factors))
        return SimpleNamespace(estimate=SimpleNamespace(sigma2=estimate.sigma2, factors=factors))

    monkeypatch.setattr(estimators, "umree", rescaled_umree)
    scaled = mwte(X, T=3, cfg=cfg).estimate
    assert scaled.sigma2 == reference.sigma2
    for F, G in zip(scaled.factors, reference.factors):
        np.testing.assert_allclose(F, G, rtol=1e-12, atol=1e-14)

def test_estimator_output_serialization():
    X = _data((2, 2), 3, 63)
    out = mle_flipflop(X)
    payload = out.to_dict()
    assert set(payload) == {"sigma2", "factors", "diagnostics"}
    assert payload["diagnostics"]["method"] == "mle"
    assert payload["diagnostics"]["iterations"] == out.iterations


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
