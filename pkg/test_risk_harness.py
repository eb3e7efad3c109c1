#!/usr/bin/env python3
"""
Tests for the Monte Carlo risk study, its configuration and report files.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add project root to path
project_root = Path(__file__).parent
sys.path.append(str(project_root))

import config  # noqa: E402
from array_normal import SeparableCovariance, random_covariance  # noqa: E402
from estimators import EstimationError  # noqa: E402
from evaluation import configure_logging  # noqa: E402
from reproduce_risk_figure import reproduce_risk_figure  # noqa: E402
from risk_harness import (  # noqa: E402
    ESTIMATORS,
    GRIDS,
    REPLICATE_COLUMNS,
    SUMMARY_COLUMNS,
    RiskReport,
    SimConfig,
    run_risk_study,
)
from tensor_core import ParameterError  # noqa: E402


def _oracle(X, cfg, stream):
    return cfg.truth_for(X.shape[:-1])


def _fails_on_positive_corner(X, cfg, stream):
    if X.flat[0] > 0.0:
        raise EstimationError("synthetic failure")
    return cfg.truth_for(X.shape[:-1])


def _mle_unless_positive_corner(X, cfg, stream):
    if X.flat[0] > 0.0:
        raise EstimationError("synthetic failure")
    return ESTIMATORS["mle"](X, cfg, stream)


def _small(**overrides):
    settings = dict(dims=[(2, 3)], n=2, replicates=4, estimators=["mle", "umree"], total_iters=40, burn_in=10, master_seed=3)
    settings.update(overrides)
    return SimConfig(**settings)


def test_oracle_estimator_has_zero_loss():
    cfg = _small(estimators=["oracle"], dims=[(2, 2), (3, 2)])
    report = run_risk_study(cfg, registry={"oracle": _oracle})
    assert list(report.replicates.columns) == REPLICATE_COLUMNS
    assert list(report.summary.columns) == SUMMARY_COLUMNS
    assert len(report.replicates) == 2 * 4
    assert np.all(report.replicates["loss"].to_numpy() <= 1e-10)
    assert report.summary["failures"].sum() == 0
    assert report.summary["ratio_vs_mle"].isna().all()


def test_study_is_deterministic():
    a = run_risk_study(_small())
    b = run_risk_study(_small())
    pd.testing.assert_frame_equal(a.replicates, b.replicates)
    pd.testing.assert_frame_equal(a.summary, b.summary)
    c = run_risk_study(_small(master_seed=4))
    assert not np.array_equal(a.replicates["loss"].to_numpy(), c.replicates["loss"].to_numpy())


def test_parallel_matches_serial():
    serial = run_risk_study(_small(workers=1))
    parallel = run_risk_study(_small(workers=2))
    pd.testing.assert_frame_equal(serial.replicates, parallel.replicates)
    pd.testing.assert_frame_equal(serial.summary, parallel.summary)


def test_estimators_see_the_same_data():
    seen = {}

    def record(name):
        def estimator(X, cfg, stream):
            seen.setdefault(name, []).append(X.copy())
            return cfg.truth_for(X.shape[:-1])

        return estimator

    cfg = _small(estimators=["first", "second"])
    run_risk_study(cfg, registry={"first": record("first"), "second": record("second")})
    for a, b in zip(seen["first"], seen["second"]):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(seen["first"][0], seen["first"][1])


def test_failures_are_recorded_and_counted():
    cfg = _small(replicates=20, estimators=["mle", "flaky"])
    report = run_risk_study(cfg, registry={"mle": ESTIMATORS["mle"], "flaky": _fails_on_positive_corner})
    flaky = report.replicates[report.replicates["estimator"] == "flaky"]
    failed = flaky["error"].notna()
    assert 0 < failed.sum() < 20
    assert flaky.loc[failed, "loss"].isna().all()
    assert flaky.loc[failed, "error"].str.startswith("EstimationError").all()
    row = report.summary[report.summary["estimator"] == "flaky"].iloc[0]
    assert row["failures"] == failed.sum()
    assert row["risk"] == pytest.approx(0.0, abs=1e-10)


def test_ratio_uses_replicates_where_both_succeed():
    cfg = _small(replicates=20, estimators=["mle", "partial"])
    report = run_risk_study(cfg, registry={"mle": ESTIMATORS["mle"], "partial": _mle_unless_positive_corner})
    row = report.summary[report.summary["estimator"] == "partial"].iloc[0]
    assert 0 < row["failures"] < 20
    # identical losses wherever both ran
    assert row["ratio_vs_mle"] == pytest.approx(1.0)
    assert row["ratio_sd"] == pytest.approx(0.0, abs=1e-12)
    assert row["risk"] != pytest.approx(report.risk((2, 3), "mle"))


def test_summary_statistics():
    report = run_risk_study(_small(replicates=6))
    for name in ("mle", "umree"):
        losses = report.losses((2, 3), name)
        assert len(losses) == 6 and np.all(losses >= 0)
        assert report.risk((2, 3), name) == pytest.approx(losses.mean())
        assert report.risk_se((2, 3), name) == pytest.approx(losses.std(ddof=1) / np.sqrt(6))
    mle_row = report.summary[report.summary["estimator"] == "mle"].iloc[0]
    assert mle_row["ratio_vs_mle"] == pytest.approx(1.0)
    assert mle_row["ratio_sd"] == pytest.approx(0.0, abs=1e-12)
    ratios = report.losses((2, 3), "umree") / report.losses((2, 3), "mle")
    umree_row = report.summary[report.summary["estimator"] == "umree"].iloc[0]
    assert umree_row["ratio_sd"] == pytest.approx(ratios.std(ddof=1))
    assert umree_row["ratio_vs_mle"] == pytest.approx(report.risk((2, 3), "umree") / report.risk((2, 3), "mle"))


def test_stein_loss_and_stein_umree():
    report = run_risk_study(_small(estimators=["mle", "stein_umree"], loss="stein", replicates=2))
    assert report.summary["failures"].sum() == 0
    assert np.all(report.replicates["loss"] > 0)


def test_report_files_round_trip(tmp_path):
    report = run_risk_study(_small(estimators=["mle", "umree", "mwte"], mwte_T=2))
    csv_path = str(tmp_path / "report.csv")
    summary_path = report.to_csv(csv_path)
    assert summary_path.endswith("report_summary.csv")

    replicates = RiskReport.read_csv(csv_path)
    assert list(replicates.columns) == REPLICATE_COLUMNS
    np.testing.assert_array_equal(replicates["loss"].to_numpy(), report.replicates["loss"].to_numpy())
    assert list(replicates["dims"]) == list(report.replicates["dims"])

    summary = RiskReport.read_csv(summary_path)
    assert list(summary.columns) == SUMMARY_COLUMNS
    np.testing.assert_array_equal(summary["risk"].to_numpy(), report.summary["risk"].to_numpy())

    json_path = tmp_path / "report.json"
    report.to_json(str(json_path))
    payload = json.loads(json_path.read_text())
    assert len(payload["replicates"]) == len(report.replicates)
    assert payload["summary"][0]["estimator"] == "mle"
    assert [row["loss"] for row in payload["replicates"]] == report.replicates["loss"].tolist()
    assert [row["risk"] for row in payload["summary"]] == report.summary["risk"].tolist()
    assert all(row["error"] is None for row in payload["replicates"])


def test_sim_config_validation():
    with pytest.raises(ParameterError):
        SimConfig()
    with pytest.raises(ParameterError):
        SimConfig(grid="unknown")
    with pytest.raises(ParameterError):
        _small(replicates=0)
    with pytest.raises(ParameterError):
        _small(estimators=[])
    with pytest.raises(ParameterError):
        _small(burn_in=40)
    with pytest.raises(ParameterError):
        _small(loss="squared")
    with pytest.raises(ParameterError):
        _small(truth=SeparableCovariance.identity((3, 2)))
    with pytest.raises(ParameterError):
        run_risk_study(_small(estimators=["mle", "nope"]))

    cfg = SimConfig(grid="nodes", replicates=1)
    assert cfg.dims == GRIDS["nodes"]
    assert all(d[0] == d[1] and d[2] == 3 for d in cfg.dims)
    assert all(d[:2] == (3, 3) for d in GRIDS["time_points"])


def test_sim_config_from_dict(monkeypatch):
    truth = random_covariance((2, 3), np.random.default_rng(70))
    payload = {
        "dims": [[2, 3]],
        "n": 2,
        "replicates": 3,
        "estimators": ["mle", "umree"],
        "gibbs": {"total_iters": 30, "burn_in": 5},
        "truth": truth.to_dict(),
        "master_seed": 11,
    }
    monkeypatch.setattr(config, "SEED_FROM_ENV", False)
    cfg = SimConfig.from_dict(json.loads(json.dumps(payload)))
    assert cfg.dims == [(2, 3)] and cfg.total_iters == 30 and cfg.burn_in == 5
    assert cfg.master_seed == 11
    assert cfg.truth.allclose(truth, rtol=0.0)
    assert run_risk_study(cfg).summary["failures"].sum() == 0

    monkeypatch.setattr(config, "SEED_FROM_ENV", True)
    monkeypatch.setattr(config, "MASTER_SEED", 99)
    assert SimConfig.from_dict(payload).master_seed == 99

    with pytest.raises(ParameterError):
        SimConfig.from_dict({"dims": [[2, 2]], "replicas": 3})


def test_replicate_records_are_logged(tmp_path, monkeypatch):
    log_file = tmp_path / "eval.log"
    monkeypatch.setattr(config, "ENABLE_EVALUATION_LOGGING", True)
    configure_logging(log_file=str(log_file))
    try:
        run_risk_study(_small(replicates=2, estimators=["mle"]))
    finally:
        monkeypatch.setattr(config, "ENABLE_EVALUATION_LOGGING", False)
        configure_logging()
    records = [json.loads(line) for line in log_file.read_text().splitlines() if line.strip()]
    assert len(records) == 2
    entry = json.loads(records[0]["record"]["message"])
    assert entry["estimator"] == "mle" and entry["dims"] == [2, 3] and entry["error"] is None


def test_reproduce_risk_figure_writes_grid_tables(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "GIBBS_TOTAL_ITERS", 20)
    monkeypatch.setattr(config, "GIBBS_BURN_IN", 5)
    monkeypatch.setattr(config, "MWTE_T", 1)
    reproduce_risk_figure(str(tmp_path), replicates=1, workers=1)
    for grid, dims in GRIDS.items():
        summary = RiskReport.read_csv(str(tmp_path / f"risk_{grid}_summary.csv"))
        assert len(summary) == 3 * len(dims)
        assert set(summary["estimator"]) == {"mle", "umree", "mwte"}


@pytest.mark.slow
def test_desk_scale_risk_ordering():
    dims = (4, 4, 4)
    cfg = SimConfig(
        dims=[dims],
        n=1,
        replicates=100,
        estimators=["mle", "umree", "mwte"],
        mwte_T=3,
        total_iters=1250,
        burn_in=250,
        master_seed=20240101,
        workers=config.DEFAULT_WORKERS,
    )
    report = run_risk_study(cfg)
    assert report.summary["failures"].sum() == 0
    mle = report.losses(dims, "mle")
    umree = report.losses(dims, "umree")
    mwte = report.losses(dims, "mwte")

    gain = mle - umree
    assert gain.mean() >= 2.0 * gain.std(ddof=1) / np.sqrt(len(gain))
    excess = mwte - umree
    assert excess.mean() <= 2.0 * excess.std(ddof=1) / np.sqrt(len(excess))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
