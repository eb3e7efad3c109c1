"""Monte Carlo risk study comparing the MLE, UMREE and MWTE.

Each replicate draws one data array from the array normal model at the true
covariance, hands the same array to every requested estimator and scores the
estimates with the study loss. MLE and UMREE have constant risk, so one true
covariance per dimension is enough for the comparison.
"""

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

import config
from array_normal import (
    SeparableCovariance,
    multiway_stein_loss,
    sample_array_normal,
    stein_loss_full,
)
from estimators import (
    EstimatorOutput,
    GibbsConfig,
    gibbs_chain,
    mle_flipflop,
    mwte,
    stein_umree,
    umree,
)
from evaluation import log_replicate_evaluation
from matrix_stats import RngStream
from tensor_core import ArrayNormalError, ParameterError, check_dims

Estimator = Callable[[np.ndarray, "SimConfig", RngStream], Union[EstimatorOutput, SeparableCovariance]]

REPLICATE_COLUMNS = ["dims", "n", "replicate", "estimator", "loss", "seed", "error"]
SUMMARY_COLUMNS = ["dims", "estimator", "risk", "risk_se", "ratio_vs_mle", "ratio_sd", "failures"]

# Desk-scale dimension grids: a growing number of time points (3 x 3 x p3),
# and a growing number of network nodes (p x p x 3).
GRIDS: Dict[str, List[Tuple[int, ...]]] = {
    "time_points": [(3, 3, p3) for p3 in (2, 3, 4, 6, 8)],
    "nodes": [(p, p, 3) for p in (2, 3, 4, 6, 8)],
}

LOSSES = ("multiway", "stein")


def _run_mle(X: np.ndarray, cfg: "SimConfig", stream: RngStream) -> EstimatorOutput:
    return mle_flipflop(X)


def _run_umree(X: np.ndarray, cfg: "SimConfig", stream: RngStream) -> EstimatorOutput:
    return umree(gibbs_chain(X, cfg.gibbs_config(stream)))


def _run_stein_umree(X: np.ndarray, cfg: "SimConfig", stream: RngStream) -> EstimatorOutput:
    gibbs = cfg.gibbs_config(stream)
    gibbs.full_precision = True
    return stein_umree(gibbs_chain(X, gibbs))


def _run_mwte(X: np.ndarray, cfg: "SimConfig", stream: RngStream) -> EstimatorOutput:
    return mwte(X, T=cfg.mwte_T, cfg=cfg.gibbs_config(stream))


ESTIMATORS: Dict[str, Estimator] = {
    "mle": _run_mle,
    "umree": _run_umree,
    "mwte": _run_mwte,
    "stein_umree": _run_stein_umree,
}


def dims_label(dims: Sequence[int]) -> str:
    return "x".join(str(d) for d in dims)


@dataclass
class SimConfig:
    """
    Settings for one risk study.

    ``dims`` lists the dimension tuples to study; ``grid`` names one of
    :data:`GRIDS` instead. ``truth`` defaults to (1, I, ..., I) for every
    dims entry. Replicate r of every dims entry uses the stream
    ``RngStream(master_seed).child(r)``.
    """

    dims: List[Tuple[int, ...]] = field(default_factory=list)
    grid: Optional[str] = None
    n: int = 1
    replicates: int = field(default_factory=lambda: config.DEFAULT_REPLICATES)
    estimators: List[str] = field(default_factory=lambda: ["mle", "umree", "mwte"])
    mwte_T: int = field(default_factory=lambda: config.MWTE_T)
    total_iters: int = field(default_factory=lambda: config.GIBBS_TOTAL_ITERS)
    burn_in: int = field(default_factory=lambda: config.GIBBS_BURN_IN)
    truth: Optional[SeparableCovariance] = None
    master_seed: int = field(default_factory=lambda: config.MASTER_SEED)
    workers: int = field(default_factory=lambda: config.DEFAULT_WORKERS)
    loss: str = "multiway"

    def __post_init__(self):
        if not self.dims:
            if self.grid is None:
                raise ParameterError("a study needs dims or a named grid")
            if self.grid not in GRIDS:
                raise ParameterError(f"unknown grid {self.grid!r}; choose from {sorted(GRIDS)}")
            self.dims = list(GRIDS[self.grid])
        self.dims = [check_dims(d) for d in self.dims]
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")
        if self.replicates < 1:
            raise ParameterError(f"replicates must be >= 1, got {self.replicates}")
        if not self.estimators:
            raise ParameterError("at least one estimator is required")
        if len(set(self.estimators)) != len(self.estimators):
            raise ParameterError(f"duplicate estimators in {self.estimators}")
        if self.mwte_T < 1:
            raise ParameterError(f"mwte_T must be >= 1, got {self.mwte_T}")
        if self.burn_in < 0 or self.burn_in >= self.total_iters:
            raise ParameterError(f"burn_in ({self.burn_in}) must be in [0, total_iters={self.total_iters})")
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.truth is not None and any(d != self.truth.dims for d in self.dims):
            raise ParameterError(f"truth dims {self.truth.dims} do not match every study dims entry")
        if self.loss == "stein" or "stein_umree" in self.estimators:
            too_big = [d for d in self.dims if int(np.prod(d)) > config.KRON_CAP]
            if too_big:
                raise ParameterError(f"dense Stein's loss paths are refused for p > {config.KRON_CAP}: {too_big}")

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SimConfig":
        """
        Build a config from a JSON object with the field names above.

        Gibbs settings may also sit under a "gibbs" object. A set
        ARRAYNORMAL_SEED environment variable overrides ``master_seed``.
        """
        payload = dict(payload)
        unknown = set(payload) - set(cls.__dataclass_fields__) - {"gibbs"}
        if unknown:
            raise ParameterError(f"unknown study config keys: {sorted(unknown)}")
        gibbs = payload.pop("gibbs", None) or {}
        for key in ("total_iters", "burn_in"):
            if key in gibbs:
                payload.setdefault(key, gibbs[key])
        if payload.get("truth") is not None:
            payload["truth"] = SeparableCovariance.from_dict(payload["truth"])
        if "dims" in payload:
            payload["dims"] = [tuple(d) for d in payload["dims"]]
        if config.SEED_FROM_ENV:
            payload["master_seed"] = config.MASTER_SEED
        return cls(**payload)

    def gibbs_config(self, stream: RngStream) -> GibbsConfig:
        return GibbsConfig(total_iters=self.total_iters, burn_in=self.burn_in, rng=stream)

    def truth_for(self, dims: Tuple[int, ...]) -> SeparableCovariance:
        return self.truth if self.truth is not None else SeparableCovariance.identity(dims)

    def loss_fn(self) -> Callable[[SeparableCovariance, SeparableCovariance], float]:
        return multiway_stein_loss if self.loss == "multiway" else stein_loss_full


def _replicate_task(args: Tuple[SimConfig, Tuple[int, ...], int, Mapping[str, Estimator]]) -> List[Dict[str, Any]]:
    """
    Run every estimator on one replicate.

    Module level so ProcessPoolExecutor can pickle it.
    """
    cfg, dims, replicate, registry = args
    stream = RngStream(cfg.master_seed).child(replicate)
    truth = cfg.truth_for(dims)
    X = sample_array_normal(dims, truth, cfg.n, stream.child(0).generator())
    estimator_stream = stream.child(1)
    loss_fn = cfg.loss_fn()

    rows = []
    for name in cfg.estimators:
        started = time.perf_counter()
        loss, error = np.nan, None
        try:
            result = registry[name](X, cfg, estimator_stream)
            estimate = result.estimate if isinstance(result, EstimatorOutput) else result
            loss = loss_fn(truth, estimate)
        except (ArrayNormalError, np.linalg.LinAlgError) as e:
            error = f"{type(e).__name__}: {e}"
            logger.warning(f"replicate {replicate} dims={dims_label(dims)} {name} failed: {error}")
        elapsed = time.perf_counter() - started
        log_replicate_evaluation(
            dims, cfg.n, replicate, name, None if error else loss, cfg.master_seed, error, elapsed
        )
        rows.append(
            {
                "dims": dims_label(dims),
                "n": cfg.n,
                "replicate": replicate,
                "estimator": name,
                "loss": loss,
                "seed": cfg.master_seed,
                "error": error,
            }
        )
    return rows


def summarize(replicates: pd.DataFrame, estimators: Sequence[str]) -> pd.DataFrame:
    """
    Aggregate per-replicate losses into risks and risk ratios.

    ``risk`` is the mean loss over successful replicates and ``risk_se`` its
    Monte Carlo standard error. ``ratio_vs_mle`` divides the mean loss by the
    MLE mean loss for the same dims and ``ratio_sd`` is the standard deviation
    of the per-replicate loss ratios. Both ratios only use replicates where the
    estimator and the MLE succeeded.

    Args:
        replicates (pd.DataFrame): Table with the replicate columns.
        estimators (Sequence[str]): Estimator order for the output rows.

    Returns:
        pd.DataFrame: One row per (dims, estimator).
    """
    rows = []
    for dims, block in replicates.groupby("dims", sort=False):
        wide = block.pivot(index="replicate", columns="estimator", values="loss")
        for name in estimators:
            losses = wide[name].dropna()
            m = len(losses)
            risk = float(losses.mean()) if m else np.nan
            risk_se = float(losses.std(ddof=1) / np.sqrt(m)) if m > 1 else np.nan
            ratio, ratio_sd = np.nan, np.nan
            if "mle" in wide.columns:
                both = wide[name].notna() & wide["mle"].notna()
                if both.any():
                    ratio = float(wide.loc[both, name].mean()) / float(wide.loc[both, "mle"].mean())
                paired = (wide[name] / wide["mle"]).replace([np.inf, -np.inf], np.nan).dropna()
                if len(paired) > 1:
                    ratio_sd = float(paired.std(ddof=1))
            rows.append(
                {
                    "dims": dims,
                    "estimator": name,
                    "risk": risk,
                    "risk_se": risk_se,
                    "ratio_vs_mle": ratio,
                    "ratio_sd": ratio_sd,
                    "failures": int(block.loc[block["estimator"] == name, "error"].notna().sum()),
                }
            )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    # json writes floats with their shortest exact repr; NaN becomes null
    return frame.astype(object).where(frame.notna(), None).to_dict(orient="records")


@dataclass
class RiskReport:
    """Per-replicate losses and the aggregate risk table of one study."""

    replicates: pd.DataFrame
    summary: pd.DataFrame

    def _row(self, dims: Sequence[int], estimator: str) -> pd.Series:
        label = dims if isinstance(dims, str) else dims_label(dims)
        match = self.summary[(self.summary["dims"] == label) & (self.summary["estimator"] == estimator)]
        if match.empty:
            raise KeyError(f"no summary row for dims={label} estimator={estimator}")
        return match.iloc[0]

    def risk(self, dims: Sequence[int], estimator: str) -> float:
        return float(self._row(dims, estimator)["risk"])

    def risk_se(self, dims: Sequence[int], estimator: str) -> float:
        return float(self._row(dims, estimator)["risk_se"])

    def losses(self, dims: Sequence[int], estimator: str) -> np.ndarray:
        label = dims if isinstance(dims, str) else dims_label(dims)
        rows = self.replicates[(self.replicates["dims"] == label) & (self.replicates["estimator"] == estimator)]
        return rows.sort_values("replicate")["loss"].to_numpy()

    def to_csv(self, path: str, summary_path: Optional[str] = None) -> str:
        """
        Write the per-replicate table to ``path`` and the aggregate table to
        ``summary_path`` (default: ``<path stem>_summary.csv``).

        Returns:
            str: The summary path.
        """
        if summary_path is None:
            stem = path[:-4] if path.endswith(".csv") else path
            summary_path = f"{stem}_summary.csv"
        self.replicates.to_csv(path, index=False)
        self.summary.to_csv(summary_path, index=False)
        return summary_path

    def to_json(self, path: str) -> None:
        payload = {"replicates": _records(self.replicates), "summary": _records(self.summary)}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)

    @staticmethod
    def read_csv(path: str) -> pd.DataFrame:
        """Read a report table back with exact float round trip."""
        return pd.read_csv(path, float_precision="round_trip", dtype={"dims": str, "error": object})


def run_risk_study(cfg: SimConfig, registry: Optional[Mapping[str, Estimator]] = None) -> RiskReport:
    """
    Run the Monte Carlo risk study described by ``cfg``.

    Failures of an estimator on a replicate (numerical errors from the
    package or from numpy) are recorded in the ``error`` column and counted
    in ``failures``; they never stop the study. The output depends only on
    ``cfg``: serial and parallel runs give identical reports.

    Args:
        cfg (SimConfig): Study settings.
        registry (Mapping): Estimator functions by name; defaults to
            :data:`ESTIMATORS`. Entries must be picklable when cfg.workers > 1.

    Returns:
        RiskReport: Per-replicate losses and aggregate risks.
    """
    registry = dict(ESTIMATORS if registry is None else registry)
    missing = [name for name in cfg.estimators if name not in registry]
    if missing:
        raise ParameterError(f"unknown estimators {missing}; available: {sorted(registry)}")

    tasks = [(cfg, dims, r, registry) for dims in cfg.dims for r in range(cfg.replicates)]
    logger.info(
        f"Risk study: {len(cfg.dims)} dims x {cfg.replicates} replicates, "
        f"estimators={cfg.estimators}, workers={cfg.workers}"
    )
    started = time.time()
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(_replicate_task, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
    else:
        results = [_replicate_task(task) for task in tasks]
    logger.info(f"Risk study finished in {time.time() - started:.1f}s")

    replicates = pd.DataFrame([row for rows in results for row in rows], columns=REPLICATE_COLUMNS)
    return RiskReport(replicates, summarize(replicates, cfg.estimators))
