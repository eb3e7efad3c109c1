"""Runtime configuration for the array normal covariance toolkit.

Values are read once from the environment (a local .env file is honoured)
and exposed as module constants, so callers just `import config`.
"""

import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value in (None, ""):
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# Linear algebra limits and tolerances
KRON_CAP = _env_int("ARRAYNORMAL_KRON_CAP", 4096)
DET_TOLERANCE = 1e-8
SYMMETRY_RTOL = 1e-12
PIVOT_RTOL = 1e-12
ORTHOGONALITY_TOLERANCE = 1e-10
LOSS_ROUNDING_RTOL = 1e-12

# Gibbs sampler schedule
GIBBS_TOTAL_ITERS = _env_int("ARRAYNORMAL_GIBBS_ITERS", 1250)
GIBBS_BURN_IN = _env_int("ARRAYNORMAL_GIBBS_BURN_IN", 250)

# Iterative estimators
FLIPFLOP_TOL = _env_float("ARRAYNORMAL_FLIPFLOP_TOL", 1e-10)
FLIPFLOP_MAX_ITER = _env_int("ARRAYNORMAL_FLIPFLOP_MAX_ITER", 1000)
STEIN_TOL = _env_float("ARRAYNORMAL_STEIN_TOL", 1e-10)
STEIN_MAX_ITER = _env_int("ARRAYNORMAL_STEIN_MAX_ITER", 500)
MWTE_T = _env_int("ARRAYNORMAL_MWTE_T", 3)

# Risk study
DEFAULT_REPLICATES = _env_int("ARRAYNORMAL_REPLICATES", 100)
DEFAULT_WORKERS = _env_int("ARRAYNORMAL_WORKERS", 1)
MASTER_SEED = _env_int("ARRAYNORMAL_SEED", 20240101)
SEED_FROM_ENV = os.getenv("ARRAYNORMAL_SEED") not in (None, "")

# Logging
ENABLE_EVALUATION_LOGGING = _env_bool("ARRAYNORMAL_EVALUATION_LOGGING", False)
LOG_FILE_PATH = os.getenv("ARRAYNORMAL_LOG_FILE", "logs/risk_evaluation.log")
LOG_LEVEL = os.getenv("ARRAYNORMAL_LOG_LEVEL", "INFO")
