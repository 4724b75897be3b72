import os
from typing import Optional


def env(name: str, default: Optional[str] = None) -> Optional[str]:
    v = os.getenv(name)
    if v is None or v.strip() == "":
        return default
    return v.strip()


def _cpu_count() -> int:
    return max(1, int(os.cpu_count() or 1))


# Jacobian/Hessian of h_L are materialized only for parameter subsets up to this size.
FIMLAB_MAX_PARAMS = int(env("FIMLAB_MAX_PARAMS", "512") or "512")

# Full 4D covariance tensors (P_s^4 entries) are materialized only up to this subset size.
# Above it only ijij variances and norm bounds are available.
FIMLAB_MAX_COV_PARAMS = int(env("FIMLAB_MAX_COV_PARAMS", "48") or "48")

# Monte Carlo tolerances: normal approximation with this many standard errors.
FIMLAB_SE_SIGMA = float(env("FIMLAB_SE_SIGMA", "5") or "5")

# -----------------------------
# Logging
# -----------------------------
FIMLAB_LOG_LEVEL = env("FIMLAB_LOG_LEVEL", "INFO") or "INFO"
# If empty -> log to stderr only.
FIMLAB_LOG_DIR = env("FIMLAB_LOG_DIR", "")
FIMLAB_LOG_MAX_FILE_SIZE_BYTES = int(env("FIMLAB_LOG_MAX_FILE_SIZE_BYTES", str(50 * 1024 * 1024)) or "0")
FIMLAB_LOG_BACKUP_COUNT = int(env("FIMLAB_LOG_BACKUP_COUNT", "5") or "5")


def threads() -> int:
    """
    Worker threads for trial sweeps. Read at call time so a process can override it.
    """
    raw = env("FIMLAB_THREADS")
    if raw is None:
        return _cpu_count()
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
