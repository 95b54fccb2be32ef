import os
import warnings

import numpy as np

CDSL_SEED = os.environ.get("CDSL_SEED", "")
CDSL_LOG_LEVEL = os.environ.get("CDSL_LOG_LEVEL", "INFO")

if CDSL_SEED and not CDSL_SEED.lstrip("-").isdigit():
    warnings.warn(f"CDSL_SEED={CDSL_SEED!r} is not an integer and will be ignored.")
    CDSL_SEED = ""

STORAGE_DTYPE = np.float32
CHECK_DTYPE = np.float64

# Encoder + initial block halve the input five times.
SPATIAL_DIVISOR = 32
ALLOWED_SCALE_FACTORS = (0.5, 0.25, 0.125)
PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def env_seed() -> int | None:
    """Seed from the CDSL_SEED environment variable, if set."""
    value = os.environ.get("CDSL_SEED", "")
    if value and value.lstrip("-").isdigit():
        return int(value)
    return None
