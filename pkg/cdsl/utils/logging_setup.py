"""Console logging for the command-line entry point."""

import logging
from typing import Optional

from cdsl.constants import CDSL_LOG_LEVEL

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> int:
    """Install one stream handler on the root logger; returns the numeric level.

    ``level`` wins over ``CDSL_LOG_LEVEL``. Unknown names fall back to INFO.
    """
    name = (level or CDSL_LOG_LEVEL or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.INFO
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    return numeric
