"""
Shared initialization for the command line.
Ensures environment variables and logging are properly configured.
"""

import logging
from typing import Optional

from utils.env_loader import default_log_level

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None) -> int:
    """
    Configure root logging once per process.

    Precedence: explicit ``level`` (the --log-level flag), then the
    PMAM_LOG_LEVEL environment variable, then INFO.

    Returns:
        int: The numeric level in effect
    """
    name = (level or default_log_level()).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.INFO
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    # third-party chatter stays at WARNING unless we are debugging
    for noisy in ("joblib",):
        logging.getLogger(noisy).setLevel(max(numeric, logging.WARNING))
    logger.debug(f"Logging configured at {logging.getLevelName(numeric)}")
    return numeric
