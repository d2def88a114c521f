import os
import logging
from typing import Optional

from dotenv import load_dotenv

from constants.config import DEFAULT_OUT_DIR, ENV_LOG_LEVEL, ENV_OUT_DIR

logger = logging.getLogger(__name__)

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_environment(env_path: Optional[str] = None) -> bool:
    """Load ``.env`` from the project root; variables already set in the process win."""
    path = env_path or os.path.join(PROJECT_ROOT, ".env")
    if not os.path.exists(path):
        logger.debug("No .env file at %s", path)
        return False
    load_dotenv(path, override=False)
    return True


_env_loaded = load_environment()


def get_env_var(key: str, default: Optional[str] = None) -> Optional[str]:
    # empty strings count as unset
    value = os.environ.get(key)
    return default if value in (None, "") else value


def default_out_dir() -> str:
    return get_env_var(ENV_OUT_DIR, DEFAULT_OUT_DIR)


def default_log_level() -> str:
    return get_env_var(ENV_LOG_LEVEL, "INFO").upper()
