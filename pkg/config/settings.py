import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

_REPO_ROOT = Path(__file__).parent.parent


def _as_bool(value: str) -> bool:
    return value.strip().lower() in {'1', 'true', 'yes', 'on'}


class Config:
    """Process-level settings for the simulator."""

    # Logging Settings
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_DIR = Path(os.getenv('LOG_DIR', str(_REPO_ROOT / 'logs')))

    # Runner Settings
    OUTPUT_DIR = Path(os.getenv('PPDL_OUTPUT_DIR', 'runs'))
    AUDIT_LOG = _as_bool(os.getenv('PPDL_AUDIT_LOG', 'false'))

    # Largest per-node arm count we allocate bandit state for
    MAX_ARMS = int(os.getenv('PPDL_MAX_ARMS', '2000000'))

    @classmethod
    def validate(cls):
        """Validate required configuration."""
        required = ['LOG_LEVEL', 'OUTPUT_DIR']
        missing = [key for key in required if not getattr(cls, key)]
        if missing:
            raise ValueError(f"Missing required config: {', '.join(missing)}")
        if cls.MAX_ARMS < 1:
            raise ValueError(f"PPDL_MAX_ARMS must be positive, got {cls.MAX_ARMS}")
