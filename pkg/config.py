import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Runtime toggles loaded from environment variables / .env.
    # Nothing here changes numerical results; experiment state lives in the
    # experiment config file (see utils/experiment_config.py).

    # Debug Mode (per-call PGD containment checks)
    DEBUG_MODE = os.getenv("DEBUG_MODE", "false").lower() == "true"

    # Logging / progress output
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    SHOW_PROGRESS = os.getenv("SHOW_PROGRESS", "true").lower() == "true"

    # Artifacts
    DEFAULT_OUTPUT_DIR = os.getenv("DEFAULT_OUTPUT_DIR", "runs")
