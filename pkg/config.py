import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Config:
    """Application settings for the ADROIT active-learning toolkit.

    Experiment hyperparameters live in ``adroit.core.ALConfig`` and are read from
    flat key=value experiment files; this class only carries process-level settings.
    """

    # Logging Configuration
    LOG_DIR = os.getenv("LOG_DIR", "./logs")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    DEBUG_MODE = os.getenv("DEBUG_MODE", "false").lower() in ("1", "true", "yes")
    LOG_MAX_BYTES = int(os.getenv("LOG_MAX_BYTES", str(10 * 1024 * 1024)))  # 10MB per log file
    LOG_BACKUP_COUNT = int(os.getenv("LOG_BACKUP_COUNT", "30"))

    # App Configuration
    APP_DESCRIPTION = "Task-aware pool-based active learning with a unified VAE representation"

    # Working Directories
    RUNS_DIR = os.getenv("RUNS_DIR", "./runs")
    DATA_DIR = os.getenv("DATA_DIR", "./data/cifar-10-batches-bin")

    # Run index (SQLite)
    TRACKER_DB = os.getenv("TRACKER_DB", "./runs/run_tracker.db")
    ENABLE_RUN_TRACKING = os.getenv("ENABLE_RUN_TRACKING", "true").lower() in ("1", "true", "yes")

    # Compute
    NUM_THREADS = int(os.getenv("NUM_THREADS", "1"))  # fixed thread count keeps runs bit-reproducible
    CONCURRENT_SEEDS = int(os.getenv("CONCURRENT_SEEDS", "1"))

    # CSV float formatting (17 significant digits round-trips float64)
    FLOAT_FORMAT = "%.17g"

    @classmethod
    def validate_config(cls):
        """Validate configuration settings"""
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"LOG_LEVEL must be a logging level name, got {cls.LOG_LEVEL!r}")
        if cls.NUM_THREADS < 1:
            raise ValueError("NUM_THREADS must be >= 1")
        if cls.CONCURRENT_SEEDS < 1:
            raise ValueError("CONCURRENT_SEEDS must be >= 1")
        if cls.LOG_MAX_BYTES < 1 or cls.LOG_BACKUP_COUNT < 0:
            raise ValueError("LOG_MAX_BYTES must be >= 1 and LOG_BACKUP_COUNT >= 0")
        return True
