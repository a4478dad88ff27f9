import os

from dotenv import load_dotenv

load_dotenv()

VERSION = "0.1.0"

GRID_SIZE = int(os.getenv("GRID_SIZE", 1000))
INTERP_COUNT = int(os.getenv("INTERP_COUNT", 10))
S_GRID = int(os.getenv("S_GRID", 33))
ANGLE_GRID = int(os.getenv("ANGLE_GRID", 10000))

ORACLE_CAP = int(os.getenv("ORACLE_CAP", 2_000_000))
RANDOM_BUDGET = int(os.getenv("RANDOM_BUDGET", 100_000))

PE_TRIALS = int(os.getenv("PE_TRIALS", 100_000))
ROC_TRIALS = int(os.getenv("ROC_TRIALS", 20_000))
ROC_THRESHOLDS = int(os.getenv("ROC_THRESHOLDS", 512))
MC_BLOCK = int(os.getenv("MC_BLOCK", 8192))

DRIFT_FRACTION = float(os.getenv("DRIFT_FRACTION", 0.15))
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", 2024))

WORKERS = int(os.getenv("WORKERS", 4))
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
