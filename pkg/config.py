import os
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_LEVEL = os.environ.get("WILDREID_LOG_LEVEL", "INFO").upper()

# Initialize logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger("WildReID")

# Worker pool
DEFAULT_THREADS = int(os.environ.get("WILDREID_THREADS", os.cpu_count() or 1))
DEFAULT_SEED = int(os.environ.get("WILDREID_SEED", 0))

# Exact search tiling (rows per tile)
QUERY_TILE = int(os.environ.get("WILDREID_QUERY_TILE", 512))
REFERENCE_TILE = int(os.environ.get("WILDREID_REFERENCE_TILE", 8192))

# Numerics
NORM_TOLERANCE = 1e-5
RNG_NAME = "numpy.PCG64"

# Local matching: thresholds 0.50, 0.55, ..., 0.95
DEFAULT_RATIO_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_RATIO_THRESHOLD = 0.8

# Trainer defaults
TRAIN_EPOCHS = 100
TRAIN_BATCH_SIZE = 128
TRAIN_MOMENTUM = 0.9
TRAIN_WEIGHT_DECAY = 5e-4
DIVERGENCE_FACTOR = 10.0

if DEFAULT_THREADS < 1:
    logger.critical(f"WILDREID_THREADS must be >= 1, got {DEFAULT_THREADS}")
    raise SystemExit(2)
