import os
from ast import literal_eval
from typing import Callable

from dotenv import load_dotenv

ROOT_DIR = os.path.abspath(os.path.dirname(os.path.dirname(__file__)))

VERSION = "0.1.0"


def get_abs_path(file_path: str):
    """append ROOT_DIR for relative path"""
    # Already absolute path
    if file_path.startswith("/"):
        return file_path
    else:
        return os.path.join(ROOT_DIR, file_path)


def tf_getenv(env_var: str, default_factory: Callable = None):
    """
    Get env value, convert into Python object
    Args:
        env_var (str): env var, example: ASPP_RATES
        default_factory: returns value if this env var is not set.

    """
    value = os.getenv(env_var)
    if value is None:
        return default_factory()

    return literal_eval(value)


config_file = os.environ.get("CONFIG")
if config_file:
    config_file = get_abs_path(config_file)
    load_dotenv(config_file)
else:
    load_dotenv()

COLOR_LOG = "COLOR_LOG" in os.environ

# seed of every generator that has no explicit seed
SEED = int(os.environ.get("SEED", 0))

# focal loss constants, canonical alpha-balanced form
FOCAL_ALPHA = float(os.environ.get("FOCAL_ALPHA", 0.25))
FOCAL_GAMMA = float(os.environ.get("FOCAL_GAMMA", 2.0))

# chessboard radius of the edge mask
EDGE_WIDTH = int(os.environ.get("EDGE_WIDTH", 2))

BINARIZE_THRESHOLD = float(os.environ.get("BINARIZE_THRESHOLD", 0.5))
EDGE_SPLIT_THRESHOLD = float(os.environ.get("EDGE_SPLIT_THRESHOLD", 0.5))

# a prediction is a true positive from this IoU on
IOU_THRESHOLD = float(os.environ.get("IOU_THRESHOLD", 0.5))

GRAD_CHECK_EPSILON = float(os.environ.get("GRAD_CHECK_EPSILON", 1e-5))

# default of the --jobs flag, 1 keeps CI runs bitwise stable
JOBS = int(os.environ.get("JOBS", 1))

# rejections allowed before the scene generator gives up
MAX_PLACEMENT_ATTEMPTS = int(os.environ.get("MAX_PLACEMENT_ATTEMPTS", 2000))

# desk-scale tiling
DEFAULT_CORE_SIZE = int(os.environ.get("DEFAULT_CORE_SIZE", 64))
DEFAULT_MARGIN = int(os.environ.get("DEFAULT_MARGIN", 8))

# desk-scale training
DEFAULT_BATCH_SIZE = int(os.environ.get("DEFAULT_BATCH_SIZE", 4))
DEFAULT_EPOCHS = int(os.environ.get("DEFAULT_EPOCHS", 50))
DEFAULT_LEARNING_RATE = float(os.environ.get("DEFAULT_LEARNING_RATE", 1e-3))

# (1, 3, 6): DeepLabV3+ rates scaled down for small tiles
ASPP_RATES = tuple(tf_getenv("ASPP_RATES", lambda: (1, 3, 6)))

RUN_MANIFEST_NAME = "run_manifest.json"
