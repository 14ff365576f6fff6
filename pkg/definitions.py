import json
import os

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
ASSETS_DIR = os.path.join(ROOT_DIR, "assets")
BIN_DIR = os.path.join(ROOT_DIR, "bin")
LOSS_DEFAULTS_PATH = os.path.join(ASSETS_DIR, "loss_defaults.json")
REPORT_SCHEMA_PATH = os.path.join(ASSETS_DIR, "report_schema.json")
DEFAULT_CONFIG_PATH = os.path.join(BIN_DIR, "config.ini")

LOG_LEVEL_ENV_VAR = "DML_BENCH_LOG_LEVEL"

# Retrieval cut-offs reported in every evaluation
RECALL_KS = (1, 2, 4, 8, 16)

CHECKPOINT_FORMAT_VERSION = 1

with open(LOSS_DEFAULTS_PATH) as fp:
    LOSS_DEFAULTS = json.load(fp)

with open(REPORT_SCHEMA_PATH) as fp:
    REPORT_SCHEMA = json.load(fp)

REPORT_SCHEMA_VERSION = REPORT_SCHEMA["schema_version"]

LOSS_NAMES = list(LOSS_DEFAULTS)

# Losses trained as a single encoder; ``dreml`` wraps one of these
SINGLE_MODEL_LOSS_NAMES = [e for e in LOSS_NAMES if e != "dreml"]

SAMPLER_NAMES = sorted({s for v in LOSS_DEFAULTS.values()
                        for s in v["samplers"]})

METRICS = ("squared-euclidean", "euclidean", "cosine-distance",
           "negative-dot")
RETRIEVAL_METRICS = ("euclidean", "hamming")
