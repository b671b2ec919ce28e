import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env file
load_dotenv()

# Base directories
BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = BASE_DIR / "data"
EXAMPLE_DATASET_DIR = DATA_DIR / "example12"
OUTPUT_DIR = Path(os.getenv("RFGNN_OUTPUT_DIR", "runs"))

# Logging
LOG_LEVEL = os.getenv("RFGNN_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Training defaults (AdamW, 200 epochs, lr 0.01, L2 5e-4, dropout 0.3-0.5)
DEFAULT_EPOCHS = int(os.getenv("RFGNN_EPOCHS", "200"))
DEFAULT_LR = float(os.getenv("RFGNN_LR", "0.01"))
DEFAULT_WEIGHT_DECAY = float(os.getenv("RFGNN_WEIGHT_DECAY", "5e-4"))
DEFAULT_DROPOUT = float(os.getenv("RFGNN_DROPOUT", "0.5"))

ADAMW_BETA1 = float(os.getenv("RFGNN_ADAMW_BETA1", "0.9"))
ADAMW_BETA2 = float(os.getenv("RFGNN_ADAMW_BETA2", "0.999"))
ADAMW_EPS = float(os.getenv("RFGNN_ADAMW_EPS", "1e-8"))

# Backbone defaults
DEFAULT_LAYERS = int(os.getenv("RFGNN_LAYERS", "2"))
DEFAULT_HIDDEN = int(os.getenv("RFGNN_HIDDEN", "128"))  # 128 or 256
DEFAULT_SGC_POWER = int(os.getenv("RFGNN_SGC_POWER", "2"))

# Ensemble defaults
DEFAULT_BRANCHES = int(os.getenv("RFGNN_BRANCHES", "10"))
DEFAULT_ALPHA = float(os.getenv("RFGNN_ALPHA", "0.8"))
DEFAULT_BETA = float(os.getenv("RFGNN_BETA", "0.8"))
DEFAULT_GAMMA = float(os.getenv("RFGNN_GAMMA", "0.9"))

# Per-dataset subgraph construction rates (alpha, beta, gamma)
PRESETS = {
    "cresci15": {"alpha": 0.95, "beta": 0.95, "gamma": 0.95},
    "twibot20": {"alpha": 0.8, "beta": 0.8, "gamma": 0.9},
    "mgtab": {"alpha": 0.6, "beta": 0.9, "gamma": 0.8},
}

# Experiment runner
DEFAULT_SEED = int(os.getenv("RFGNN_SEED", "0"))
DEFAULT_RUNS = int(os.getenv("RFGNN_RUNS", "5"))  # five seeds per reported number
DEFAULT_THREADS = int(os.getenv("RFGNN_THREADS", "1"))
NOISE_FRACTIONS = [
    float(v) for v in os.getenv("RFGNN_NOISE_FRACTIONS", "0.1,0.2,0.3").split(",") if v.strip()
]

# Synthetic benchmark (contextual SBM)
SYNTH_NODES = int(os.getenv("RFGNN_SYNTH_NODES", "600"))
SYNTH_CLASSES = int(os.getenv("RFGNN_SYNTH_CLASSES", "2"))
SYNTH_P_IN = float(os.getenv("RFGNN_SYNTH_P_IN", "0.01"))
SYNTH_P_OUT = float(os.getenv("RFGNN_SYNTH_P_OUT", "0.005"))
SYNTH_INFORMATIVE = int(os.getenv("RFGNN_SYNTH_INFORMATIVE", "16"))
SYNTH_REDUNDANT = int(os.getenv("RFGNN_SYNTH_REDUNDANT", "32"))
SYNTH_NOISE = int(os.getenv("RFGNN_SYNTH_NOISE", "80"))
SYNTH_CLASS_SEPARATION = float(os.getenv("RFGNN_SYNTH_CLASS_SEPARATION", "0.5"))
SYNTH_REDUNDANT_NOISE = float(os.getenv("RFGNN_SYNTH_REDUNDANT_NOISE", "0.5"))
SYNTH_RELATIONS = int(os.getenv("RFGNN_SYNTH_RELATIONS", "1"))

# Class 1 is the bot (positive) class
POSITIVE_CLASS = 1
DEFAULT_CLASS_NAMES = ["human", "bot"]

# Dataset file names
MANIFEST_FILE = "manifest.json"
FEATURES_FILE = "features.csv"
EDGES_FILE = "edges.csv"
LABELS_FILE = "labels.csv"
SPLITS_FILE = "splits.json"

# Checkpoint and report files
ENSEMBLE_FILE = "ensemble.json"
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
CURVE_CSV = "curve.csv"
EMBEDDINGS_CSV = "embeddings.csv"
CHECKPOINT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
