"""Constants for the OOD watermarking toolkit."""

DOMAIN = "ood_watermark"

# Binary formats
CHECKPOINT_MAGIC = b"WMK1"
STATS_MAGIC = b"WMKN"
WATERMARK_MAGIC = b"WMKW"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ACTIVATION_IDENTITY = 0
ACTIVATION_RELU = 1

# Numerics
EXPONENT_CAP = 80.0
FD_STEP = 1e-3
STD_FLOOR = 1e-6
SYNTHETIC_BOX_BOUND = 3.0

# Scorer defaults
DEFAULT_ENERGY_TEMPERATURE = 1.0
DEFAULT_ODIN_MAGNITUDE = 0.0014
DEFAULT_ODIN_TEMPERATURE = 1000.0
DEFAULT_REACT_QUANTILE = 0.9
DEFAULT_TPR_TARGET = 0.95

# Watermark defaults (free energy and softmax searches on CIFAR-10)
DEFAULT_SIGMA2 = 0.001
DEFAULT_STEP_SIZE = 0.01
DEFAULT_WATERMARK_EPOCHS = 50
DEFAULT_WATERMARK_DECAY_EPOCHS = (25,)
DEFAULT_BATCH_SIZE = 64
DEFAULT_SAM_P = 2.0
DEFAULT_SAM_Q = 2.0
FREE_ENERGY_DEFAULTS = {
    "sigma1": 0.6,
    "rho": 0.7,
    "beta": 0.1,
    "t1": 0.2,
    "t2": 0.7,
}
SOFTMAX_DEFAULTS = {
    "sigma1": 0.4,
    "rho": 1.0,
    "beta": 3.5,
}

# Classifier training defaults
DEFAULT_TRAIN_EPOCHS = 30
DEFAULT_TRAIN_LR = 0.05
DEFAULT_MOMENTUM = 0.9

# Random search candidate sets
SEARCH_SPACE_COMMON = {
    "sigma1": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0],
    "rho": [0.0, 0.02, 0.05, 0.07, 0.1, 0.2, 0.5, 0.7, 1.0, 2.0, 5.0],
}
SEARCH_SPACE_SOFTMAX = {
    **SEARCH_SPACE_COMMON,
    "beta": [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0],
}
SEARCH_SPACE_FREE_ENERGY = {
    **SEARCH_SPACE_COMMON,
    "beta": [0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
    "t1": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    "t2": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
}
DEFAULT_SWEEP_TRIALS = 20
SWEEP_HOLDOUT_FRACTION = 0.1

# Configuration keys
CONF_ID_DATASET = "id_dataset"
CONF_OOD_DATASETS = "ood_datasets"
CONF_MODEL = "model"
CONF_SCORERS = "scorers"
CONF_WATERMARK = "watermark"
CONF_SWEEP = "sweep"
CONF_OUTLIER_EXPOSURE = "outlier_exposure"
CONF_OUTPUT_DIR = "output_dir"
CONF_SEEDS = "seeds"
CONF_KIND = "kind"
CONF_NAME = "name"
CONF_ROLE = "role"
CONF_SIZE = "size"
CONF_IMAGES = "images"
CONF_LABELS = "labels"
CONF_TRAIN_IMAGES = "train_images"
CONF_TRAIN_LABELS = "train_labels"
CONF_TEST_IMAGES = "test_images"
CONF_TEST_LABELS = "test_labels"
CONF_CLASS_COUNT = "class_count"
CONF_INPUT_DIM = "input_dim"
CONF_SEPARATION = "separation"
CONF_TRAIN_SIZE = "train_size"
CONF_TEST_SIZE = "test_size"
CONF_HIDDEN_DIMS = "hidden_dims"
CONF_TRAIN = "train"
CONF_EPOCHS = "epochs"
CONF_BATCH_SIZE = "batch_size"
CONF_LR = "lr"
CONF_MOMENTUM = "momentum"
CONF_LR_DECAY_EPOCHS = "lr_decay_epochs"
CONF_TEMPERATURE = "temperature"
CONF_MAGNITUDE = "magnitude"
CONF_CLAMP_QUANTILE = "clamp_quantile"
CONF_BASE = "base"
CONF_LOSS = "loss"
CONF_T1 = "t1"
CONF_T2 = "t2"
CONF_BETA = "beta"
CONF_SIGMA1 = "sigma1"
CONF_SIGMA2 = "sigma2"
CONF_RHO = "rho"
CONF_STEP_SIZE = "step_size"
CONF_NEGATIVE_SOURCE = "negative_source"
CONF_KINDS = "kinds"
CONF_DATASET = "dataset"
CONF_SCORER = "scorer"
CONF_TRIALS = "trials"
CONF_SPACE = "space"
CONF_LAMBDA = "lambda"
CONF_OUTLIERS = "outliers"

ROLE_TEST = "test"
ROLE_VALIDATION = "validation"

# Output files
FILE_CHECKPOINT = "model.wmk"
FILE_STATS = "stats.wmkn"
FILE_TRAIN_REPORT = "train_report.csv"
FILE_WATERMARK = "watermark.wmkw"
FILE_WATERMARK_TRACE = "watermark_trace.csv"
FILE_WATERMARK_REPORT = "watermark_report.csv"
FILE_SWEEP = "sweep.csv"
FILE_SUMMARY = "summary.csv"
FILE_LOG = "wmark.log"
SEED_DIR_PREFIX = "seed-"
SCORES_DIR = "scores"
REPORT_DIR = "report"

# CLI
ENV_THREADS = "WMARK_THREADS"
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3

# Extra configuration keys
CONF_BOUND = "bound"

# Dataset kinds
KIND_IDX = "idx"
KIND_GAUSSIAN_BLOBS = "gaussian_blobs"
KIND_UNIFORM_BOX = "uniform_box"
KIND_SHIFTED_ID = "shifted_id"

# Negative sources
SOURCE_GAUSSIAN = "gaussian"
SOURCE_OUTLIERS = "outliers"
SOURCE_AUGMENTED = "augmented"

# Synthetic and model defaults
DEFAULT_BLOB_CLASSES = 2
DEFAULT_BLOB_DIM = 16
DEFAULT_BLOB_SEPARATION = 10.0
DEFAULT_TRAIN_SIZE = 2000
DEFAULT_TEST_SIZE = 1000
DEFAULT_OOD_SIZE = 1000
DEFAULT_HIDDEN_DIMS = (64,)
DEFAULT_OE_WEIGHT = 0.5
DEFAULT_HISTOGRAM_BINS = 30
