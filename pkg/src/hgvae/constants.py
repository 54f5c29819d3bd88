LOG_SCALE_MIN = -7.0
LOG_SCALE_MAX = 4.0
LOG_2PI = 1.8378770664093453

DATASET_MAGIC = b"HGMD"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"HGV1"

SEQUENCE_LENGTH = 50
PREDICTION_HORIZON = 25
DEFAULT_JOINTS = 18

SEED_ENV_VAR = "HGVAE_SEED"
FEATURE_MEANS_BUFFER = "feature_means"
ASCENT_SCALE_BUFFER = "ascent_scale"
