DEFAULT_IMAGE_SIZE: int = 224
DEFAULT_PATCH_SIZE: int = 16
DEFAULT_EMBED_DIM: int = 768
DEFAULT_DEPTH: int = 12
DEFAULT_NUM_HEADS: int = 12
DEFAULT_MLP_RATIO: float = 4.0

# Task-conditioned MoE, 1-based layer indices
DEFAULT_MOE_LAYERS: tuple[int, ...] = (7, 8, 9, 10, 11, 12)
DEFAULT_NUM_EXPERTS: int = 4
DEFAULT_TASK_EMBED_DIM: int = 64
TASK_EMBED_INIT_STD: float = 0.02

# DPT decoder
DEFAULT_TAP_LAYERS: tuple[int, ...] = (3, 6, 9, 12)
DEFAULT_FUSION_DIM: int = 256
DEFAULT_REASSEMBLE_DIMS: tuple[int, ...] = (96, 192, 384, 768)

# Optimizer (AdamW, constant learning rates)
DEFAULT_EPOCHS: int = 200
DEFAULT_BATCH_SIZE: int = 16
BASE_LEARNING_RATE: float = 1e-5
WEIGHT_DECAY: float = 1e-4
BACKBONE_LEARNING_RATE: float = 2e-5
DECODER_LEARNING_RATE: float = 1e-5
MOE_LEARNING_RATE: float = 2e-4
HEAD_LEARNING_RATE: float = 1e-3
GRAD_CLIP_NORM: float | None = 1.0
BACKBONE_LR_GRID: tuple[float, ...] = (1e-5, 2e-5, 5e-5)

VALIDATION_FRACTION: float = 0.2

# Fixed intensity normalisation applied after grayscale → RGB replication
NORMALIZE_MEAN: tuple[float, float, float] = (0.485, 0.456, 0.406)
NORMALIZE_STD: tuple[float, float, float] = (0.229, 0.224, 0.225)

# Augmentation (off by default)
AUGMENT_FLIP_PROB: float = 0.5
AUGMENT_BRIGHTNESS: float = 0.1
AUGMENT_CONTRAST: float = 0.1

# Losses
DICE_EPS: float = 1e-6
FOCAL_ALPHA: float = 2.0
FOCAL_BETA: float = 4.0
FOCAL_CLAMP: float = 1e-4
SMOOTH_L1_BETA: float = 1.0

# Checkpoint container
WEIGHTS_FILE: str = 'weights.bin'
META_FILE: str = 'meta.json'
LOG_FILE: str = 'log.csv'
WEIGHTS_MAGIC: bytes = b'M2W1'

# Analysis outputs
DELTA_BASENAME: str = 'delta'
FLOAT_SIGNIFICANT_DIGITS: int = 6

LOG_LEVEL: str = 'WARNING'
