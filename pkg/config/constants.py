"""
Library constants and default values
"""


class Constants:
    """Application constants and default configuration values"""

    VERSION = "0.3.0"

    # Reserved token ids; scene tokens start at SCENE_TOKEN_OFFSET
    BOS_ID = 0
    EOS_ID = 1
    PAD_ID = 2
    BOS_TOKEN = "<bos>"
    EOS_TOKEN = "<eos>"
    PAD_TOKEN = "<pad>"
    SCENE_TOKEN_OFFSET = 3
    SCENE_TOKEN_FORMAT = "scene_{}"

    # Numerics
    MASK_FILL = -1e9           # added to disallowed logits before softmax
    LAYERNORM_EPS = 1e-5
    PROB_FLOOR = 1e-12         # cross-entropy clamp
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    GRAD_CLIP_NORM = 5.0
    RADIUS_DISABLED = -1

    # Dataset layout
    SPLIT_FILES = {
        'train': 'train.jsonl',
        'val': 'val.jsonl',
        'test': 'test.jsonl',
    }
    VOCAB_FILE = 'vocab.json'
    DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)
    DEFAULT_NUM_SCENES = 8
    PROTOTYPE_BANK_SEED = 0

    # Run artifacts
    CHECKPOINT_STEM = 'best'
    MANIFEST_SUFFIX = '.manifest'
    BLOB_SUFFIX = '.bin'
    CHECKPOINT_FORMAT = 'sbat-checkpoint-v1'
    TRAIN_LOG_FILE = 'train_log.jsonl'
    RUN_MANIFEST_FILE = 'run_manifest.json'
    RESOLVED_CONFIG_FILE = 'config.json'

    # Environment
    ENV_PREFIX = 'SBAT_'

    # Process exit codes
    EXIT_CODES = {
        'ok': 0,
        'usage': 1,
        'runtime': 2,
    }
