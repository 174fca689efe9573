"""
Enumeration types for the sparse boundary-aware captioning library
"""

from enum import Enum


class Variant(str, Enum):
    """Architecture variants of the ablation table"""
    VANILLA = "vanilla"
    SBAT = "sbat"
    SBAT_NO_CM = "sbat_no_cm"
    SBAT_NO_LOCAL = "sbat_no_local"
    SBAT_SAMPLE = "sbat_sample"


class AttentionMode(str, Enum):
    """Key selection rule applied before the softmax"""
    VANILLA = "vanilla"
    BOUNDARY = "boundary"
    EQUIDISTANT = "equidistant"


class PatienceMetric(str, Enum):
    """Validation metric watched by the learning-rate schedule"""
    VAL_LOSS = "val_loss"
    TOKEN_ACCURACY = "token_accuracy"


class Precision(str, Enum):
    """Floating point width of parameters and activations"""
    FLOAT32 = "float32"
    FLOAT64 = "float64"


class LogLevel(Enum):
    """Log message levels"""
    DEBUG = "debug"
    INFO = "info"
    SUCCESS = "success"
    WARNING = "warning"
    ERROR = "error"
