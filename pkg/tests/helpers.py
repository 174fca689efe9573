"""
Shared test helpers: central finite differences and small model configurations
"""

from typing import Callable

import numpy as np

from config.app_config import ModelConfig
from utils.enums import Precision


def central_difference(f: Callable[[], float], array: np.ndarray, index, eps: float = 1e-6) -> float:
    """(f(x + eps) - f(x - eps)) / 2 eps for one entry of array, restored afterwards"""
    original = array[index]
    array[index] = original + eps
    plus = f()
    array[index] = original - eps
    minus = f()
    array[index] = original
    return (plus - minus) / (2 * eps)


def small_config(**overrides) -> ModelConfig:
    """64-bit toy model used by the gradient and wiring tests"""
    fields = dict(d_model=16, heads=2, blocks=1, vocab_size=8, feature_dim=8, n_enc=3, n_dec=3, r=1,
                  max_src_len=16, max_tgt_len=8, dtype=Precision.FLOAT64)
    fields.update(overrides)
    return ModelConfig(**fields)
