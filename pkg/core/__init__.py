"""
Core library: tensor engine, sparse attention, model, data, training and decoding
"""

from .exceptions import (SBATError, DimensionError, ContractError, AlignmentError, SequenceLengthError,
                         ConfigError, DatasetFormatError, CheckpointError, TrainingError, UsageError)

__all__ = [
    'SBATError', 'DimensionError', 'ContractError', 'AlignmentError', 'SequenceLengthError',
    'ConfigError', 'DatasetFormatError', 'CheckpointError', 'TrainingError', 'UsageError',
]
