"""
Utility modules for the sparse boundary-aware captioner
"""

from .enums import AttentionMode, LogLevel, PatienceMetric, Precision, Variant
from .platform_utils import machine_cores, worker_threads
from .logger import setup_logging, LogManager

__all__ = [
    'AttentionMode', 'LogLevel', 'PatienceMetric', 'Precision', 'Variant',
    'machine_cores', 'worker_threads', 'setup_logging', 'LogManager',
]
