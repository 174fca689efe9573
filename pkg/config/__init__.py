"""
Configuration management for the sparse boundary-aware captioner
"""

from .app_config import ModelConfig, TrainConfig, RunSettings
from .config_manager import ConfigManager
from .constants import Constants

__all__ = ['ModelConfig', 'TrainConfig', 'RunSettings', 'ConfigManager', 'Constants']
