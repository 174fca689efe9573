"""
Configuration file loading and precedence resolution
Built-in defaults < config file < command-line flags
"""

import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from loguru import logger
from pydantic import ValidationError

from core.exceptions import ConfigError
from .app_config import ModelConfig, TrainConfig


SECTIONS = ('model', 'train')


class ConfigManager:
    """Loads a JSON config (or run manifest) and merges it with flag overrides"""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = Path(config_file) if config_file else None
        self.file_data = self.load_config()

    def load_config(self) -> Dict[str, Dict[str, Any]]:
        """Read the model/train sections from the config file, if any"""
        if self.config_file is None:
            return {section: {} for section in SECTIONS}

        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {self.config_file}") from None
        except PermissionError:
            raise ConfigError(f"Permission denied reading config file: {self.config_file}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {self.config_file} is not valid JSON: {e}") from None

        # A run manifest carries its resolved configuration under "config"
        if isinstance(data, dict) and isinstance(data.get('config'), dict):
            data = data['config']
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {self.config_file} must hold a JSON object")

        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections in {self.config_file}: {', '.join(sorted(unknown))}")
        sections = {}
        for section in SECTIONS:
            value = data.get(section, {})
            if not isinstance(value, dict):
                raise ConfigError(f"Config section '{section}' must be a JSON object")
            sections[section] = value
        logger.debug(f"Loaded configuration from {self.config_file}")
        return sections

    def _merge(self, section: str, overrides: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        merged = dict(self.file_data.get(section, {}))
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = value
        return merged

    def resolve_model(self, overrides: Optional[Dict[str, Any]] = None) -> ModelConfig:
        try:
            return ModelConfig(**self._merge('model', overrides))
        except ValidationError as e:
            raise ConfigError(f"Model configuration validation failed: {e}") from None

    def resolve_train(self, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
        try:
            return TrainConfig(**self._merge('train', overrides))
        except ValidationError as e:
            raise ConfigError(f"Training configuration validation failed: {e}") from None

    def resolve(self, model_overrides: Optional[Dict[str, Any]] = None,
                train_overrides: Optional[Dict[str, Any]] = None) -> Tuple[ModelConfig, TrainConfig]:
        """Resolve both configurations with flag overrides applied last"""
        return self.resolve_model(model_overrides), self.resolve_train(train_overrides)

    @staticmethod
    def as_dict(model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None) -> Dict[str, Any]:
        """Full key set after defaults, in the config-file layout"""
        resolved = {'model': model_cfg.model_dump(mode='json')}
        if train_cfg is not None:
            resolved['train'] = train_cfg.model_dump(mode='json')
        return resolved

    @staticmethod
    def save_config(path: Path, data: Dict[str, Any]):
        """Write a config dictionary as pretty JSON"""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, sort_keys=True)
                f.write('\n')
        except OSError as e:
            raise ConfigError(f"Failed to save config to {path}: {e}") from None
        logger.debug(f"Configuration saved to {path}")
