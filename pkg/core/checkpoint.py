"""
Checkpoint persistence: a key=value manifest plus a little-endian float32 blob
"""

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from loguru import logger
from pydantic import ValidationError

from config.app_config import ModelConfig
from config.constants import Constants
from .exceptions import CheckpointError
from .model import SBATModel, parameter_shapes
from .numkit import Parameter


BLOB_DTYPE = np.dtype('<f4')


def checkpoint_paths(out_dir: Path, stem: str = Constants.CHECKPOINT_STEM) -> Tuple[Path, Path]:
    """Manifest and blob paths for a checkpoint stem inside out_dir"""
    out_dir = Path(out_dir)
    return out_dir / f"{stem}{Constants.MANIFEST_SUFFIX}", out_dir / f"{stem}{Constants.BLOB_SUFFIX}"


def resolve_manifest_path(path: Path) -> Path:
    """Accept the manifest itself, the blob, or a directory holding the default stem"""
    path = Path(path)
    if path.is_dir():
        return checkpoint_paths(path)[0]
    if path.suffix == Constants.BLOB_SUFFIX:
        return path.with_suffix(Constants.MANIFEST_SUFFIX)
    return path


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(getattr(value, "value", value))


def manifest_lines(model: SBATModel) -> List[str]:
    """Manifest content for a model: format, seed, config fields, then parameters in order"""
    lines = [f"format={Constants.CHECKPOINT_FORMAT}", f"seed={model.seed}"]
    for key, value in model.cfg.model_dump().items():
        lines.append(f"config.{key}={_format_value(value)}")

    offset = 0
    for name, param in model.params.items():
        shape = ",".join(str(n) for n in param.shape)
        lines.append(f"param.{name}={shape};{offset}")
        offset += int(param.value.data.size) * BLOB_DTYPE.itemsize
    lines.append(f"blob_bytes={offset}")
    return lines


def save_checkpoint(model: SBATModel, out_dir: Path, stem: str = Constants.CHECKPOINT_STEM) -> Path:
    """Write <stem>.manifest and <stem>.bin; returns the manifest path"""
    manifest_path, blob_path = checkpoint_paths(out_dir, stem)
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        with open(blob_path, 'wb') as f:
            for param in model.params.values():
                f.write(np.ascontiguousarray(param.value.data, dtype=BLOB_DTYPE).tobytes())
        with open(manifest_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write("\n".join(manifest_lines(model)) + "\n")
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {manifest_path}: {e}") from None
    logger.debug(f"Checkpoint written to {manifest_path}")
    return manifest_path


def read_manifest(manifest_path: Path) -> Dict[str, str]:
    """Parse key=value lines, rejecting anything else"""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint manifest not found: {manifest_path}") from None
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint manifest {manifest_path}: {e}") from None

    entries: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise CheckpointError(f"{manifest_path}:{number}: expected key=value")
        if key in entries:
            raise CheckpointError(f"{manifest_path}:{number}: duplicate key '{key}'")
        entries[key] = value
    return entries


def _config_from_manifest(entries: Dict[str, str]) -> ModelConfig:
    fields = {}
    for key, value in entries.items():
        if key.startswith("config."):
            name = key[len("config."):]
            fields[name] = None if value == "" else value
    try:
        return ModelConfig(**fields)
    except ValidationError as e:
        raise CheckpointError(f"Checkpoint configuration is invalid: {e}") from None


def load_checkpoint(path: Path) -> SBATModel:
    """Rebuild the model saved by save_checkpoint"""
    manifest_path = resolve_manifest_path(path)
    entries = read_manifest(manifest_path)
    if entries.get("format") != Constants.CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path}: unsupported format '{entries.get('format')}'")

    cfg = _config_from_manifest(entries)
    try:
        seed = int(entries.get("seed", "0"))
    except ValueError:
        raise CheckpointError(f"{manifest_path}: seed is not an integer") from None

    blob_path = manifest_path.with_suffix(Constants.BLOB_SUFFIX)
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint blob {blob_path}: {e}") from None
    declared = entries.get("blob_bytes")
    if declared is not None and int(declared) != len(blob):
        raise CheckpointError(f"{blob_path}: expected {declared} bytes, found {len(blob)}")

    expected = parameter_shapes(cfg)
    stored = [key[len("param."):] for key in entries if key.startswith("param.")]
    if stored != list(expected):
        raise CheckpointError(f"{manifest_path}: parameter list does not match its configuration")

    params: Dict[str, Parameter] = {}
    for name, shape in expected.items():
        shape_text, _, offset_text = entries[f"param.{name}"].partition(";")
        try:
            stored_shape = tuple(int(n) for n in shape_text.split(",") if n)
            offset = int(offset_text)
        except ValueError:
            raise CheckpointError(f"{manifest_path}: malformed entry for parameter '{name}'") from None
        if stored_shape != shape:
            raise CheckpointError(f"{manifest_path}: parameter '{name}' has shape {stored_shape}, "
                                  f"configuration needs {shape}")
        count = int(np.prod(shape))
        end = offset + count * BLOB_DTYPE.itemsize
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"{blob_path}: parameter '{name}' runs past the end of the blob")
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset).reshape(shape)
        params[name] = Parameter.create(name, values, dtype=cfg.numpy_dtype)

    logger.debug(f"Checkpoint loaded from {manifest_path}")
    return SBATModel(cfg, seed=seed, params=params)
