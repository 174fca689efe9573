"""
Synthetic scenario videos: aligned image/motion feature sequences with
piecewise-constant scenario structure, their captions, and the dataset files
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config.constants import Constants
from .exceptions import AlignmentError, ContractError, DatasetFormatError, DimensionError


MODALITY_STREAMS = {'image': 0, 'motion': 1}


class ScenarioSpec(BaseModel):
    """Ground-truth segmentation of one generated record"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    T: int = Field(..., ge=1)
    boundaries: List[int]
    scenario_ids: List[int]

    @model_validator(mode="after")
    def validate_segments(self) -> "ScenarioSpec":
        if not self.boundaries or self.boundaries[0] != 0:
            raise ValueError("boundaries must start at 0")
        if any(b >= a for a, b in zip(self.boundaries[1:], self.boundaries)):
            raise ValueError("boundaries must be strictly increasing")
        if self.boundaries[-1] >= self.T:
            raise ValueError(f"boundaries must lie within [0, {self.T})")
        if len(self.scenario_ids) != len(self.boundaries):
            raise ValueError("one scenario id is needed per segment")
        if any(a == b for a, b in zip(self.scenario_ids, self.scenario_ids[1:])):
            raise ValueError("consecutive scenario ids must differ")
        return self

    @property
    def k(self) -> int:
        return len(self.boundaries)

    @property
    def scene_changes(self) -> List[int]:
        """Boundary columns other than the leading 0"""
        return list(self.boundaries[1:])

    def step_scenarios(self) -> np.ndarray:
        """Scenario id of every step"""
        ends = list(self.boundaries[1:]) + [self.T]
        lengths = [end - start for start, end in zip(self.boundaries, ends)]
        return np.repeat(np.asarray(self.scenario_ids, dtype=np.int64), lengths)


def caption_for(spec: ScenarioSpec) -> List[int]:
    """BOS, one scene token per segment, EOS"""
    return [Constants.BOS_ID] + [Constants.SCENE_TOKEN_OFFSET + s for s in spec.scenario_ids] + [Constants.EOS_ID]


@dataclass(eq=False)
class CaptionRecord:
    """One sample: aligned feature streams, gold captions and (for generated data) its scenario spec"""

    id: str
    image_features: np.ndarray
    motion_features: np.ndarray
    captions: List[List[int]]
    spec: Optional[ScenarioSpec] = None

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.motion_features = np.asarray(self.motion_features, dtype=np.float64)
        for name in ('image_features', 'motion_features'):
            if getattr(self, name).ndim != 2:
                raise DimensionError("caption_record", getattr(self, name).shape, detail=f"{name} must be T x d_feat")
        if self.image_features.shape[0] != self.motion_features.shape[0]:
            raise AlignmentError(f"record {self.id}: image has {self.image_features.shape[0]} steps, "
                                 f"motion has {self.motion_features.shape[0]}")
        if self.image_features.shape[1] != self.motion_features.shape[1]:
            raise DimensionError("caption_record", self.image_features.shape, self.motion_features.shape,
                                 detail="streams must share d_feat")
        self.captions = [list(map(int, c)) for c in self.captions]

    @property
    def T(self) -> int:
        return self.image_features.shape[0]

    @property
    def d_feat(self) -> int:
        return self.image_features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CaptionRecord):
            return NotImplemented
        return (self.id == other.id
                and np.array_equal(self.image_features, other.image_features)
                and np.array_equal(self.motion_features, other.motion_features)
                and self.captions == other.captions
                and self.spec == other.spec)

    def to_json(self) -> str:
        data = {
            'id': self.id,
            'image_features': self.image_features.tolist(),
            'motion_features': self.motion_features.tolist(),
            'captions': self.captions,
        }
        if self.spec is not None:
            data['spec'] = self.spec.model_dump()
        return json.dumps(data, separators=(',', ':'))


class _RecordLine(BaseModel):
    """Schema of one dataset line"""

    model_config = ConfigDict(extra="forbid")

    id: str
    image_features: List[List[float]]
    motion_features: List[List[float]]
    captions: List[List[int]] = Field(..., min_length=1)
    spec: Optional[ScenarioSpec] = None


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


def scene_token(scene: int) -> str:
    return Constants.SCENE_TOKEN_FORMAT.format(scene)


@dataclass
class Vocabulary:
    """Token to id map with the reserved BOS/EOS/PAD entries"""

    token_to_id: Dict[str, int] = field(default_factory=lambda: {
        Constants.BOS_TOKEN: Constants.BOS_ID,
        Constants.EOS_TOKEN: Constants.EOS_ID,
        Constants.PAD_TOKEN: Constants.PAD_ID,
    })

    @classmethod
    def from_records(cls, records: Iterable[CaptionRecord]) -> "Vocabulary":
        vocab = cls()
        for record in records:
            for caption in record.captions:
                for token_id in caption:
                    if token_id >= Constants.SCENE_TOKEN_OFFSET:
                        vocab.token_to_id[scene_token(token_id - Constants.SCENE_TOKEN_OFFSET)] = token_id
        vocab.token_to_id = dict(sorted(vocab.token_to_id.items(), key=lambda item: item[1]))
        return vocab

    @classmethod
    def for_size(cls, vocab_size: int) -> "Vocabulary":
        """Reserved tokens plus scene tokens for every remaining id below vocab_size"""
        vocab = cls()
        for token_id in range(Constants.SCENE_TOKEN_OFFSET, vocab_size):
            vocab.token_to_id[scene_token(token_id - Constants.SCENE_TOKEN_OFFSET)] = token_id
        return vocab

    @property
    def id_to_token(self) -> Dict[int, str]:
        return {i: t for t, i in self.token_to_id.items()}

    @property
    def size(self) -> int:
        """Smallest vocab_size that covers every id"""
        return max(self.token_to_id.values()) + 1

    def __len__(self) -> int:
        return len(self.token_to_id)

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> List[str]:
        """Token strings for ids; BOS/EOS/PAD are dropped unless strip_special is False"""
        lookup = self.id_to_token
        special = {Constants.BOS_ID, Constants.EOS_ID, Constants.PAD_ID}
        words = []
        for token_id in ids:
            if strip_special and token_id in special:
                continue
            words.append(lookup.get(int(token_id), f"<unk:{token_id}>"))
        return words

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.token_to_id, f, indent=2)
            f.write('\n')

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        path = Path(path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"vocabulary is not valid JSON: {e.msg}", line=e.lineno, path=str(path)) from None
        if not isinstance(data, dict) or not all(isinstance(v, int) for v in data.values()):
            raise DatasetFormatError("vocabulary must map tokens to integer ids", path=str(path))
        return cls(token_to_id=data)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def prototype_bank(modality: str, d_feat: int, num_scenes: int = Constants.DEFAULT_NUM_SCENES) -> np.ndarray:
    """Fixed unit-norm scene prototypes of one modality, num_scenes x d_feat"""
    rng = np.random.default_rng([Constants.PROTOTYPE_BANK_SEED, MODALITY_STREAMS[modality], d_feat, num_scenes])
    bank = rng.normal(size=(num_scenes, d_feat))
    return bank / np.linalg.norm(bank, axis=1, keepdims=True)


def _segment_boundaries(T: int, k: int, rng: np.random.Generator) -> List[int]:
    # Spread the T - 2k spare steps over k segments; every composition is equally likely
    spare = T - 2 * k
    bars = np.sort(rng.choice(spare + k - 1, size=k - 1, replace=False)) if k > 1 else np.array([], dtype=np.int64)
    parts = np.diff(np.concatenate(([-1], bars, [spare + k - 1]))) - 1
    lengths = 2 + parts
    return [0] + np.cumsum(lengths)[:-1].astype(int).tolist()


def build_record(spec: ScenarioSpec, d_feat: int, sigma: float, rng: np.random.Generator,
                 record_id: str, num_scenes: int = Constants.DEFAULT_NUM_SCENES) -> CaptionRecord:
    """Fill each segment with its prototype plus N(0, sigma^2) noise"""
    steps = spec.step_scenarios()
    streams = {}
    for modality in MODALITY_STREAMS:
        clean = prototype_bank(modality, d_feat, num_scenes)[steps]
        noise = rng.normal(0.0, 1.0, size=clean.shape)
        streams[modality] = clean + sigma * noise if sigma > 0 else clean
    return CaptionRecord(
        id=record_id,
        image_features=streams['image'],
        motion_features=streams['motion'],
        captions=[caption_for(spec)],
        spec=spec,
    )


def gen_scenario_sequence(T: int, k: int, d_feat: int = 32, sigma: float = 0.05, seed: int = 0,
                          record_id: Optional[str] = None,
                          num_scenes: int = Constants.DEFAULT_NUM_SCENES) -> CaptionRecord:
    """Generate one record with k scenarios over T steps

    Args:
        T: number of steps
        k: number of scenarios, each at least 2 steps long
        d_feat: feature width of both modalities
        sigma: standard deviation of the per-entry Gaussian noise
        seed: seed of this record's generator
        record_id: defaults to "seed<seed>"
        num_scenes: size of the prototype bank scene ids are drawn from

    Returns:
        CaptionRecord carrying its ScenarioSpec
    """
    if not 2 <= k <= T:
        raise ContractError(f"need 2 <= k <= T, got k={k}, T={T}")
    if 2 * k > T:
        raise ContractError(f"{k} scenarios of at least 2 steps do not fit in T={T}")
    if k > num_scenes:
        raise ContractError(f"k={k} exceeds the {num_scenes} available scenes")
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")

    rng = np.random.default_rng(seed)
    scenario_ids = rng.choice(num_scenes, size=k, replace=False).astype(int).tolist()
    spec = ScenarioSpec(T=T, boundaries=_segment_boundaries(T, k, rng), scenario_ids=scenario_ids)
    return build_record(spec, d_feat, sigma, rng, record_id or f"seed{seed}", num_scenes)


def record_seed(seed: int, index: int) -> int:
    """Independent per-record seed derived from the dataset seed"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_counts(count: int, split_ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Records per split: val and test are rounded, train takes the remainder"""
    if len(split_ratios) != 3 or any(r < 0 for r in split_ratios):
        raise ContractError(f"split ratios must be three non-negative numbers, got {split_ratios}")
    if not math.isclose(sum(split_ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"split ratios must sum to 1, got {sum(split_ratios)}")
    val = int(round(count * split_ratios[1]))
    test = int(round(count * split_ratios[2]))
    train = count - val - test
    if train < 0:
        raise ContractError(f"split ratios {split_ratios} leave no room for training records")
    return train, val, test


def save_dataset(records: Sequence[CaptionRecord], path: Path):
    """Write records as one JSON object per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(record.to_json())
            f.write('\n')


def gen_dataset(out_dir: Path, count: int, split_ratios: Sequence[float] = Constants.DEFAULT_SPLIT_RATIOS,
                T: int = 32, k_range: Tuple[int, int] = (2, 5), d_feat: int = 32, sigma: float = 0.05,
                seed: int = 0, num_scenes: int = Constants.DEFAULT_NUM_SCENES) -> Dict[str, Path]:
    """Write train/val/test files and the vocabulary; returns the written paths"""
    k_min, k_max = k_range
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if k_min > k_max:
        raise ContractError(f"k range is empty: {k_min}..{k_max}")
    sizes = split_counts(count, split_ratios)

    records = []
    for index in range(count):
        k = int(np.random.default_rng([seed, index]).integers(k_min, k_max + 1))
        records.append(gen_scenario_sequence(T, k, d_feat, sigma, record_seed(seed, index),
                                             record_id=f"rec{index:05d}", num_scenes=num_scenes))

    out_dir = Path(out_dir)
    written: Dict[str, Path] = {}
    start = 0
    for split, size in zip(Constants.SPLIT_FILES, sizes):
        path = out_dir / Constants.SPLIT_FILES[split]
        save_dataset(records[start:start + size], path)
        written[split] = path
        start += size
    vocab_path = out_dir / Constants.VOCAB_FILE
    Vocabulary.from_records(records).save(vocab_path)
    written['vocab'] = vocab_path
    logger.info(f"Wrote {sizes[0]}/{sizes[1]}/{sizes[2]} train/val/test records to {out_dir}")
    return written


def load_dataset(path: Path) -> List[CaptionRecord]:
    """Parse a dataset file; errors carry the 1-based line number"""
    path = Path(path)
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                parsed = _RecordLine.model_validate(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=number, path=str(path)) from None
            except ValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(p) for p in first['loc'])
                raise DatasetFormatError(f"{where}: {first['msg']}", line=number, path=str(path)) from None
            try:
                records.append(CaptionRecord(
                    id=parsed.id,
                    image_features=np.array(parsed.image_features, dtype=np.float64),
                    motion_features=np.array(parsed.motion_features, dtype=np.float64),
                    captions=parsed.captions,
                    spec=parsed.spec,
                ))
            except AlignmentError as e:
                raise AlignmentError(f"{path}:{number}: {e}") from None
            except DimensionError as e:
                raise DatasetFormatError(str(e), line=number, path=str(path)) from None
    return records


def load_split(data_dir: Path, split: str) -> List[CaptionRecord]:
    return load_dataset(Path(data_dir) / Constants.SPLIT_FILES[split])
