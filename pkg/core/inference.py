"""
Caption generation (greedy and beam search) and attention heatmap export
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Protocol, Sequence

import numpy as np
from loguru import logger

from config.constants import Constants
from .attention import SiteTrace
from .exceptions import ContractError
from .model import SBATModel, TokenSequence
from .synthdata import CaptionRecord


DEFAULT_BEAM_WIDTH = 5


class StepModel(Protocol):
    """What decoding needs from a model: encode once, then next-token log probabilities"""

    def encode_record(self, record: CaptionRecord) -> Any:
        ...

    def step_log_probs(self, enc: Any, prefix: Sequence[int]) -> np.ndarray:
        ...


@dataclass(frozen=True)
class Beam:
    """Partial caption; log_prob sums the per-step log probabilities after BOS"""

    tokens: tuple
    log_prob: float = 0.0
    finished: bool = False

    def extend(self, token: int, step_log_prob: float) -> "Beam":
        if self.finished:
            raise ContractError("finished beams are never extended")
        return Beam(self.tokens + (int(token),), self.log_prob + float(step_log_prob), token == Constants.EOS_ID)

    def rank_key(self):
        """Highest log_prob first, then the lexicographically smaller token sequence"""
        return -self.log_prob, self.tokens


def _length_limit(model: StepModel, max_len: int) -> int:
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        # the decoded prefix (BOS plus generated tokens) must fit max_tgt_len
        return min(max_len, cfg.max_tgt_len - 1)
    return max_len


def greedy_decode(model: StepModel, record: CaptionRecord, max_len: int) -> TokenSequence:
    """Argmax token at every step (ties to the smaller id) until EOS or max_len generated tokens"""
    max_len = _length_limit(model, max_len)
    enc = model.encode_record(record)
    tokens = [Constants.BOS_ID]
    for _ in range(max_len):
        token = int(np.argmax(model.step_log_probs(enc, tokens)))
        tokens.append(token)
        if token == Constants.EOS_ID:
            break
    return tokens


def beam_search(model: StepModel, record: CaptionRecord, width: int = DEFAULT_BEAM_WIDTH,
                max_len: int = 16) -> TokenSequence:
    """Length-wise beam search without length normalisation

    Finished beams stay in the pool and compete with extensions of live beams.
    Returns the best finished beam, or the best unfinished one when none finished.
    """
    if width < 1:
        raise ContractError(f"beam width must be >= 1, got {width}")
    max_len = _length_limit(model, max_len)
    enc = model.encode_record(record)

    beams = [Beam((Constants.BOS_ID,))]
    for _ in range(max_len):
        if all(beam.finished for beam in beams):
            break
        candidates = [beam for beam in beams if beam.finished]
        for beam in beams:
            if beam.finished:
                continue
            log_probs = model.step_log_probs(enc, list(beam.tokens))
            candidates.extend(beam.extend(token, lp) for token, lp in enumerate(log_probs))
        beams = sorted(candidates, key=Beam.rank_key)[:width]

    finished = [beam for beam in beams if beam.finished]
    best = min(finished or beams, key=Beam.rank_key)
    return list(best.tokens)


def sequence_log_prob(model: StepModel, record: CaptionRecord, tokens: Sequence[int]) -> float:
    """Sum of per-step log probabilities of tokens after the leading BOS"""
    enc = model.encode_record(record)
    total = 0.0
    for position in range(1, len(tokens)):
        total += float(model.step_log_probs(enc, list(tokens[:position]))[tokens[position]])
    return total


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------


def to_pgm(weights: np.ndarray) -> str:
    """Plain graymap, each row scaled linearly from 0 to its own maximum"""
    weights = np.asarray(weights, dtype=np.float64)
    rows, cols = weights.shape
    peaks = weights.max(axis=1, keepdims=True)
    safe = np.where(peaks > 0, peaks, 1.0)
    pixels = np.floor(255.0 * np.clip(weights, 0.0, None) / safe + 0.5).astype(np.int64)
    lines = ["P2", f"{cols} {rows}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in pixels)
    return "\n".join(lines) + "\n"


def encoder_self_traces(model: SBATModel, record: CaptionRecord, modality: str = "image") -> List[SiteTrace]:
    """Per-block self-attention traces of one encoder stream"""
    trace: List[SiteTrace] = []
    model.encode(record.image_features, record.motion_features, trace=trace)
    suffix = f".{modality}.self"
    return [site for site in trace if site.name.endswith(suffix)]


def export_attention(model: SBATModel, record: CaptionRecord, out_dir: Path,
                     include_local: bool = True, modality: str = "image") -> List[Path]:
    """Write heatmap, weight dump, admitted mask and selected-column mask for every encoder block and head

    The mask file holds every admitted key (selection plus local band); the selected
    file holds the top-n columns alone, or every key under vanilla attention.
    With include_local=False, weights admitted only by the local band are blanked.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for block, site in enumerate(encoder_self_traces(model, record, modality)):
        for head, head_trace in enumerate(site.heads):
            weights = head_trace.weights
            mask = head_trace.mask
            selected = head_trace.selected if head_trace.selected is not None else head_trace.mask
            if not include_local:
                weights = np.where(selected, weights, 0.0)
                mask = selected
            stem = f"block{block}_head{head}"
            pgm_path = out_dir / f"{stem}.pgm"
            pgm_path.write_text(to_pgm(weights), encoding='ascii')
            weights_path = out_dir / f"{stem}_weights.txt"
            np.savetxt(weights_path, weights, fmt="%.17g")
            mask_path = out_dir / f"{stem}_mask.txt"
            np.savetxt(mask_path, mask.astype(np.int64), fmt="%d")
            selected_path = out_dir / f"{stem}_selected.txt"
            np.savetxt(selected_path, selected.astype(np.int64), fmt="%d")
            written.extend([pgm_path, weights_path, mask_path, selected_path])
    logger.info(f"Exported {len(written) // 4} attention maps of record {record.id} to {out_dir}")
    return written


def find_record(records: Sequence[CaptionRecord], record_id: Optional[str]) -> CaptionRecord:
    """Record by id, or the first record when no id is given"""
    if not records:
        raise ContractError("dataset is empty")
    if record_id is None:
        return records[0]
    for record in records:
        if record.id == record_id:
            return record
    raise ContractError(f"record '{record_id}' not found")
