"""
Attention-redistribution analysis: scenario weights before and after pooling,
randomized inequality checks, boundary recovery and training sweeps
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from config.app_config import ModelConfig, TrainConfig
from utils.enums import Variant
from .attention import boundary_gradient
from .exceptions import ContractError
from .inference import beam_search
from .model import SBATModel
from .synthdata import CaptionRecord
from .training import Trainer, bleu4, evaluate, targets_of


TIE_TOLERANCE = 1e-12
LOGIT_RANGE = (-5.0, 5.0)
POOLED_BUDGETS = range(2, 13)
MAX_WITNESSES = 20


class TwoScenarioConfig(BaseModel):
    """Two scenarios with per-step logits p_s1, p_s2 over T1 and T2 steps"""

    model_config = ConfigDict(frozen=True)

    T1: int = Field(..., ge=1)
    T2: int = Field(..., ge=1)
    p_s1: float
    p_s2: float
    n: int = Field(default=2, ge=2)


def softmax_weights(logits: Sequence[float]) -> List[float]:
    """Normalised exponentials"""
    values = [float(v) for v in logits]
    if not values:
        return []
    peak = max(values)
    exps = [math.exp(v - peak) for v in values]
    total = math.fsum(exps)
    return [e / total for e in exps]


def multi_scenario_weights(counts: Sequence[int], logits: Sequence[float]) -> List[float]:
    """Total weight of each scenario: count * exp(logit), normalised"""
    if len(counts) != len(logits) or not counts:
        raise ContractError("one count per scenario logit is required")
    if any(c < 1 for c in counts):
        raise ContractError(f"scenario counts must be >= 1, got {list(counts)}")
    return softmax_weights([math.log(c) + p for c, p in zip(counts, logits)])


def grouped_weights(counts: Sequence[int], logits: Sequence[float], group: Sequence[int]) -> Tuple[float, float]:
    """Summed weight of the scenarios in `group` and of all the others"""
    weights = multi_scenario_weights(counts, logits)
    members = set(group)
    if not members or not members < set(range(len(counts))):
        raise ContractError("group must be a non-empty proper subset of scenario indices")
    inside = math.fsum(w for i, w in enumerate(weights) if i in members)
    outside = math.fsum(w for i, w in enumerate(weights) if i not in members)
    return inside, outside


def scenario_weights(cfg: TwoScenarioConfig) -> Tuple[float, float]:
    """(A_s1, A_s2) before pooling"""
    first, second = multi_scenario_weights([cfg.T1, cfg.T2], [cfg.p_s1, cfg.p_s2])
    return first, second


def pooled_weights(cfg: TwoScenarioConfig, kept_1: int, kept_2: int) -> Tuple[float, float]:
    """(A'_s1, A'_s2) after pooling keeps kept_1 and kept_2 representatives of the scenarios"""
    if kept_1 < 1 or kept_2 < 1:
        raise ContractError(f"each scenario keeps at least one step, got {kept_1}/{kept_2}")
    if kept_1 + kept_2 != cfg.n:
        raise ContractError(f"kept counts {kept_1}+{kept_2} must add up to n={cfg.n}")
    if kept_1 > cfg.T1 or kept_2 > cfg.T2:
        raise ContractError(f"cannot keep {kept_1}/{kept_2} steps of scenarios with {cfg.T1}/{cfg.T2} steps")
    first, second = multi_scenario_weights([kept_1, kept_2], [cfg.p_s1, cfg.p_s2])
    return first, second


# ---------------------------------------------------------------------------
# Inequality verification
# ---------------------------------------------------------------------------


@dataclass
class CheckTally:
    """Outcome counts of one family of sampled comparisons"""

    name: str
    passed: int = 0
    failed: int = 0
    ties: int = 0
    witnesses: List[Dict] = field(default_factory=list)

    def fail(self, witness: Dict):
        self.failed += 1
        if len(self.witnesses) < MAX_WITNESSES:
            self.witnesses.append(witness)

    def as_row(self) -> Dict:
        return {
            'check': self.name,
            'passed': self.passed,
            'failed': self.failed,
            'ties': self.ties,
            'witnesses': self.witnesses,
        }


@dataclass
class InequalityReport:
    samples: int
    seed: int
    checks: List[CheckTally] = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(check.failed for check in self.checks)

    @property
    def ok(self) -> bool:
        return self.failures == 0

    def check(self, name: str) -> CheckTally:
        for tally in self.checks:
            if tally.name == name:
                return tally
        raise KeyError(name)

    def rows(self) -> List[Dict]:
        return [check.as_row() for check in self.checks]

    def write(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for row in self.rows():
                f.write(json.dumps(row) + '\n')


def _distinct_logits(rng: np.random.Generator) -> Tuple[float, float]:
    """Two logits in LOGIT_RANGE, returned low then high"""
    while True:
        low, high = sorted(rng.uniform(*LOGIT_RANGE, size=2).tolist())
        if low < high:
            return low, high


def verify_inequalities(samples: int, seed: int = 0) -> InequalityReport:
    """Check the pooling claims on seeded random two-scenario configurations

    symmetric_pooling: with p_s1 < p_s2 and T1 > T2, keeping one step per scenario
    raises the minority share (A'_s2 > A_s2) and lowers the majority share.
    budget_pooling: with T1 = 3 T2 and p_s1 > p_s2, keeping n-1 steps of scenario one
    raises its share iff n-1 > 3; n-1 = 3 must be an exact tie.
    """
    if samples < 1:
        raise ContractError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    report = InequalityReport(samples=samples, seed=seed)
    symmetric = CheckTally("symmetric_pooling")
    budget = CheckTally("budget_pooling")
    report.checks = [symmetric, budget]

    for _ in range(samples):
        T2 = int(rng.integers(1, 51))
        T1 = T2 + int(rng.integers(1, 51))
        p_s1, p_s2 = _distinct_logits(rng)
        cfg = TwoScenarioConfig(T1=T1, T2=T2, p_s1=p_s1, p_s2=p_s2, n=2)
        before = scenario_weights(cfg)
        after = pooled_weights(cfg, 1, 1)
        if after[1] > before[1] and after[0] < before[0]:
            symmetric.passed += 1
        else:
            symmetric.fail({**cfg.model_dump(), 'A': before, 'A_pooled': after})

        T2 = int(rng.integers(1, 51))
        p_s2, p_s1 = _distinct_logits(rng)
        for n in POOLED_BUDGETS:
            cfg = TwoScenarioConfig(T1=3 * T2, T2=T2, p_s1=p_s1, p_s2=p_s2, n=n)
            if n - 1 > cfg.T1:
                continue
            a_s1 = scenario_weights(cfg)[0]
            pooled_s1 = pooled_weights(cfg, n - 1, 1)[0]
            gap = pooled_s1 - a_s1
            if n - 1 == 3:
                if abs(gap) <= TIE_TOLERANCE:
                    budget.ties += 1
                else:
                    budget.fail({**cfg.model_dump(), 'A_s1': a_s1, 'A_pooled_s1': pooled_s1, 'expected': 'tie'})
            elif (gap > TIE_TOLERANCE) == (n - 1 > 3) and abs(gap) > TIE_TOLERANCE:
                budget.passed += 1
            else:
                expected = 'increase' if n - 1 > 3 else 'decrease'
                budget.fail({**cfg.model_dump(), 'A_s1': a_s1, 'A_pooled_s1': pooled_s1, 'expected': expected})

    level = logger.success if report.ok else logger.error
    level(f"Inequality check over {samples} samples: {report.failures} failures "
          f"({budget.ties} ties at n-1=3)")
    return report


# ---------------------------------------------------------------------------
# Boundary recovery from raw features
# ---------------------------------------------------------------------------


def feature_logits(features: np.ndarray) -> np.ndarray:
    """X X^T / sqrt(d_feat)"""
    features = np.asarray(features, dtype=np.float64)
    return features @ features.T / math.sqrt(features.shape[1])


def recover_boundaries(features: np.ndarray, k: int) -> List[int]:
    """Guess the k-1 scene changes as the columns with the most derivative mass

    This is a clip-level detector, not the attention layer's selection: the
    derivative of the feature logits is summed over rows and one top-(k-1) pick is
    made over columns 1..T-1. Column 0 always starts a segment and is never returned.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    derivative = boundary_gradient(feature_logits(features))
    column_scores = derivative.sum(axis=0)[1:]
    order = np.argsort(-column_scores, kind="stable")[:k - 1]
    return sorted(int(j) + 1 for j in order)


def boundary_recall(predicted: Sequence[int], truth: Sequence[int], tolerance: int = 1) -> float:
    """Fraction of true boundaries with a prediction within +-tolerance steps"""
    if not truth:
        return 1.0
    hits = sum(1 for b in truth if any(abs(b - p) <= tolerance for p in predicted))
    return hits / len(truth)


# ---------------------------------------------------------------------------
# Training sweeps
# ---------------------------------------------------------------------------


def _validated_copy(cfg: ModelConfig, **updates) -> ModelConfig:
    return ModelConfig(**{**cfg.model_dump(), **updates})


def sweep_alpha(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Sequence[CaptionRecord],
                val_set: Sequence[CaptionRecord], alphas: Sequence[float],
                out_path: Optional[Path] = None, threads: Optional[int] = None) -> List[Dict]:
    """Train one model per encoder alpha (same seed) and tabulate the final validation metrics"""
    if not alphas:
        raise ContractError("sweep_alpha needs at least one alpha")
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {alpha}")

    rows = []
    for alpha in alphas:
        cfg = _validated_copy(model_cfg, alpha_enc=float(alpha))
        logger.info(f"Sweep: training with alpha_enc={alpha}")
        model = SBATModel(cfg, seed=train_cfg.seed)
        result = Trainer(model, train_cfg, threads=threads).train(train_set, val_set)
        rows.append({
            'alpha_enc': float(alpha),
            'seed': train_cfg.seed,
            'val_loss': result.final.val_loss,
            'val_token_accuracy': result.final.val_token_accuracy,
        })
    if out_path is not None:
        write_rows(out_path, rows)
    return rows


def corpus_bleu4(model: SBATModel, dataset: Sequence[CaptionRecord], beam_width: int = 5,
                 max_len: Optional[int] = None) -> float:
    """BLEU-4 of beam-searched captions against every gold caption"""
    max_len = max_len or model.cfg.max_tgt_len - 1
    hypotheses = [targets_of(beam_search(model, record, beam_width, max_len)) for record in dataset]
    references = [[targets_of(c) for c in record.captions] for record in dataset]
    return bleu4(hypotheses, references)


def ablation_table(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Sequence[CaptionRecord],
                   val_set: Sequence[CaptionRecord], variants: Sequence[Variant] = tuple(Variant),
                   beam_width: int = 5, out_path: Optional[Path] = None,
                   threads: Optional[int] = None) -> List[Dict]:
    """Train each variant under the same budget and seed; one row of final metrics per variant"""
    rows = []
    for variant in variants:
        variant = Variant(variant)
        cfg = _validated_copy(model_cfg, variant=variant)
        logger.info(f"Ablation: training variant {variant.value}")
        model = SBATModel(cfg, seed=train_cfg.seed)
        Trainer(model, train_cfg, threads=threads).train(train_set, val_set)
        scores = evaluate(model, val_set)
        rows.append({
            'variant': variant.value,
            'val_loss': scores.loss,
            'val_token_accuracy': scores.token_accuracy,
            'bleu4': corpus_bleu4(model, val_set, beam_width),
        })
    if out_path is not None:
        write_rows(out_path, rows)
    return rows


def write_rows(path: Path, rows: Sequence[Dict]):
    """Line-delimited JSON table"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for row in rows:
            f.write(json.dumps(row) + '\n')
    logger.info(f"Wrote {len(rows)} rows to {path}")
