"""
Teacher-forced training: cross-entropy loss, the single-drop learning-rate
schedule, the epoch loop with per-sample worker threads, and toy metrics
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from nltk.translate.bleu_score import corpus_bleu

from config.app_config import TrainConfig
from config.constants import Constants
from utils.enums import PatienceMetric
from utils.platform_utils import worker_threads
from . import numkit as nk
from .checkpoint import save_checkpoint
from .exceptions import ContractError, DimensionError, TrainingError
from .model import SBATModel, TokenSequence
from .numkit import Tape, Tensor
from .synthdata import CaptionRecord


BLEU_WEIGHTS = (0.25, 0.25, 0.25, 0.25)


def targets_of(caption: TokenSequence) -> TokenSequence:
    """Gold tokens predicted at positions 1..T_e (the caption without its BOS)"""
    return list(caption[1:])


def xent_loss(dists: Tensor, gold: TokenSequence) -> Tensor:
    """Sum over non-PAD steps of -log p(gold token); probabilities are clamped at 1e-12"""
    gold = np.asarray(gold, dtype=np.int64)
    if dists.data.ndim != 2 or gold.ndim != 1 or gold.size != dists.shape[0]:
        raise DimensionError("xent_loss", dists.shape, gold.shape, detail="one gold token per row")
    rows = np.flatnonzero(gold != Constants.PAD_ID)
    picked = nk.take(dists, rows, gold[rows])
    return nk.scale(nk.sum_all(nk.log(picked, Constants.PROB_FLOOR)), -1.0)


class PatienceSchedule:
    """Learning rate that drops once, after `patience` epochs without improvement"""

    def __init__(self, lr_initial: float, lr_drop: float, patience: int, higher_is_better: bool = True):
        if patience < 1:
            raise ContractError(f"patience must be >= 1, got {patience}")
        self.lr = lr_initial
        self.lr_drop = lr_drop
        self.patience = patience
        self.higher_is_better = higher_is_better
        self.best: Optional[float] = None
        self.stagnant = 0
        self.drop_epoch: Optional[int] = None
        self.epochs_seen = 0

    @property
    def dropped(self) -> bool:
        return self.drop_epoch is not None

    def improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        return metric > self.best if self.higher_is_better else metric < self.best

    def step(self, metric: float) -> bool:
        """Record one epoch's validation metric; returns whether it improved on the best so far"""
        self.epochs_seen += 1
        better = self.improved(metric)
        if better:
            self.best = metric
            self.stagnant = 0
        else:
            self.stagnant += 1
        if not self.dropped and self.stagnant >= self.patience:
            logger.info(f"No improvement for {self.stagnant} epochs, dropping lr {self.lr:g} -> {self.lr_drop:g}")
            self.lr = self.lr_drop
            self.drop_epoch = self.epochs_seen
        return better


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class SplitScores:
    loss: float
    token_accuracy: float
    positions: int


def _samples(records: Sequence[CaptionRecord]) -> List[Tuple[CaptionRecord, int]]:
    return [(record, index) for record in records for index in range(len(record.captions))]


def evaluate(model: SBATModel, dataset: Sequence[CaptionRecord]) -> SplitScores:
    """Mean per-caption loss and teacher-forced token accuracy"""
    total_loss = 0.0
    correct = 0
    positions = 0
    samples = _samples(dataset)
    for record, index in samples:
        gold = targets_of(record.captions[index])
        dists = model.forward_teacher_forced(record, index)
        total_loss += float(xent_loss(dists, gold).item())
        gold = np.asarray(gold)
        live = gold != Constants.PAD_ID
        predicted = dists.data.argmax(axis=-1)
        correct += int(np.sum(predicted[live] == gold[live]))
        positions += int(live.sum())
    if positions == 0:
        logger.warning("No gold positions to score; token accuracy defined as 0")
    return SplitScores(
        loss=total_loss / len(samples) if samples else 0.0,
        token_accuracy=correct / positions if positions else 0.0,
        positions=positions,
    )


def token_accuracy(model: SBATModel, dataset: Sequence[CaptionRecord]) -> float:
    """Fraction of non-PAD gold positions whose argmax prediction matches (teacher-forced)"""
    return evaluate(model, dataset).token_accuracy


def bleu4(hypotheses: Sequence[Sequence], references: Sequence[Sequence[Sequence]]) -> float:
    """Corpus BLEU-4 with uniform weights, brevity penalty and no smoothing

    Args:
        hypotheses: one token sequence per record
        references: one list of reference token sequences per record
    """
    if not hypotheses:
        raise ContractError("bleu4: empty corpus")
    if len(hypotheses) != len(references):
        raise ContractError(f"bleu4: {len(hypotheses)} hypotheses but {len(references)} reference sets")
    hyps = [[str(t) for t in h] for h in hypotheses]
    refs = [[[str(t) for t in r] for r in ref_set] for ref_set in references]
    return float(corpus_bleu(refs, hyps, weights=BLEU_WEIGHTS))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_token_accuracy: float
    lr: float

    def to_json(self) -> str:
        return json.dumps({
            'epoch': self.epoch,
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'val_token_accuracy': self.val_token_accuracy,
            'lr': self.lr,
        })


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    checkpoint: Optional[Path] = None
    log_path: Optional[Path] = None

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.history[-1] if self.history else None


def sample_gradients(model: SBATModel, record: CaptionRecord, caption_index: int = 0,
                     rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and gradient buffer of one caption on a private tape; rng enables dropout"""
    tape = Tape()
    dists = model.forward_teacher_forced(record, caption_index, tape, rng=rng)
    loss = xent_loss(dists, targets_of(record.captions[caption_index]))
    value = float(loss.item())
    return value, nk.collect_gradients(loss)


class Trainer:
    """Runs epochs of shuffled minibatches and keeps the best validation checkpoint"""

    def __init__(self, model: SBATModel, cfg: TrainConfig, out_dir: Optional[Path] = None,
                 threads: Optional[int] = None):
        self.model = model
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.threads = worker_threads(threads)
        self.schedule = PatienceSchedule(
            cfg.lr_initial, cfg.lr_drop, cfg.patience_epochs,
            higher_is_better=cfg.metric_for_patience == PatienceMetric.TOKEN_ACCURACY,
        )

    def epoch_order(self, epoch: int, size: int) -> np.ndarray:
        """Shuffle order, a pure function of (seed, epoch)"""
        return np.random.default_rng([self.cfg.seed, epoch]).permutation(size)

    def dropout_rngs(self, epoch: int, positions: Sequence[int]) -> List[Optional[np.random.Generator]]:
        """One dropout stream per sample, a pure function of (seed, epoch, sample position)"""
        if self.model.cfg.dropout == 0.0:
            return [None] * len(positions)
        return [np.random.default_rng([self.cfg.seed, epoch, int(position)]) for position in positions]

    def _batch_step(self, batch: List[Tuple[CaptionRecord, int]], pool: Optional[ThreadPoolExecutor],
                    rngs: Optional[Sequence[Optional[np.random.Generator]]] = None) -> List[float]:
        jobs = [(record, index, rng) for (record, index), rng in zip(batch, rngs or [None] * len(batch))]
        if pool is None:
            results = [sample_gradients(self.model, *job) for job in jobs]
        else:
            results = list(pool.map(lambda job: sample_gradients(self.model, *job), jobs))

        losses = [loss for loss, _ in results]
        for loss, (record, _) in zip(losses, batch):
            if not math.isfinite(loss):
                raise TrainingError(f"Non-finite loss {loss} on record {record.id}")

        # Reduce in batch order so that thread scheduling never changes the sum
        scale = 1.0 / len(batch)
        for param in self.model.parameters():
            total = np.zeros_like(param.value.data)
            for _, grads in results:
                grad = grads.get(param.name)
                if grad is not None:
                    total += grad
            param.value.grad = total * param.value.dtype.type(scale)

        norm = nk.clip_grad_norm(self.model.parameters(), self.cfg.grad_clip)
        nk.adam_step(self.model.parameters(), self.schedule.lr)
        logger.debug(f"batch of {len(batch)}: mean loss {sum(losses) / len(batch):.6f}, grad norm {norm:.4f}")
        return losses

    def _patience_value(self, scores: SplitScores) -> float:
        if self.cfg.metric_for_patience == PatienceMetric.TOKEN_ACCURACY:
            return scores.token_accuracy
        return scores.loss

    def train(self, train_set: Sequence[CaptionRecord], val_set: Sequence[CaptionRecord]) -> TrainResult:
        """Train for max_epochs, writing the epoch log and best checkpoint under out_dir"""
        if not train_set:
            raise TrainingError("Training split is empty")
        if not val_set:
            raise TrainingError("Validation split is empty")

        samples = _samples(train_set)
        result = TrainResult()
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            result.log_path = self.out_dir / Constants.TRAIN_LOG_FILE
            log_file = open(result.log_path, 'w', encoding='utf-8', newline='\n')

        pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        logger.info(f"Training {len(samples)} captions for {self.cfg.max_epochs} epochs "
                    f"(batch {self.cfg.batch_size}, {self.threads} worker threads)")
        try:
            for epoch in range(1, self.cfg.max_epochs + 1):
                lr = self.schedule.lr
                order = self.epoch_order(epoch, len(samples))
                losses: List[float] = []
                for start in range(0, len(order), self.cfg.batch_size):
                    positions = order[start:start + self.cfg.batch_size]
                    batch = [samples[i] for i in positions]
                    losses.extend(self._batch_step(batch, pool, self.dropout_rngs(epoch, positions)))

                scores = evaluate(self.model, val_set)
                if not math.isfinite(scores.loss):
                    raise TrainingError(f"Non-finite validation loss at epoch {epoch}")
                record = EpochRecord(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)),
                    val_loss=scores.loss,
                    val_token_accuracy=scores.token_accuracy,
                    lr=lr,
                )
                result.history.append(record)
                if log_file is not None:
                    log_file.write(record.to_json() + '\n')
                    log_file.flush()

                if self.schedule.step(self._patience_value(scores)):
                    result.best_epoch = epoch
                    if self.out_dir is not None:
                        result.checkpoint = save_checkpoint(self.model, self.out_dir)
                logger.info(f"epoch {epoch}: train_loss={record.train_loss:.4f} val_loss={record.val_loss:.4f} "
                            f"val_acc={record.val_token_accuracy:.4f} lr={lr:g}")
        finally:
            if pool is not None:
                pool.shutdown()
            if log_file is not None:
                log_file.close()

        logger.success(f"Training finished; best epoch {result.best_epoch}")
        return result


def train(model: SBATModel, train_set: Sequence[CaptionRecord], val_set: Sequence[CaptionRecord],
          cfg: TrainConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None) -> TrainResult:
    """Convenience wrapper around Trainer"""
    return Trainer(model, cfg, out_dir, threads).train(train_set, val_set)
