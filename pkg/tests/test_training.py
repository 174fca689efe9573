"""
Loss, learning-rate schedule, metrics and the training loop
"""

import json
import math

import numpy as np
import pytest

from config.app_config import TrainConfig
from config.constants import Constants
from core import numkit as nk
from core import training
from core.exceptions import ContractError, DimensionError, TrainingError
from core.model import SBATModel
from core.numkit import Tape, Tensor
from core.synthdata import gen_scenario_sequence
from core.training import (
    PatienceSchedule, SplitScores, Trainer, bleu4, evaluate, sample_gradients, targets_of, token_accuracy,
    xent_loss,
)
from tests.helpers import central_difference, small_config
from utils.enums import PatienceMetric


def _records(count, seed=0, T=8):
    return [gen_scenario_sequence(T=T, k=2 + i % 2, d_feat=8, seed=seed + i, num_scenes=5, record_id=f"r{i}")
            for i in range(count)]


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        dists = Tensor(np.eye(4)[[3, 0, 1]])
        assert xent_loss(dists, [3, 0, 1]).item() == 0.0

    def test_uniform_prediction(self):
        dists = Tensor(np.full((4, 4), 0.25))
        gold = [3, 1, 0, Constants.PAD_ID]
        assert xent_loss(dists, gold).item() == pytest.approx(3 * math.log(4))

    def test_gradient_with_respect_to_logits(self, rng):
        logits = rng.normal(size=(3, 5))
        gold = [4, Constants.PAD_ID, 0]
        tape = Tape()
        leaf = tape.variable(logits)
        nk.collect_gradients(xent_loss(nk.softmax(leaf), gold))

        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = probs - np.eye(5)[gold]
        expected[1] = 0.0
        np.testing.assert_allclose(leaf.grad, expected, atol=1e-10)

        def value():
            return xent_loss(nk.softmax(Tensor(logits)), gold).item()
        numeric = central_difference(value, logits, (2, 3))
        assert leaf.grad[2, 3] == pytest.approx(numeric, rel=1e-5)

    def test_row_count_mismatch(self):
        with pytest.raises(DimensionError):
            xent_loss(Tensor(np.full((2, 3), 1 / 3)), [0, 1, 2])

    def test_targets_drop_bos(self):
        assert targets_of([0, 5, 4, 1]) == [5, 4, 1]


class TestPatienceSchedule:
    def test_frozen_metric_drops_once_after_patience(self):
        schedule = PatienceSchedule(1e-4, 2e-5, patience=10)
        lrs = []
        for _ in range(30):
            lrs.append(schedule.lr)
            schedule.step(0.5)
        assert lrs[:11] == [1e-4] * 11
        assert lrs[11:] == [2e-5] * 19
        assert schedule.drop_epoch == 11

    def test_improvement_resets_counter(self):
        schedule = PatienceSchedule(1.0, 0.1, patience=3)
        for metric in (0.1, 0.1, 0.1, 0.2, 0.2, 0.2):
            schedule.step(metric)
        assert not schedule.dropped
        schedule.step(0.2)
        assert schedule.dropped and schedule.lr == 0.1

    def test_loss_metric_is_lower_is_better(self):
        schedule = PatienceSchedule(1.0, 0.1, patience=2, higher_is_better=False)
        assert schedule.step(3.0)
        assert schedule.step(2.5)
        assert not schedule.step(2.7)

    def test_invalid_patience(self):
        with pytest.raises(ContractError):
            PatienceSchedule(1.0, 0.1, patience=0)


class TestBleu:
    def test_identical_corpus(self):
        refs = [[3, 4, 5, 6, 7], [4, 4, 5, 6]]
        assert bleu4(refs, [[r] for r in refs]) == pytest.approx(1.0)

    def test_no_four_gram_overlap(self):
        assert bleu4([["a", "b", "c", "d"]], [[["d", "c", "b", "a"]]]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_corpus(self):
        hyps = [["a", "b", "c", "d", "e"], ["a", "b", "c", "d", "f"], ["x", "y", "z", "w", "v"]]
        refs = [[["a", "b", "c", "d", "e"]], [["a", "b", "c", "d", "e"]], [["x", "y", "z", "w"]]]
        expected = (13 / 15 * 10 / 12 * 7 / 9 * 4 / 6) ** 0.25
        assert bleu4(hyps, refs) == pytest.approx(expected, rel=1e-12)

    def test_brevity_penalty(self):
        hyps = [["a", "b", "c", "d", "e"]]
        refs = [[["a", "b", "c", "d", "e", "f", "g"]]]
        assert bleu4(hyps, refs) == pytest.approx(math.exp(1 - 7 / 5), rel=1e-12)

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            bleu4([], [])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            bleu4([[1, 2, 3, 4]], [])


class TestEvaluate:
    def test_empty_dataset_scores_zero(self):
        scores = evaluate(SBATModel(small_config()), [])
        assert scores == SplitScores(loss=0.0, token_accuracy=0.0, positions=0)

    def test_accuracy_counts_every_target(self):
        records = _records(3)
        scores = evaluate(SBATModel(small_config()), records)
        assert scores.positions == sum(len(r.captions[0]) - 1 for r in records)
        assert 0.0 <= scores.token_accuracy <= 1.0
        assert token_accuracy(SBATModel(small_config()), records) == scores.token_accuracy

    def test_sample_gradients_leave_parameters_alone(self):
        model = SBATModel(small_config())
        loss, grads = sample_gradients(model, _records(1)[0])
        assert loss > 0
        assert set(grads) == set(model.params)
        assert all(p.grad is None for p in model.parameters())


class TestTrainer:
    def _cfg(self, **overrides):
        fields = dict(max_epochs=2, batch_size=2, lr_initial=1e-3, lr_drop=1e-4, seed=4)
        fields.update(overrides)
        return TrainConfig(**fields)

    def test_epoch_order_is_pure(self):
        trainer = Trainer(SBATModel(small_config()), self._cfg(), threads=1)
        np.testing.assert_array_equal(trainer.epoch_order(3, 10), trainer.epoch_order(3, 10))
        assert sorted(trainer.epoch_order(3, 10)) == list(range(10))
        assert not np.array_equal(trainer.epoch_order(3, 10), trainer.epoch_order(4, 10))

    @pytest.mark.parametrize("lr", [1e-3, 1e-4])
    def test_loss_decreases_on_fixed_batch(self, lr):
        model = SBATModel(small_config(), seed=2)
        trainer = Trainer(model, self._cfg(lr_initial=lr, lr_drop=lr / 10), threads=1)
        batch = [(record, 0) for record in _records(4)]
        losses = [sum(trainer._batch_step(batch, None)) for _ in range(6)]
        assert all(later < earlier for earlier, later in zip(losses, losses[1:]))

    def test_writes_log_and_best_checkpoint(self, tmp_path):
        records = _records(6)
        result = Trainer(SBATModel(small_config()), self._cfg(max_epochs=3), tmp_path, threads=1).train(
            records[:4], records[4:])
        lines = [json.loads(line) for line in (tmp_path / Constants.TRAIN_LOG_FILE).read_text().splitlines()]
        assert [line["epoch"] for line in lines] == [1, 2, 3]
        assert set(lines[0]) == {"epoch", "train_loss", "val_loss", "val_token_accuracy", "lr"}
        assert result.best_epoch is not None
        assert result.checkpoint == tmp_path / "best.manifest" and result.checkpoint.exists()
        assert result.final.epoch == 3

    def test_module_level_train(self, tmp_path):
        records = _records(4)
        result = training.train(SBATModel(small_config()), records[:3], records[3:], self._cfg(), tmp_path, 1)
        assert len(result.history) == 2
        assert result.log_path == tmp_path / Constants.TRAIN_LOG_FILE

    def test_thread_count_does_not_change_results(self, tmp_path):
        records = _records(8)
        runs = []
        for threads in (1, 3):
            out = tmp_path / f"threads{threads}"
            Trainer(SBATModel(small_config(), seed=1), self._cfg(batch_size=3), out, threads=threads).train(
                records[:6], records[6:])
            runs.append(out)
        for name in (Constants.TRAIN_LOG_FILE, "best.manifest", "best.bin"):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()

    def test_dropout_streams_are_per_sample(self):
        trainer = Trainer(SBATModel(small_config(dropout=0.2)), self._cfg(), threads=1)
        first = [rng.random() for rng in trainer.dropout_rngs(2, [0, 1, 5])]
        again = [rng.random() for rng in trainer.dropout_rngs(2, [0, 1, 5])]
        assert first == again and len(set(first)) == 3
        assert [rng.random() for rng in trainer.dropout_rngs(3, [0, 1, 5])] != first
        assert Trainer(SBATModel(small_config()), self._cfg(), threads=1).dropout_rngs(2, [0, 1]) == [None, None]

    def test_dropout_run_is_thread_count_independent(self, tmp_path):
        records = _records(8)
        runs = []
        for threads in (1, 3):
            out = tmp_path / f"threads{threads}"
            result = Trainer(SBATModel(small_config(dropout=0.2), seed=1), self._cfg(batch_size=3), out,
                             threads=threads).train(records[:6], records[6:])
            runs.append((out, [e.train_loss for e in result.history]))
        assert runs[0][1] == runs[1][1]
        assert (runs[0][0] / "best.bin").read_bytes() == (runs[1][0] / "best.bin").read_bytes()

    def test_frozen_metric_drops_lr_once(self, monkeypatch):
        monkeypatch.setattr(training, "evaluate", lambda model, dataset: SplitScores(1.0, 0.5, 3))
        records = _records(2)
        cfg = self._cfg(max_epochs=14, batch_size=2, patience_epochs=10,
                        metric_for_patience=PatienceMetric.TOKEN_ACCURACY)
        result = Trainer(SBATModel(small_config()), cfg, threads=1).train(records[:1], records[1:])
        assert [e.lr for e in result.history] == [1e-3] * 11 + [1e-4] * 3
        assert result.best_epoch == 1

    def test_memorises_single_record(self):
        record = gen_scenario_sequence(T=8, k=2, d_feat=8, seed=0, num_scenes=2)
        cfg = small_config(vocab_size=5)
        train_cfg = TrainConfig(max_epochs=300, batch_size=1, lr_initial=1e-2, lr_drop=5e-3,
                                patience_epochs=1000, seed=0)
        result = Trainer(SBATModel(cfg), train_cfg, threads=1).train([record], [record])
        assert result.final.val_loss < 0.01

    def test_empty_splits(self):
        trainer = Trainer(SBATModel(small_config()), self._cfg(), threads=1)
        with pytest.raises(TrainingError):
            trainer.train([], _records(1))
        with pytest.raises(TrainingError):
            trainer.train(_records(1), [])

    def test_non_finite_loss(self, monkeypatch):
        monkeypatch.setattr(training, "sample_gradients", lambda model, record, index=0, rng=None: (float("nan"), {}))
        trainer = Trainer(SBATModel(small_config()), self._cfg(), threads=1)
        with pytest.raises(TrainingError, match="Non-finite"):
            trainer.train(_records(2), _records(1))
