"""
Synthetic scenario data: generation, vocabulary and dataset files
"""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from config.constants import Constants
from core.exceptions import AlignmentError, ContractError, DatasetFormatError
from core.synthdata import (
    CaptionRecord, ScenarioSpec, Vocabulary, build_record, caption_for, gen_dataset, gen_scenario_sequence,
    load_dataset, load_split, prototype_bank, save_dataset, split_counts,
)


class TestScenarioSpec:
    def test_step_scenarios(self):
        spec = ScenarioSpec(T=6, boundaries=[0, 2, 5], scenario_ids=[4, 1, 4])
        np.testing.assert_array_equal(spec.step_scenarios(), [4, 4, 1, 1, 1, 4])
        assert spec.k == 3
        assert spec.scene_changes == [2, 5]

    @pytest.mark.parametrize("boundaries, ids", [
        ([1, 3], [0, 1]),
        ([0, 3, 3], [0, 1, 2]),
        ([0, 8], [0, 1]),
        ([0, 3], [0]),
        ([0, 3], [2, 2]),
    ])
    def test_invalid_segments(self, boundaries, ids):
        with pytest.raises(ValidationError):
            ScenarioSpec(T=8, boundaries=boundaries, scenario_ids=ids)

    def test_caption_is_function_of_spec(self):
        spec = ScenarioSpec(T=8, boundaries=[0, 4], scenario_ids=[2, 0])
        assert caption_for(spec) == [Constants.BOS_ID, 5, 3, Constants.EOS_ID]


class TestGeneration:
    def test_noise_free_segments_are_constant(self):
        spec = ScenarioSpec(T=8, boundaries=[0, 4], scenario_ids=[1, 6])
        record = build_record(spec, 16, 0.0, np.random.default_rng(0), "r")
        for features in (record.image_features, record.motion_features):
            assert np.all(features[:4] == features[0])
            assert np.all(features[4:] == features[4])
            assert not np.array_equal(features[0], features[4])

    def test_prototypes_are_unit_norm_and_fixed(self):
        bank = prototype_bank("motion", 32, 8)
        np.testing.assert_allclose(np.linalg.norm(bank, axis=1), 1.0)
        np.testing.assert_array_equal(bank, prototype_bank("motion", 32, 8))
        assert not np.array_equal(bank, prototype_bank("image", 32, 8))

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_caption_and_segment_lengths(self, k):
        record = gen_scenario_sequence(T=20, k=k, seed=k)
        spec = record.spec
        assert len(record.captions[0]) == k + 2
        assert spec.boundaries[0] == 0 and spec.k == k
        lengths = np.diff(spec.boundaries + [spec.T])
        assert np.all(lengths >= 2)
        assert len(set(spec.scenario_ids)) == k

    def test_same_seed_is_bit_identical(self):
        assert gen_scenario_sequence(T=16, k=3, seed=42) == gen_scenario_sequence(T=16, k=3, seed=42)
        assert gen_scenario_sequence(T=16, k=3, seed=42) != gen_scenario_sequence(T=16, k=3, seed=43)

    def test_noise_level(self):
        record = gen_scenario_sequence(T=32, k=2, d_feat=64, sigma=0.05, seed=0)
        clean = prototype_bank("image", 64)[record.spec.step_scenarios()]
        residual = record.image_features - clean
        assert 0.04 < residual.std() < 0.06

    @pytest.mark.parametrize("T, k, sigma", [(7, 4, 0.0), (8, 1, 0.0), (8, 2, -0.1), (40, 9, 0.0)])
    def test_infeasible_requests(self, T, k, sigma):
        with pytest.raises(ContractError):
            gen_scenario_sequence(T=T, k=k, sigma=sigma)

    def test_tightest_packing(self):
        record = gen_scenario_sequence(T=8, k=4, seed=1)
        assert record.spec.boundaries == [0, 2, 4, 6]


class TestCaptionRecord:
    def test_misaligned_streams(self):
        with pytest.raises(AlignmentError):
            CaptionRecord("x", np.zeros((3, 4)), np.zeros((4, 4)), [[0, 1]])

    def test_json_line_is_compact(self):
        record = gen_scenario_sequence(T=4, k=2, d_feat=2, seed=0)
        line = record.to_json()
        assert "\n" not in line and ", " not in line
        assert json.loads(line)["spec"]["boundaries"] == record.spec.boundaries


class TestVocabulary:
    def test_from_records(self):
        records = [gen_scenario_sequence(T=10, k=2, seed=s) for s in range(4)]
        vocab = Vocabulary.from_records(records)
        scenes = {t for r in records for t in r.captions[0][1:-1]}
        assert set(vocab.token_to_id.values()) == {0, 1, 2} | scenes
        assert vocab.size == max(scenes) + 1

    def test_decode_strips_specials(self):
        vocab = Vocabulary.for_size(6)
        assert vocab.decode([0, 3, 5, 1]) == ["scene_0", "scene_2"]
        assert vocab.decode([0, 9], strip_special=False) == ["<bos>", "<unk:9>"]

    def test_save_and_load(self, tmp_path):
        vocab = Vocabulary.for_size(7)
        vocab.save(tmp_path / "vocab.json")
        assert Vocabulary.load(tmp_path / "vocab.json") == vocab

    def test_load_rejects_non_integer_ids(self, tmp_path):
        path = tmp_path / "vocab.json"
        path.write_text('{"<bos>": "zero"}')
        with pytest.raises(DatasetFormatError):
            Vocabulary.load(path)


class TestDatasetFiles:
    def test_split_counts(self):
        assert split_counts(100, (0.8, 0.1, 0.1)) == (80, 10, 10)
        assert split_counts(7, (0.5, 0.25, 0.25)) == (3, 2, 2)
        with pytest.raises(ContractError):
            split_counts(10, (0.5, 0.5, 0.5))

    def test_gen_dataset_layout(self, tmp_path):
        written = gen_dataset(tmp_path, 100, (0.8, 0.1, 0.1), T=12, k_range=(2, 4), d_feat=4, seed=3)
        assert [len(load_split(tmp_path, s)) for s in ("train", "val", "test")] == [80, 10, 10]
        assert set(written) == {"train", "val", "test", "vocab"}
        records = [r for s in ("train", "val", "test") for r in load_split(tmp_path, s)]
        assert [r.id for r in records] == [f"rec{i:05d}" for i in range(100)]
        assert all(2 <= r.spec.k <= 4 for r in records)
        assert Vocabulary.load(written["vocab"]) == Vocabulary.from_records(records)

    def test_regeneration_is_byte_identical(self, tmp_path):
        first = gen_dataset(tmp_path / "a", 12, T=10, k_range=(2, 3), d_feat=4, seed=8)
        second = gen_dataset(tmp_path / "b", 12, T=10, k_range=(2, 3), d_feat=4, seed=8)
        for key in first:
            assert first[key].read_bytes() == second[key].read_bytes()

    def test_records_use_independent_seeds(self, tmp_path):
        gen_dataset(tmp_path, 10, (1.0, 0.0, 0.0), T=10, k_range=(2, 2), d_feat=4, seed=0)
        records = load_split(tmp_path, "train")
        firsts = {tuple(r.image_features[0]) for r in records}
        assert len(firsts) == len(records)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        records = [gen_scenario_sequence(T=int(rng.integers(6, 20)), k=int(rng.integers(2, 4)), d_feat=5,
                                         sigma=float(rng.uniform(0, 0.2)), seed=i) for i in range(50)]
        save_dataset(records, tmp_path / "data.jsonl")
        assert load_dataset(tmp_path / "data.jsonl") == records

    def test_empty_file(self, tmp_path):
        (tmp_path / "empty.jsonl").write_text("")
        assert load_dataset(tmp_path / "empty.jsonl") == []

    def test_malformed_line_reports_line_number(self, tmp_path):
        good = gen_scenario_sequence(T=4, k=2, d_feat=2, seed=0).to_json()
        path = tmp_path / "bad.jsonl"
        path.write_text(good + "\n{not json\n")
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(path)
        assert info.value.line == 2

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "x", "image_features": [[0.0]], "motion_features": [[0.0]]}\n')
        with pytest.raises(DatasetFormatError, match="captions"):
            load_dataset(path)

    def test_misaligned_record_in_file(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({
            "id": "x", "image_features": [[0.0], [1.0]], "motion_features": [[0.0]], "captions": [[0, 1]],
        }) + "\n")
        with pytest.raises(AlignmentError, match=":1:"):
            load_dataset(path)
