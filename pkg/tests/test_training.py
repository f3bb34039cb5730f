"""
Tests for training, evaluation and the window sweep.

Tests cover:
- Example extraction from segments and manifests
- Sentence-grouped and fixed-size batching
- Overfitting sanity, seeded determinism, quadrant separability with byte-identical reruns
- Accuracy and confusion bookkeeping
- Window sweep rows, validation and growth with edge-placed cues
"""

import numpy as np
import pytest

from app.config import TrainConfig
from app.corpus import Manifest, load_manifest
from app.exceptions import EmptyEvaluationSet, EmptyTrainingSet, InvalidInventory, InvalidWindow
from app.model_io import save_model
from app.network import NetworkSpec, init_params
from app.segmenter import CVSegment
from app.training import (
    ExampleSet,
    evaluate,
    examples_from_manifest,
    examples_from_segments,
    make_batches,
    sweep_window,
    train,
)

TINY = NetworkSpec.reduced(filters=4, fc_width=16, fc_layers=1)


def example_set(inputs, labels, utterance_ids):
    return ExampleSet(np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=np.int64), tuple(utterance_ids))


class TestExamples:
    """Tests for turning segments into network inputs."""

    @pytest.mark.integration
    def test_from_manifest(self, small_corpus, small_inventory):
        examples = examples_from_manifest(load_manifest(small_corpus), small_inventory, window_ms=60)
        assert examples.inputs.shape == (16, 40, 12)
        assert examples.labels.tolist() == [0, 1, 2, 3] * 4
        assert examples.utterance_ids[:5] == ("utt0",) * 4 + ("utt1",)

    @pytest.mark.unit
    def test_unknown_consonant(self, small_inventory):
        segment = CVSegment("u", "s", "K", 0.5, np.zeros(960), window_ms=60)
        with pytest.raises(InvalidInventory):
            examples_from_segments([segment], small_inventory)

    @pytest.mark.unit
    def test_threads_do_not_change_inputs(self, small_inventory):
        rng = np.random.default_rng(0)
        segments = [CVSegment(f"u{i}", "s", "P", 0.5, rng.uniform(-0.5, 0.5, 960), window_ms=60) for i in range(6)]
        a = examples_from_segments(segments, small_inventory, threads=1)
        b = examples_from_segments(segments, small_inventory, threads=3)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    @pytest.mark.unit
    def test_subset(self, quadrant_data):
        examples = example_set(*quadrant_data(10, 0))
        part = examples.subset([1, 7])
        assert len(part) == 2
        assert part.utterance_ids == ("u0", "u1")


class TestBatching:
    """Tests for epoch batch construction."""

    @pytest.mark.unit
    def test_sentence_groups(self):
        ids = [f"u{i // 3}" for i in range(30)]  # 10 utterances of 3 segments
        batches = make_batches(ids, TrainConfig(sentences_per_batch=4), np.random.default_rng(0))

        assert [len(b) for b in batches] == [12, 12, 6]
        assert sorted(np.concatenate(batches).tolist()) == list(range(30))
        for b in batches:
            utterances = {ids[i] for i in b}
            assert all(sum(ids[i] == u for i in b) == 3 for u in utterances)

    @pytest.mark.unit
    def test_fixed_segment_count(self):
        batches = make_batches(["u"] * 10, TrainConfig(fixed_batch_segments=4), np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 4, 2]

    @pytest.mark.unit
    def test_seeded_shuffle(self):
        ids = [f"u{i}" for i in range(20)]
        config = TrainConfig(sentences_per_batch=3)
        a = make_batches(ids, config, np.random.default_rng(5))
        b = make_batches(ids, config, np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestTrain:
    """Tests for the optimization loop."""

    @pytest.mark.unit
    def test_empty(self, small_inventory):
        empty = example_set(np.zeros((0, 12, 10)), [], [])
        with pytest.raises(EmptyTrainingSet):
            train(empty, small_inventory, spec=TINY)

    @pytest.mark.unit
    def test_overfits_identical_pairs(self, small_inventory):
        x = np.random.default_rng(1).standard_normal((12, 10))
        examples = example_set(np.repeat(x[None], 50, axis=0), [2] * 50, ["u"] * 50)
        config = TrainConfig(epochs=5, fixed_batch_segments=50)

        _, history = train(examples, small_inventory, config, spec=TINY)

        losses = [h.loss for h in history]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:]))

    @pytest.mark.unit
    def test_same_seed_same_params(self, small_inventory, quadrant_data):
        examples = example_set(*quadrant_data(40, 2))
        config = TrainConfig(epochs=2, sentences_per_batch=2, seed=13)

        a, history_a = train(examples, small_inventory, config, spec=TINY)
        b, history_b = train(examples, small_inventory, config, spec=TINY)

        assert [h.loss for h in history_a] == [h.loss for h in history_b]
        for name in a.tensors:
            assert a.tensors[name].tobytes() == b.tensors[name].tobytes()

    @pytest.mark.unit
    def test_spec_follows_input_size(self, small_inventory, quadrant_data):
        inputs, labels, ids = quadrant_data(10, 3, height=14, width=12)
        params, _ = train(example_set(inputs, labels, ids), small_inventory, TrainConfig(epochs=1), spec=TINY)
        assert (params.spec.input_height, params.spec.input_width) == (14, 12)

    @pytest.mark.slow
    def test_quadrant_dataset_is_learned(self, tmp_path, small_inventory, quadrant_data):
        train_set = example_set(*quadrant_data(400, 10))
        test_set = example_set(*quadrant_data(100, 11))
        config = TrainConfig(epochs=10, learning_rate=0.001, seed=42)

        params, history = train(train_set, small_inventory, config, spec=NetworkSpec.reduced())
        rerun, rerun_history = train(train_set, small_inventory, config, spec=NetworkSpec.reduced())
        result = evaluate(params, test_set)

        assert history[-1].loss < history[0].loss
        assert result.accuracy >= 0.95

        save_model(params, tmp_path / "a.cvoam")
        save_model(rerun, tmp_path / "b.cvoam")
        assert (tmp_path / "a.cvoam").read_bytes() == (tmp_path / "b.cvoam").read_bytes()
        assert [h.loss for h in rerun_history] == [h.loss for h in history]
        assert evaluate(rerun, test_set).accuracy == result.accuracy


class TestEvaluate:
    """Tests for accuracy and confusion matrices."""

    @pytest.fixture
    def always_zero(self, small_inventory):
        params = init_params(NetworkSpec.reduced(), small_inventory, seed=0)
        params.tensors["out_w"][...] = 0.0
        params.tensors["out_b"][...] = [10.0, 0.0, 0.0, 0.0]
        return params

    @pytest.mark.unit
    def test_constant_predictor(self, always_zero, quadrant_data):
        inputs, _, ids = quadrant_data(20, 4)
        labels = np.arange(20) % 4
        result = evaluate(always_zero, example_set(inputs, labels, ids))

        assert result.accuracy == pytest.approx(0.25)
        assert result.confusion.sum() == 20
        assert result.confusion[:, 0].tolist() == [5, 5, 5, 5]
        assert result.confusion.sum(axis=1).tolist() == [5, 5, 5, 5]
        assert result.per_class_accuracy.tolist() == [1.0, 0.0, 0.0, 0.0]

    @pytest.mark.unit
    def test_trace_matches_accuracy(self, small_inventory, quadrant_data):
        params = init_params(NetworkSpec.reduced(), small_inventory, seed=5)
        result = evaluate(params, example_set(*quadrant_data(37, 6)))
        assert result.confusion.sum() == 37
        assert np.trace(result.confusion) / 37 == pytest.approx(result.accuracy)

    @pytest.mark.unit
    def test_absent_class_is_nan(self, always_zero, quadrant_data):
        inputs, _, ids = quadrant_data(4, 7)
        result = evaluate(always_zero, example_set(inputs, [0, 0, 1, 1], ids))
        assert np.isnan(result.per_class_accuracy[2])
        assert result.to_dict()["per_class_accuracy"][2] is None

    @pytest.mark.unit
    def test_empty(self, always_zero):
        with pytest.raises(EmptyEvaluationSet):
            evaluate(always_zero, example_set(np.zeros((0, 12, 10)), [], []))


class TestSweep:
    """Tests for the CV window sweep."""

    @pytest.mark.integration
    def test_one_row_per_window(self, small_corpus, small_inventory):
        manifest = load_manifest(small_corpus)
        results = sweep_window(
            manifest, manifest, small_inventory, [60, 100], TrainConfig(epochs=1), spec=TINY
        )
        assert [r.window_ms for r in results] == [60, 100]
        assert all(r.n_train == r.n_test == 16 for r in results)
        assert all(0.0 <= r.accuracy <= 1.0 for r in results)

    @pytest.mark.integration
    def test_single_window_is_train_then_evaluate(self, small_corpus, small_inventory):
        manifest = load_manifest(small_corpus)
        config = TrainConfig(epochs=1, seed=3)
        [row] = sweep_window(manifest, manifest, small_inventory, [160], config, spec=TINY)

        examples = examples_from_manifest(manifest, small_inventory, 160)
        params, _ = train(examples, small_inventory, config, spec=TINY, window_ms=160)
        assert row.accuracy == evaluate(params, examples).accuracy

    @pytest.mark.unit
    def test_unsupported_window(self, small_inventory):
        with pytest.raises(InvalidWindow):
            sweep_window(Manifest(), Manifest(), small_inventory, [70])

    @pytest.mark.integration
    @pytest.mark.slow
    def test_accuracy_grows_with_window_when_cues_sit_at_the_edges(
        self, corpus_factory, make_phones, small_inventory
    ):
        # consonant tones end 40 ms before each vowel onset: a 60 ms window
        # sees only noise, wider windows reach back into the tone
        orders = [["P", "T", "S", "M"], ["M", "S", "T", "P"], ["T", "M", "P", "S"], ["S", "P", "M", "T"]]
        utterances = [
            (f"utt{i}", f"spk{i % 4}", make_phones(orders[i % 4], vowel="AA" if i % 2 else "IY", step=0.3))
            for i in range(8)
        ]
        manifest = load_manifest(corpus_factory("edges", utterances, tone_gap_s=0.04))
        config = TrainConfig(epochs=30, learning_rate=3e-3, fixed_batch_segments=4, seed=42)

        results = sweep_window(manifest, manifest, small_inventory, [60, 120, 160], config, spec=TINY)
        accuracies = [r.accuracy for r in results]

        assert all(r.n_test == 32 for r in results)
        assert accuracies == sorted(accuracies)
        assert accuracies[-1] >= 0.9
        assert accuracies[0] < accuracies[-1]
