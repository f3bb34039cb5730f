"""
Tests for the cv-oam command line.

Tests cover:
- train / eval / score / saliency on a synthetic corpus with a tiny network
- Reproducible model files
- Exit codes for usage, data and internal errors
- correlate, fit, cov, jitter and align-error output tables
- No partial outputs when a command fails midway
- sweep window range and reproducible sweep tables
"""

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from app.corpus import load_manifest
from app.main import main
from app.model_io import load_model
from app.oam import OamScore, write_scores_csv
from app.reports import write_table

TINY_FLAGS = [
    "--window-ms", "60", "--filters", "2", "--fc-width", "8", "--fc-layers", "1",
    "--pool-stride", "2", "--epochs", "1", "--threads", "1", "--seed", "7",
]


@pytest.fixture
def inventory_file(tmp_path):
    path = tmp_path / "inventory.json"
    path.write_text(json.dumps({"consonants": ["P", "T", "S", "M"], "vowels": ["AA", "IY"]}))
    return path


@pytest.fixture
def trained(tmp_path, small_corpus, inventory_file):
    """Model trained by the CLI on the small corpus; returns its path"""
    out = tmp_path / "trained"
    code = main(["train", "--manifest", str(small_corpus), "--out-dir", str(out),
                 "--inventory", str(inventory_file), *TINY_FLAGS])
    assert code == 0
    return out / "model.cvoam"


def synthetic_scores(n_speakers=8, noise=0.02, seed=0):
    """Instance scores whose speaker means grow with the speaker index"""
    rng = np.random.default_rng(seed)
    scores = []
    for i in range(n_speakers):
        for consonant, offset in (("P", 0.0), ("T", 0.05), ("S", -0.05)):
            for k in range(3):
                value = float(np.clip(0.3 + 0.08 * i + offset + rng.normal(0.0, noise), 0.01, 1.0))
                scores.append(OamScore(f"s{i}-u{k}", f"s{i}", consonant, 0.2 * (k + 1), value, consonant))
    return scores


@pytest.fixture
def score_files(tmp_path):
    scores = tmp_path / "scores.csv"
    write_scores_csv(scores, synthetic_scores())
    ratings = tmp_path / "ratings.csv"
    ratings.write_text("speaker_id,rating\n" + "".join(f"s{i},{i + 1}\n" for i in range(8)))
    return scores, ratings


class TestTrainEvalScore:
    """Tests for the model commands."""

    @pytest.mark.integration
    def test_train_writes_model_and_log(self, trained):
        params = load_model(trained)
        assert params.window_ms == 60
        assert params.inventory.consonants == ("P", "T", "S", "M")
        assert (params.spec.filters, params.spec.fc_width, params.spec.fc_layers) == (2, 8, 1)
        assert (params.spec.input_height, params.spec.input_width) == (40, 12)

        log = pd.read_csv(trained.parent / "training_log.csv")
        assert list(log.columns) == ["epoch", "loss", "train_accuracy"]
        assert len(log) == 1

    @pytest.mark.integration
    def test_same_flags_same_model_bytes(self, tmp_path, small_corpus, inventory_file, trained):
        out = tmp_path / "again"
        code = main(["train", "--manifest", str(small_corpus), "--out-dir", str(out),
                     "--inventory", str(inventory_file), *TINY_FLAGS])
        assert code == 0
        assert (out / "model.cvoam").read_bytes() == trained.read_bytes()

    @pytest.mark.integration
    def test_eval(self, tmp_path, small_corpus, trained, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--manifest", str(small_corpus), "--model", str(trained), "--out-dir", str(out)]) == 0

        accuracy = pd.read_csv(out / "accuracy.csv")
        assert accuracy["n"].tolist() == [16]
        assert 0.0 <= accuracy["accuracy"][0] <= 1.0

        confusion = pd.read_csv(out / "confusion.csv")
        assert list(confusion.columns) == ["consonant", "P", "T", "S", "M"]
        assert confusion[["P", "T", "S", "M"]].to_numpy().sum() == 16
        assert confusion[["P", "T", "S", "M"]].sum(axis=1).tolist() == [4, 4, 4, 4]

        assert pd.read_csv(out / "class_accuracy.csv")["n"].tolist() == [4, 4, 4, 4]
        assert "accuracy" in capsys.readouterr().out

    @pytest.mark.integration
    def test_score(self, tmp_path, small_corpus, trained):
        out = tmp_path / "score"
        # window and inventory come from the model file
        assert main(["score", "--manifest", str(small_corpus), "--model", str(trained),
                     "--out-dir", str(out), "--window-ms", "200"]) == 0

        scores = pd.read_csv(out / "scores.csv")
        assert len(scores) == 16
        assert ((scores["oam"] > 0.0) & (scores["oam"] <= 1.0)).all()
        assert sorted(scores["consonant"].unique()) == ["M", "P", "S", "T"]

        speakers = pd.read_csv(out / "speakers.csv")
        assert speakers["speaker_id"].tolist() == ["spk0", "spk1"]
        assert speakers["instances"].tolist() == [8, 8]

    @pytest.mark.integration
    def test_saliency(self, tmp_path, small_corpus, trained):
        out = tmp_path / "saliency"
        data = small_corpus.parent / "data"
        code = main(["saliency", "--model", str(trained), "--wav", str(data / "utt0.wav"),
                     "--alignment", str(data / "utt0.csv"), "--onset-index", "2", "--out-dir", str(out)])
        assert code == 0

        saliency_map = np.loadtxt(out / "saliency.csv", delimiter=",")
        mel = np.loadtxt(out / "mel.csv", delimiter=",")
        assert saliency_map.shape == mel.shape == (40, 12)
        assert saliency_map.min() >= 0.0 and saliency_map.max() <= 1.0

    @pytest.mark.integration
    def test_saliency_onset_out_of_range(self, tmp_path, small_corpus, trained):
        data = small_corpus.parent / "data"
        code = main(["saliency", "--model", str(trained), "--wav", str(data / "utt0.wav"),
                     "--alignment", str(data / "utt0.csv"), "--onset-index", "4",
                     "--out-dir", str(tmp_path / "saliency")])
        assert code == 1
        assert not (tmp_path / "saliency" / "saliency.csv").exists()


class TestExitCodes:
    """Tests for error reporting."""

    @pytest.mark.unit
    def test_unknown_flag(self, capsys):
        assert main(["train", "--manifest", "m.csv", "--no-such-flag"]) == 1
        assert "error" in capsys.readouterr().err

    @pytest.mark.unit
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    @pytest.mark.unit
    def test_unsupported_window(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "m.csv"), "--window-ms", "70"]) == 1

    @pytest.mark.unit
    def test_invalid_setting(self, monkeypatch):
        monkeypatch.setenv("OAM_THREADS", "many")
        assert main(["cov", "--scores", "s.csv"]) == 1

    @pytest.mark.integration
    def test_missing_manifest_leaves_no_output(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["train", "--manifest", str(tmp_path / "absent.csv"), "--out-dir", str(out), *TINY_FLAGS])

        assert code == 2
        assert "MissingFile" in capsys.readouterr().err
        assert not (out / "model.cvoam").exists()
        assert not (out / "training_log.csv").exists()

    @pytest.mark.integration
    def test_corrupt_model(self, tmp_path, small_corpus):
        model = tmp_path / "bad.cvoam"
        model.write_bytes(b"\x00" * 3)
        assert main(["eval", "--manifest", str(small_corpus), "--model", str(model),
                     "--out-dir", str(tmp_path / "out")]) == 2

    @pytest.mark.integration
    def test_internal_error(self, tmp_path, mocker, capsys):
        mocker.patch("app.main.load_manifest", side_effect=RuntimeError("boom"))
        code = main(["jitter", "--manifest", str(tmp_path / "m.csv"), "--sigma-ms", "5",
                     "--out-dir", str(tmp_path / "out")])

        assert code == 3
        assert "boom" in capsys.readouterr().err


class TestAnalysisCommands:
    """Tests for the commands working on score tables."""

    @pytest.mark.integration
    def test_correlate(self, tmp_path, score_files, capsys):
        scores, ratings = score_files
        out = tmp_path / "corr"
        assert main(["correlate", "--scores", str(scores), "--ratings", str(ratings), "--out-dir", str(out)]) == 0

        table = pd.read_csv(out / "correlation.csv")
        assert table["speaker_id"].tolist() == [f"s{i}" for i in range(8)]
        summary = pd.read_csv(out / "correlation_summary.csv")
        assert summary["n"][0] == 8
        assert summary["r"][0] > 0.9
        assert "r = " in capsys.readouterr().out

    @pytest.mark.integration
    def test_correlate_skips_unrated_speakers(self, tmp_path, score_files):
        scores, _ = score_files
        ratings = tmp_path / "partial.csv"
        ratings.write_text("speaker_id,rating\n" + "".join(f"s{i},{i}\n" for i in range(5)))
        out = tmp_path / "corr"
        assert main(["correlate", "--scores", str(scores), "--ratings", str(ratings), "--out-dir", str(out)]) == 0
        assert pd.read_csv(out / "correlation_summary.csv")["n"][0] == 5

    @pytest.mark.integration
    @pytest.mark.parametrize("loso", [False, True])
    def test_fit(self, tmp_path, score_files, loso):
        scores, ratings = score_files
        out = tmp_path / "fit"
        flags = ["--loso"] if loso else []
        assert main(["fit", "--scores", str(scores), "--ratings", str(ratings), "--out-dir", str(out), *flags]) == 0

        predictions = pd.read_csv(out / "predictions.csv")
        assert list(predictions.columns) == ["speaker_id", "rating", "predicted"]
        assert len(predictions) == 8
        assert pd.read_csv(out / "fit_summary.csv")["r"][0] > 0.8

        trace = pd.read_csv(out / "selection_trace.csv")
        assert trace["step"].tolist() == list(range(1, len(trace) + 1))
        assert set(trace["feature"]) <= {"P", "S", "T"}

    @pytest.mark.integration
    def test_fit_needs_four_speakers_for_loso(self, tmp_path):
        scores = tmp_path / "scores.csv"
        write_scores_csv(scores, synthetic_scores(n_speakers=3))
        ratings = tmp_path / "ratings.csv"
        ratings.write_text("speaker_id,rating\ns0,1\ns1,2\ns2,3\n")
        code = main(["fit", "--scores", str(scores), "--ratings", str(ratings), "--loso",
                     "--out-dir", str(tmp_path / "fit")])
        assert code == 2

    @pytest.mark.integration
    def test_cov(self, tmp_path, score_files):
        scores, _ = score_files
        out = tmp_path / "cov"
        assert main(["cov", "--scores", str(scores), "--out-dir", str(out)]) == 0

        gamma = pd.read_csv(out / "gamma.csv")
        assert len(gamma) == 24
        assert (gamma["gamma"] >= 0.0).all()
        summary = pd.read_csv(out / "gamma_summary.csv")
        assert sorted(summary["consonant"]) == ["P", "S", "T"]
        assert (summary["n"] == 8).all()
        assert not (out / "ttest.csv").exists()

    @pytest.mark.integration
    def test_cov_compare(self, tmp_path, score_files):
        scores, _ = score_files
        noisier = tmp_path / "scores_b.csv"
        write_scores_csv(noisier, synthetic_scores(noise=0.08, seed=1))
        out = tmp_path / "cov"
        assert main(["cov", "--scores", str(scores), "--scores-b", str(noisier), "--out-dir", str(out)]) == 0

        pairs = pd.read_csv(out / "gamma_pairs.csv")
        assert len(pairs) == 24
        ttest = pd.read_csv(out / "ttest.csv")
        assert ttest["n"][0] == 24 and ttest["df"][0] == 23
        assert ttest["t"][0] < 0.0
        assert 0.0 <= ttest["p"][0] <= 1.0

    @pytest.mark.integration
    def test_cov_without_overlap_leaves_no_output(self, tmp_path, score_files):
        scores, _ = score_files
        strangers = tmp_path / "strangers.csv"
        write_scores_csv(strangers, [replace(s, speaker_id=f"other-{s.speaker_id}") for s in synthetic_scores()])
        out = tmp_path / "cov"
        code = main(["cov", "--scores", str(scores), "--scores-b", str(strangers), "--out-dir", str(out)])

        assert code == 2
        assert not (out / "gamma.csv").exists()
        assert not (out / "gamma_summary.csv").exists()
        assert not out.exists() or list(out.iterdir()) == []


class TestAlignmentCommands:
    """Tests for jitter and align-error."""

    @pytest.mark.integration
    def test_jitter_then_align_error(self, tmp_path, small_corpus):
        jittered = tmp_path / "jittered"
        assert main(["jitter", "--manifest", str(small_corpus), "--sigma-ms", "10", "--seed", "3",
                     "--out-dir", str(jittered)]) == 0

        manifest = load_manifest(jittered / "manifest.csv")
        assert [e.utterance_id for e in manifest] == ["utt0", "utt1", "utt2", "utt3"]
        assert all(e.alignment_path.parent == jittered / "alignments" for e in manifest)

        out = tmp_path / "err"
        assert main(["align-error", "--reference", str(small_corpus), "--hypothesis",
                     str(jittered / "manifest.csv"), "--out-dir", str(out)]) == 0
        stats = pd.read_csv(out / "alignment_error.csv")
        assert stats["n"][0] == 16
        assert stats["std_ms"][0] > 0.0

    @pytest.mark.integration
    def test_jitter_is_seeded(self, tmp_path, small_corpus):
        for name in ("a", "b"):
            assert main(["jitter", "--manifest", str(small_corpus), "--sigma-ms", "10", "--seed", "3",
                         "--out-dir", str(tmp_path / name)]) == 0
        for utterance in ("utt0", "utt3"):
            a = (tmp_path / "a" / "alignments" / f"{utterance}.csv").read_text()
            b = (tmp_path / "b" / "alignments" / f"{utterance}.csv").read_text()
            assert a == b

    @pytest.mark.integration
    def test_align_error_against_itself(self, tmp_path, small_corpus):
        out = tmp_path / "err"
        assert main(["align-error", "--reference", str(small_corpus), "--hypothesis", str(small_corpus),
                     "--out-dir", str(out)]) == 0
        stats = pd.read_csv(out / "alignment_error.csv")
        assert stats["mean_ms"][0] == 0.0 and stats["std_ms"][0] == 0.0

    @pytest.mark.integration
    def test_jitter_with_bad_late_alignment_leaves_no_output(self, tmp_path, small_corpus):
        (small_corpus.parent / "data" / "utt3.csv").write_text("garbage\n1\n")
        out = tmp_path / "jittered"
        code = main(["jitter", "--manifest", str(small_corpus), "--sigma-ms", "10", "--out-dir", str(out)])

        assert code == 2
        assert not (out / "alignments").exists()
        assert not (out / "manifest.csv").exists()

    @pytest.mark.integration
    def test_negative_sigma_is_usage_error(self, tmp_path, small_corpus):
        out = tmp_path / "jittered"
        code = main(["jitter", "--manifest", str(small_corpus), "--sigma-ms", "-5", "--out-dir", str(out)])

        assert code == 1
        assert not (out / "alignments").exists()
        assert not (out / "manifest.csv").exists()


class TestPartialOutputs:
    """Tests that a command failing midway writes none of its files."""

    @pytest.mark.integration
    def test_eval_failing_on_last_table(self, tmp_path, small_corpus, trained, mocker):
        mocker.patch("app.main.write_class_accuracy", side_effect=OSError("disk full"))
        out = tmp_path / "eval"
        code = main(["eval", "--manifest", str(small_corpus), "--model", str(trained), "--out-dir", str(out)])

        assert code == 3
        assert not (out / "accuracy.csv").exists()
        assert not (out / "confusion.csv").exists()
        assert list(out.iterdir()) == []

    @pytest.mark.integration
    def test_cov_failing_on_last_table(self, tmp_path, score_files, mocker):
        scores, _ = score_files

        def fail_on_ttest(path, *args, **kwargs):
            if path.name == "ttest.csv":
                raise OSError("disk full")
            write_table(path, *args, **kwargs)

        mocker.patch("app.main.write_table", side_effect=fail_on_ttest)
        out = tmp_path / "cov"
        code = main(["cov", "--scores", str(scores), "--scores-b", str(scores), "--out-dir", str(out)])

        assert code == 3
        assert list(out.iterdir()) == []

    @pytest.mark.integration
    def test_train_failing_on_model_file(self, tmp_path, small_corpus, inventory_file, mocker):
        mocker.patch("app.main.save_model", side_effect=OSError("disk full"))
        out = tmp_path / "trained"
        code = main(["train", "--manifest", str(small_corpus), "--out-dir", str(out),
                     "--inventory", str(inventory_file), *TINY_FLAGS])

        assert code == 3
        assert not (out / "training_log.csv").exists()


class TestSweepCommand:
    """Tests for the window-length sweep command."""

    @pytest.mark.integration
    @pytest.mark.slow
    def test_sweep_range_and_rerun(self, tmp_path, small_corpus, inventory_file):
        flags = ["--train-manifest", str(small_corpus), "--test-manifest", str(small_corpus),
                 "--from", "60", "--to", "100", "--step", "40", "--inventory", str(inventory_file), *TINY_FLAGS]
        for name in ("a", "b"):
            assert main(["sweep", *flags, "--out-dir", str(tmp_path / name)]) == 0

        sweep = pd.read_csv(tmp_path / "a" / "sweep.csv")
        assert list(sweep.columns) == ["window_ms", "accuracy", "n_train", "n_test"]
        assert sweep["window_ms"].tolist() == [60, 100]
        assert sweep["n_train"].tolist() == [16, 16]
        assert sweep["n_test"].tolist() == [16, 16]
        assert ((sweep["accuracy"] >= 0.0) & (sweep["accuracy"] <= 1.0)).all()
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()

    @pytest.mark.integration
    @pytest.mark.parametrize("bounds", [["--step", "0"], ["--from", "120", "--to", "60"]])
    def test_bad_window_range(self, tmp_path, small_corpus, bounds):
        code = main(["sweep", "--train-manifest", str(small_corpus), "--test-manifest", str(small_corpus),
                     *bounds, "--out-dir", str(tmp_path / "sweep"), *TINY_FLAGS])
        assert code == 1
