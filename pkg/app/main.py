"""
cv-oam command line
Train the consonant classifier, score corpora and run the OAM analyses.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from .analytics import cov_compare, cov_summary, cov_table, fit_forward_linear, loso_evaluate, pearson
from .config import SUPPORTED_WINDOWS_MS, RunConfig, Settings, get_settings
from .corpus import (
    Manifest,
    ManifestEntry,
    PhoneInventory,
    load_alignment,
    load_inventory,
    load_manifest,
    load_ratings,
    load_wav,
    write_alignment,
    write_manifest,
)
from .exceptions import IndexOutOfRange, OamError, UsageError
from .features import melspec, write_matrix_csv
from .fileio import staged_outputs
from .model_io import load_model, save_model
from .network import NetworkSpec
from .oam import aggregate, read_scores_csv, score_corpus, speaker_feature_matrix, write_scores_csv, write_speaker_reports_csv
from .reports import write_class_accuracy, write_confusion, write_sweep, write_table, write_training_log
from .saliency import saliency
from .segmenter import alignment_error_corpus, cut_segment, find_vowel_onsets, jitter_onsets
from .training import evaluate, examples_from_manifest, sweep_window, train

logger = logging.getLogger(__name__)

DEFAULT_MODEL_NAME = "model.cvoam"


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# --- Commands ---

def _inventory(args: argparse.Namespace) -> PhoneInventory:
    return load_inventory(args.inventory) if args.inventory else PhoneInventory()


def _network_spec(args: argparse.Namespace) -> NetworkSpec:
    overrides = {
        "filters": args.filters,
        "fc_width": args.fc_width,
        "fc_layers": args.fc_layers,
        "pool_stride": args.pool_stride,
    }
    return NetworkSpec(**{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    inventory = _inventory(args)
    manifest = load_manifest(config.inputs["manifest"])
    examples = examples_from_manifest(
        manifest, inventory, config.window_ms, settings.features, config.threads, settings.tier_name
    )
    params, history = train(examples, inventory, config.train, _network_spec(args), config.window_ms, settings.features)
    with staged_outputs(config.out_dir) as out:
        write_training_log(out / "training_log.csv", history)
        save_model(params, config.model_path or out / DEFAULT_MODEL_NAME)


def cmd_eval(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    params = load_model(config.model_path)
    manifest = load_manifest(config.inputs["manifest"])
    examples = examples_from_manifest(
        manifest, params.inventory, params.window_ms, params.features, config.threads, settings.tier_name
    )
    result = evaluate(params, examples, settings.inference_batch_size)
    with staged_outputs(config.out_dir) as out:
        write_table(out / "accuracy.csv", [(result.accuracy, result.n)], ["accuracy", "n"])
        write_confusion(out / "confusion.csv", result, params.inventory)
        write_class_accuracy(out / "class_accuracy.csv", result, params.inventory)
    print(f"accuracy {result.accuracy:.4f} over {result.n} segments")


def cmd_score(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    params = load_model(config.model_path)
    manifest = load_manifest(config.inputs["manifest"])
    scores = score_corpus(params, manifest, config.threads, settings.tier_name, settings.inference_batch_size)
    reports = aggregate(scores)
    with staged_outputs(config.out_dir) as out:
        write_scores_csv(out / "scores.csv", scores)
        write_speaker_reports_csv(out / "speakers.csv", reports, params.inventory)


def _speaker_features(args: argparse.Namespace, config: RunConfig):
    """Rated speakers' consonant-mean matrix, ratings and consonant names"""
    reports = aggregate(read_scores_csv(config.inputs["scores"]))
    ratings = load_ratings(config.inputs["ratings"]).as_dict()
    if args.inventory:
        consonants = list(load_inventory(args.inventory).consonants)
    else:
        consonants = sorted({c for r in reports for c in r.consonant_means})
    rated = [r for r in reports if r.speaker_id in ratings]
    skipped = len(reports) - len(rated)
    if skipped:
        logger.warning(f"{skipped} scored speakers have no rating and are left out")
    speaker_ids, matrix = speaker_feature_matrix(rated, consonants)
    y = np.asarray([ratings[s] for s in speaker_ids], dtype=np.float64)
    return rated, speaker_ids, matrix, y, consonants


def cmd_correlate(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    rated, speaker_ids, _, y, _ = _speaker_features(args, config)
    levels = [r.speaker_level_oam for r in rated]
    result = pearson(levels, y)
    with staged_outputs(config.out_dir) as out:
        write_table(
            out / "correlation.csv",
            zip(speaker_ids, y.tolist(), levels),
            ["speaker_id", "rating", "speaker_oam"],
        )
        write_table(out / "correlation_summary.csv", [result.to_dict()], ["n", "r", "t", "p"])
    print(f"r = {result.r:.4f} (n = {result.n}, p = {result.p_value:.4g})")


def cmd_fit(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    _, speaker_ids, matrix, y, consonants = _speaker_features(args, config)
    model = fit_forward_linear(matrix, y, config.selection, consonants)
    if args.loso:
        loso = loso_evaluate(matrix, y, speaker_ids, config.selection, consonants, config.threads)
        predictions, result = loso.predictions, loso.correlation
    else:
        predictions = model.predict(matrix)
        result = pearson(predictions, y)

    with staged_outputs(config.out_dir) as out:
        write_table(
            out / "predictions.csv",
            zip(speaker_ids, y.tolist(), predictions.tolist()),
            ["speaker_id", "rating", "predicted"],
        )
        write_table(out / "fit_summary.csv", [result.to_dict()], ["n", "r", "t", "p"])
        write_table(
            out / "selection_trace.csv",
            [(s.step, consonants[s.feature], s.criterion) for s in model.trace],
            ["step", "feature", "criterion"],
        )
    print(f"selected {model.selected_names}; r = {result.r:.4f} ({'leave-one-speaker-out' if args.loso else 'in-sample'})")


def cmd_sweep(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    inventory = _inventory(args)
    if args.window_step <= 0:
        raise UsageError(f"--step must be positive, got {args.window_step}")
    windows = list(range(args.window_from, args.window_to + 1, args.window_step))
    if not windows:
        raise UsageError(f"empty window range {args.window_from}..{args.window_to}")
    results = sweep_window(
        load_manifest(config.inputs["train_manifest"]),
        load_manifest(config.inputs["test_manifest"]),
        inventory,
        windows,
        config.train,
        _network_spec(args),
        settings.features,
        config.threads,
        settings.tier_name,
    )
    write_sweep(config.out_dir / "sweep.csv", results)


def cmd_saliency(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    params = load_model(config.model_path)
    clip = load_wav(config.inputs["wav"])
    track = load_alignment(config.inputs["alignment"], settings.tier_name)
    onsets = find_vowel_onsets(track, params.inventory)
    if not 0 <= args.onset_index < len(onsets):
        raise IndexOutOfRange(f"onset index {args.onset_index} outside [0, {len(onsets)})")
    onset = onsets[args.onset_index]
    segment = cut_segment(clip, onset, params.window_ms, track.utterance_id)
    spectrogram = melspec(segment, params.features)
    target = args.target_class if args.target_class is not None else params.inventory.index(onset.preceding_consonant)
    saliency_map = saliency(params, spectrogram, target)
    with staged_outputs(config.out_dir) as out:
        write_matrix_csv(out / "saliency.csv", saliency_map)
        write_matrix_csv(out / "mel.csv", spectrogram)
    logger.info(f"Saliency for {onset.preceding_consonant}-{onset.vowel} at {onset.time_s:.3f} s, class {target}")


def cmd_cov(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    scores = read_scores_csv(config.inputs["scores"])
    rows = cov_table(scores)
    comparison = None
    if "scores_b" in config.inputs:
        comparison = cov_compare(scores, read_scores_csv(config.inputs["scores_b"]))

    gamma_columns = ["speaker_id", "consonant", "gamma"]
    summary_columns = ["consonant", "n", "min", "q1", "median", "q3", "max"]
    with staged_outputs(config.out_dir) as out:
        write_table(out / "gamma.csv", [r.to_dict() for r in rows], gamma_columns)
        write_table(out / "gamma_summary.csv", cov_summary(rows), summary_columns)
        if comparison is None:
            return
        t = comparison.ttest
        write_table(out / "gamma_b.csv", [r.to_dict() for r in comparison.rows_b], gamma_columns)
        write_table(out / "gamma_b_summary.csv", cov_summary(comparison.rows_b), summary_columns)
        write_table(out / "gamma_pairs.csv", comparison.pairs, ["speaker_id", "consonant", "gamma_a", "gamma_b"])
        write_table(out / "ttest.csv", [(len(comparison.pairs), t.t, t.df, t.p)], ["n", "t", "df", "p"])
    print(f"paired t = {t.t:.4f}, df = {t.df}, p = {t.p:.4g}")


def cmd_jitter(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    inventory = _inventory(args)
    manifest = load_manifest(config.inputs["manifest"])
    jittered = []
    for i, entry in enumerate(manifest):
        track = load_alignment(entry.alignment_path, settings.tier_name)
        relative = Path("alignments") / f"{entry.utterance_id}{entry.alignment_path.suffix}"
        jittered.append((relative, jitter_onsets(track, args.sigma_ms, (config.seed, i), inventory)))
    entries = [
        ManifestEntry(
            utterance_id=entry.utterance_id,
            speaker_id=entry.speaker_id,
            audio_path=entry.audio_path.resolve(),
            alignment_path=relative,
        )
        for entry, (relative, _) in zip(manifest, jittered)
    ]
    with staged_outputs(config.out_dir) as out:
        for relative, track in jittered:
            write_alignment(out / relative, track, settings.tier_name)
        write_manifest(out / "manifest.csv", Manifest(tuple(entries)))
    logger.info(f"Jittered {len(entries)} alignments with sigma {args.sigma_ms} ms")


def cmd_align_error(args: argparse.Namespace, config: RunConfig, settings: Settings) -> None:
    stats = alignment_error_corpus(
        load_manifest(config.inputs["reference"]),
        load_manifest(config.inputs["hypothesis"]),
        _inventory(args),
        settings.tier_name,
    )
    write_table(config.out_dir / "alignment_error.csv", [stats.to_dict()], ["mean_ms", "std_ms", "n"])
    print(f"onset error {stats.mean_ms:.2f} +/- {stats.std_ms:.2f} ms over {stats.n} onsets")


# --- Parser ---

def _common_flags() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for every random generator (default 42)")
    common.add_argument("--threads", type=int, help="worker threads (default: CPU count)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level")
    common.add_argument("--window-ms", type=int, help=f"CV window length, one of {list(SUPPORTED_WINDOWS_MS)}")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="directory for output files")
    common.add_argument("--inventory", type=Path, help="JSON phone inventory (default: built-in ARPABET set)")
    return common


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float, dest="learning_rate")
    parser.add_argument("--sentences-per-batch", type=int)
    parser.add_argument("--batch-segments", type=int, dest="fixed_batch_segments",
                        help="fixed number of segments per batch instead of whole sentences")
    parser.add_argument("--filters", type=int, help="convolution filters per layer")
    parser.add_argument("--fc-width", type=int)
    parser.add_argument("--fc-layers", type=int)
    parser.add_argument("--pool-stride", type=int)


def build_parser() -> CliParser:
    parser = CliParser(prog="cv-oam", description="Objective articulation measure toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    common = _common_flags()

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        return p

    p = command("train", cmd_train, "train the consonant classifier")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-model", type=Path, dest="model", help=f"model file (default <out-dir>/{DEFAULT_MODEL_NAME})")
    _train_flags(p)

    p = command("eval", cmd_eval, "accuracy and confusion matrix on a test manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)

    p = command("score", cmd_score, "OAM scores per CV instance and per speaker")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)

    for name, handler, help_text in (
        ("correlate", cmd_correlate, "correlate speaker-level OAM with ratings"),
        ("fit", cmd_fit, "forward-selection linear model from consonant-level OAM to ratings"),
    ):
        p = command(name, handler, help_text)
        p.add_argument("--scores", type=Path, required=True)
        p.add_argument("--ratings", type=Path, required=True)
        if name == "fit":
            p.add_argument("--loso", action="store_true", help="evaluate leave-one-speaker-out")
            p.add_argument("--max-features", type=int)
            p.add_argument("--min-improvement", type=float)
            p.add_argument("--ridge", type=float)

    p = command("sweep", cmd_sweep, "test accuracy as a function of CV window length")
    p.add_argument("--train-manifest", type=Path, required=True)
    p.add_argument("--test-manifest", type=Path, required=True)
    p.add_argument("--from", type=int, dest="window_from", default=60)
    p.add_argument("--to", type=int, dest="window_to", default=200)
    p.add_argument("--step", type=int, dest="window_step", default=20)
    _train_flags(p)

    p = command("saliency", cmd_saliency, "guided-backpropagation saliency map for one CV instance")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--wav", type=Path, required=True)
    p.add_argument("--alignment", type=Path, required=True)
    p.add_argument("--onset-index", type=int, default=0)
    p.add_argument("--target-class", type=int, help="class index (default: the instance's consonant)")

    p = command("cov", cmd_cov, "coefficient of variation of instance scores")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--scores-b", type=Path, help="second score table for a paired comparison")

    p = command("jitter", cmd_jitter, "perturb vowel onsets of every alignment in a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--sigma-ms", type=float, required=True)

    p = command("align-error", cmd_align_error, "vowel-onset differences between two alignments of a corpus")
    p.add_argument("--reference", type=Path, required=True, help="manifest of reference alignments")
    p.add_argument("--hypothesis", type=Path, required=True, help="manifest of hypothesis alignments")

    return parser


INPUT_FLAGS = (
    "manifest", "scores", "ratings", "train_manifest", "test_manifest",
    "wav", "alignment", "scores_b", "reference", "hypothesis",
)


def run_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    """Merge flags over settings; invalid values become UsageError"""
    def flag(name: str):
        return getattr(args, name, None)

    def overridden(base, names: Sequence[str]):
        updates = {n: flag(n) for n in names if flag(n) is not None}
        return type(base).model_validate({**base.model_dump(), **updates})

    seed = flag("seed") if flag("seed") is not None else settings.seed
    try:
        train_config = overridden(settings.train, ["epochs", "learning_rate", "sentences_per_batch", "fixed_batch_segments"])
        train_config = train_config.model_copy(update={"seed": seed})
        return RunConfig(
            command=args.command,
            inputs={n: flag(n) for n in INPUT_FLAGS if flag(n) is not None},
            model_path=flag("model"),
            window_ms=flag("window_ms") if flag("window_ms") is not None else settings.window_ms,
            seed=seed,
            threads=flag("threads") if flag("threads") is not None else settings.threads,
            out_dir=args.out_dir,
            train=train_config,
            selection=overridden(settings.selection, ["max_features", "min_improvement", "ridge"]),
        )
    except ValidationError as e:
        raise UsageError(f"{args.command}: invalid option: {e}")


def _report(e: BaseException) -> str:
    notes = getattr(e, "__notes__", [])
    return "; ".join([f"{type(e).__name__}: {e}", *notes])


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        settings = get_settings()
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"error: invalid OAM_ setting: {e}", file=sys.stderr)
        return UsageError.exit_code
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    level = args.log_level or settings.log_level
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)

    try:
        config = run_config(args, settings)
        args.handler(args, config, settings)
    except OamError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {_report(e)}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Internal error in {args.command}")
        print(f"internal error: {_report(e)}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
