"""
Objective articulation measure (OAM).

An instance score is the target consonant's posterior divided by the
largest posterior; it reaches 1.0 when the classifier ranks the target
first. Instance scores are averaged per consonant, then the consonant
means are averaged (unweighted) per speaker.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .corpus import Manifest, PhoneInventory, read_table
from .exceptions import IndexOutOfRange, MalformedCsv
from .features import filterbank_for, melspec
from .fileio import atomic_output
from .network import POSTERIOR_FLOOR, ModelParams, predict_logits
from .segmenter import CVSegment, segment_corpus

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["utterance_id", "speaker_id", "consonant", "onset_s", "oam", "predicted"]


@dataclass(frozen=True)
class OamScore:
    utterance_id: str
    speaker_id: str
    target_consonant: str
    onset_s: float
    value: float
    predicted_consonant: str


@dataclass(frozen=True)
class SpeakerReport:
    speaker_id: str
    consonant_means: dict[str, float]
    counts: dict[str, int]
    speaker_level_oam: float

    @property
    def instances(self) -> int:
        return sum(self.counts.values())


def _check_target(n_classes: int, target_index: int) -> None:
    if not 0 <= target_index < n_classes:
        raise IndexOutOfRange(f"target index {target_index} outside [0, {n_classes})")


def oam_instance(posteriors: np.ndarray, target_index: int) -> float:
    """p_target / max(p); 1.0 whenever the target ties the maximum, never 0"""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    _check_target(posteriors.shape[-1], target_index)
    ratio = max(float(posteriors[target_index]), POSTERIOR_FLOOR) / float(posteriors.max())
    return min(ratio, 1.0)


def oam_from_logits(logits: np.ndarray, target_index: int) -> float:
    """
    Same ratio computed from pre-softmax scores.

    p_target / max(p) == exp(logit_target - max(logit)) because the softmax
    normalizer cancels. Gaps beyond the float64 exponent range give
    POSTERIOR_FLOOR, never 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_target(logits.shape[-1], target_index)
    gap = float(logits[target_index] - logits.max())
    if gap == 0.0:
        return 1.0
    # exp of a tiny negative gap rounds to 1.0; keep it below the tie value
    return min(max(math.exp(gap), POSTERIOR_FLOOR), math.nextafter(1.0, 0.0))


def score_segments(
    params: ModelParams, segments: Sequence[CVSegment], batch_size: int = 16
) -> list[OamScore]:
    """Instance scores for already-cut segments, in segment order"""
    if not segments:
        return []
    inventory = params.inventory
    filterbank = filterbank_for(params.features)
    inputs = np.stack([melspec(s, params.features, filterbank) for s in segments])
    logits = predict_logits(params, inputs, batch_size)

    scores = []
    for segment, z in zip(segments, logits):
        target = inventory.index(segment.target_consonant)
        scores.append(OamScore(
            utterance_id=segment.utterance_id,
            speaker_id=segment.speaker_id,
            target_consonant=segment.target_consonant,
            onset_s=segment.onset_s,
            value=oam_from_logits(z, target),
            predicted_consonant=inventory.consonants[int(z.argmax())],
        ))
    return scores


def score_corpus(
    params: ModelParams,
    manifest: Manifest,
    threads: int = 1,
    tier_name: str = "phones",
    batch_size: int = 16,
) -> list[OamScore]:
    """Score every CV instance of a corpus with the model's inventory and window"""
    segments = segment_corpus(manifest, params.inventory, params.window_ms, tier_name, threads)
    scores = score_segments(params, segments, batch_size)
    logger.info(f"Scored {len(scores)} CV instances from {len(manifest)} utterances")
    return scores


def aggregate(scores: Sequence[OamScore]) -> list[SpeakerReport]:
    """Per-speaker reports, sorted by speaker id"""
    grouped: dict[str, dict[str, list[float]]] = {}
    for s in scores:
        grouped.setdefault(s.speaker_id, {}).setdefault(s.target_consonant, []).append(s.value)

    reports = []
    for speaker in sorted(grouped):
        by_consonant = grouped[speaker]
        means = {c: math.fsum(v) / len(v) for c, v in sorted(by_consonant.items())}
        counts = {c: len(v) for c, v in sorted(by_consonant.items())}
        level = math.fsum(means.values()) / len(means)
        reports.append(SpeakerReport(speaker, means, counts, level))
    return reports


def speaker_feature_matrix(
    reports: Sequence[SpeakerReport], consonants: Sequence[str]
) -> tuple[list[str], np.ndarray]:
    """Speaker x consonant matrix of consonant means (NaN where a consonant never occurs)"""
    column = {c: j for j, c in enumerate(consonants)}
    matrix = np.full((len(reports), len(column)), np.nan)
    for row, report in enumerate(reports):
        for consonant, mean in report.consonant_means.items():
            if consonant in column:
                matrix[row, column[consonant]] = mean
    return [r.speaker_id for r in reports], matrix


# --- CSV ---

def write_scores_csv(path: str | Path, scores: Sequence[OamScore]) -> None:
    df = pd.DataFrame(
        [
            (s.utterance_id, s.speaker_id, s.target_consonant, repr(s.onset_s), repr(s.value), s.predicted_consonant)
            for s in scores
        ],
        columns=SCORE_COLUMNS,
    )
    with atomic_output(path) as tmp:
        df.to_csv(tmp, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(scores)} scores to {path}")


def read_scores_csv(path: str | Path) -> list[OamScore]:
    path = Path(path)
    df = read_table(path, SCORE_COLUMNS)
    try:
        onsets = df["onset_s"].map(float).to_numpy(dtype=np.float64)
        values = df["oam"].map(float).to_numpy(dtype=np.float64)
    except ValueError as e:
        raise MalformedCsv(f"{path}: {e}")

    scores = []
    for row, (record, onset, value) in enumerate(zip(df.to_dict("records"), onsets, values), start=2):
        if not record["speaker_id"] or not record["consonant"]:
            raise MalformedCsv(f"{path}:{row}: empty speaker_id or consonant")
        if not math.isfinite(value):
            raise MalformedCsv(f"{path}:{row}: non-finite score")
        scores.append(OamScore(
            record["utterance_id"], record["speaker_id"], record["consonant"],
            float(onset), float(value), record["predicted"],
        ))
    return scores


def write_speaker_reports_csv(
    path: str | Path, reports: Sequence[SpeakerReport], inventory: Optional[PhoneInventory] = None
) -> None:
    """One row per speaker: consonant means (empty when absent), speaker_oam, instances"""
    if inventory is not None:
        consonants = list(inventory.consonants)
    else:
        consonants = sorted({c for r in reports for c in r.consonant_means})
    rows = [
        [r.speaker_id]
        + [repr(r.consonant_means[c]) if c in r.consonant_means else "" for c in consonants]
        + [repr(r.speaker_level_oam), r.instances]
        for r in reports
    ]
    df = pd.DataFrame(rows, columns=["speaker_id", *consonants, "speaker_oam", "instances"])
    with atomic_output(path) as tmp:
        df.to_csv(tmp, index=False, lineterminator="\n")
