"""
CV transition segmentation around alignment-derived vowel onsets.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .config import DEFAULT_WINDOW_MS, SAMPLE_RATE_HZ
from .corpus import (
    BOUNDARY_TOLERANCE_S,
    AlignmentTrack,
    AudioClip,
    Manifest,
    ManifestEntry,
    PhoneInterval,
    PhoneInventory,
    load_alignment,
    load_wav,
)
from .exceptions import AlignmentMismatch, InvalidWindow, OamError, UsageError

logger = logging.getLogger(__name__)

ClusterPolicy = Literal["nearest", "head"]

# Shortest interval jitter may leave behind
MIN_INTERVAL_S = 1e-3


@dataclass(frozen=True)
class VowelOnset:
    time_s: float
    vowel: str
    preceding_consonant: Optional[str]


@dataclass(frozen=True, eq=False)
class CVSegment:
    """A window of audio centred on a vowel onset, labelled by its consonant"""
    utterance_id: str
    speaker_id: str
    target_consonant: str
    onset_s: float
    samples: np.ndarray
    window_ms: int = DEFAULT_WINDOW_MS

    def __post_init__(self):
        expected = self.window_ms * SAMPLE_RATE_HZ // 1000
        if self.samples.shape != (expected,):
            raise InvalidWindow(
                f"{self.utterance_id}: segment has {self.samples.shape} samples, expected {expected}"
            )


def _contiguous(prev: PhoneInterval, cur: PhoneInterval, gap_tolerance_s: float) -> bool:
    return cur.start_s - prev.end_s <= gap_tolerance_s


def find_vowel_onsets(
    track: AlignmentTrack,
    inventory: PhoneInventory,
    cluster_policy: ClusterPolicy = "nearest",
    gap_tolerance_s: float = BOUNDARY_TOLERANCE_S,
) -> list[VowelOnset]:
    """
    Vowel onsets that follow a consonant.

    A vowel interval yields an onset when the interval right before it is
    an inventory consonant ending where the vowel starts. With the `head`
    policy the segment is labelled by the first consonant of the
    contiguous consonant run instead of the nearest one.
    """
    onsets = []
    intervals = track.intervals
    for i in range(1, len(intervals)):
        prev, cur = intervals[i - 1], intervals[i]
        if not inventory.is_vowel(cur.label) or not inventory.is_consonant(prev.label):
            continue
        if not _contiguous(prev, cur, gap_tolerance_s):
            continue

        consonant = prev.label
        if cluster_policy == "head":
            j = i - 1
            while (
                j > 0
                and inventory.is_consonant(intervals[j - 1].label)
                and _contiguous(intervals[j - 1], intervals[j], gap_tolerance_s)
            ):
                j -= 1
            consonant = intervals[j].label

        onsets.append(VowelOnset(cur.start_s, cur.label, consonant))
    return onsets


def _check_window(window_ms: int) -> None:
    if window_ms % 2 or not 60 <= window_ms <= 200:
        raise InvalidWindow(f"window_ms must be even and within [60, 200], got {window_ms}")


def cut_segment(
    clip: AudioClip,
    onset: VowelOnset,
    window_ms: int = DEFAULT_WINDOW_MS,
    utterance_id: str = "",
    speaker_id: str = "",
) -> CVSegment:
    """
    Cut window_ms of audio centred on the onset, zero-padding outside the clip.

    The onset sample (rounded to the nearest sample) sits at index
    window_ms * 8 of the output.
    """
    _check_window(window_ms)
    n = window_ms * clip.sample_rate_hz // 1000
    center = int(round(onset.time_s * clip.sample_rate_hz))
    start = center - n // 2

    window = np.zeros(n, dtype=np.float64)
    src_lo, src_hi = max(start, 0), min(start + n, clip.samples.size)
    if src_hi > src_lo:
        window[src_lo - start:src_hi - start] = clip.samples[src_lo:src_hi]

    return CVSegment(
        utterance_id=utterance_id,
        speaker_id=speaker_id,
        target_consonant=onset.preceding_consonant,
        onset_s=onset.time_s,
        samples=window,
        window_ms=window_ms,
    )


def _segment_utterance(
    entry: ManifestEntry,
    inventory: PhoneInventory,
    window_ms: int,
    tier_name: str,
    cluster_policy: ClusterPolicy,
) -> list[CVSegment]:
    try:
        clip = load_wav(entry.audio_path)
        track = load_alignment(entry.alignment_path, tier_name)
        onsets = find_vowel_onsets(track, inventory, cluster_policy)
        segments = [
            cut_segment(clip, onset, window_ms, entry.utterance_id, entry.speaker_id)
            for onset in onsets
        ]
    except OamError as e:
        e.add_note(f"utterance_id={entry.utterance_id}")
        raise
    logger.debug(f"{entry.utterance_id}: {len(segments)} CV segments")
    return segments


def segment_corpus(
    manifest: Manifest,
    inventory: PhoneInventory,
    window_ms: int = DEFAULT_WINDOW_MS,
    tier_name: str = "phones",
    threads: int = 1,
    cluster_policy: ClusterPolicy = "nearest",
) -> list[CVSegment]:
    """
    Segments of every manifest utterance, in manifest order then onset time.

    Utterances are processed on `threads` workers; results are merged in
    manifest order so the output does not depend on the thread count.
    """
    _check_window(window_ms)

    def work(entry: ManifestEntry) -> list[CVSegment]:
        return _segment_utterance(entry, inventory, window_ms, tier_name, cluster_policy)

    if threads > 1 and len(manifest) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_utterance = list(pool.map(work, manifest.entries))
    else:
        per_utterance = [work(entry) for entry in manifest]

    segments = [segment for batch in per_utterance for segment in batch]
    logger.info(f"Segmented {len(manifest)} utterances into {len(segments)} CV windows ({window_ms} ms)")
    return segments


def jitter_onsets(
    track: AlignmentTrack,
    sigma_ms: float,
    seed: int | Sequence[int],
    inventory: Optional[PhoneInventory] = None,
) -> AlignmentTrack:
    """
    Shift every vowel-initial boundary by Gaussian noise (std sigma_ms).

    When the vowel is contiguous with the interval before it, that
    interval's end moves with the boundary. Shifts are clamped so every
    interval keeps at least MIN_INTERVAL_S; sigma_ms == 0 returns the
    track unchanged.
    """
    if sigma_ms < 0:
        raise UsageError(f"sigma_ms must be non-negative, got {sigma_ms}")
    if sigma_ms == 0:
        return track

    inventory = inventory or PhoneInventory()
    rng = np.random.default_rng(seed)
    intervals = list(track.intervals)
    clamped = 0

    for i, cur in enumerate(intervals):
        if not inventory.is_vowel(cur.label):
            continue
        boundary = cur.start_s + rng.normal(0.0, sigma_ms / 1000.0)
        prev = intervals[i - 1] if i > 0 else None
        joined = prev is not None and _contiguous(prev, cur, BOUNDARY_TOLERANCE_S)

        if joined:
            lower = prev.start_s + MIN_INTERVAL_S
        elif prev is not None:
            lower = prev.end_s
        else:
            lower = 0.0
        upper = cur.end_s - MIN_INTERVAL_S
        if lower > upper:
            continue
        if not lower <= boundary <= upper:
            clamped += 1
            boundary = min(max(boundary, lower), upper)

        intervals[i] = PhoneInterval(cur.label, boundary, cur.end_s)
        if joined:
            intervals[i - 1] = PhoneInterval(prev.label, prev.start_s, boundary)

    if clamped:
        logger.warning(f"{track.utterance_id}: {clamped} jittered boundaries clamped")
    return AlignmentTrack(track.utterance_id, tuple(intervals))


@dataclass(frozen=True)
class AlignmentErrorStats:
    mean_ms: float
    std_ms: float
    n: int

    def to_dict(self) -> dict:
        return {"mean_ms": self.mean_ms, "std_ms": self.std_ms, "n": self.n}


def onset_differences_ms(
    reference: AlignmentTrack,
    hypothesis: AlignmentTrack,
    inventory: Optional[PhoneInventory] = None,
) -> list[float]:
    """Absolute onset differences between two alignments of one utterance"""
    inventory = inventory or PhoneInventory()
    ref = find_vowel_onsets(reference, inventory)
    hyp = find_vowel_onsets(hypothesis, inventory)
    if len(ref) != len(hyp):
        raise AlignmentMismatch(
            f"{reference.utterance_id}: {len(ref)} reference onsets vs {len(hyp)} hypothesis onsets"
        )
    diffs = []
    for a, b in zip(ref, hyp):
        if (a.vowel, a.preceding_consonant) != (b.vowel, b.preceding_consonant):
            raise AlignmentMismatch(
                f"{reference.utterance_id}: onset {a.preceding_consonant}-{a.vowel} "
                f"matched against {b.preceding_consonant}-{b.vowel}"
            )
        diffs.append(abs(a.time_s - b.time_s) * 1000.0)
    return diffs


def _stats(diffs: Sequence[float]) -> AlignmentErrorStats:
    if not diffs:
        return AlignmentErrorStats(0.0, 0.0, 0)
    mean = math.fsum(diffs) / len(diffs)
    std = math.sqrt(math.fsum((d - mean) ** 2 for d in diffs) / len(diffs))
    return AlignmentErrorStats(mean, std, len(diffs))


def alignment_error(
    reference: AlignmentTrack,
    hypothesis: AlignmentTrack,
    inventory: Optional[PhoneInventory] = None,
) -> AlignmentErrorStats:
    """Mean and standard deviation of vowel-onset differences, in ms"""
    return _stats(onset_differences_ms(reference, hypothesis, inventory))


def alignment_error_corpus(
    reference: Manifest,
    hypothesis: Manifest,
    inventory: Optional[PhoneInventory] = None,
    tier_name: str = "phones",
) -> AlignmentErrorStats:
    """Pooled onset error over utterances present in both manifests"""
    hyp_by_id = {e.utterance_id: e for e in hypothesis}
    diffs: list[float] = []
    matched = 0
    for entry in reference:
        other = hyp_by_id.get(entry.utterance_id)
        if other is None:
            continue
        try:
            diffs += onset_differences_ms(
                load_alignment(entry.alignment_path, tier_name),
                load_alignment(other.alignment_path, tier_name),
                inventory,
            )
        except OamError as e:
            e.add_note(f"utterance_id={entry.utterance_id}")
            raise
        matched += 1
    if not matched:
        raise AlignmentMismatch("no utterance ids shared by the two manifests")
    logger.info(f"Compared onsets of {matched} utterances ({len(diffs)} onsets)")
    return _stats(diffs)
