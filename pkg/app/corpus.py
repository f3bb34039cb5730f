"""
Corpus ingestion: audio, alignments, manifests, ratings and phone inventories.

All loaders are pure functions of file contents and return immutable
records that can be shared across threads.
"""

import json
import logging
import math
import re
import struct
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator
from scipy.io import wavfile

from .config import SAMPLE_RATE_HZ
from .exceptions import (
    CorruptFile,
    DuplicateId,
    InvalidInventory,
    MalformedCsv,
    MalformedTextGrid,
    MissingFile,
    MissingTier,
    NonMonotonicIntervals,
    UnsupportedFormat,
)
from .fileio import atomic_output

logger = logging.getLogger(__name__)

SILENCE_LABELS = frozenset({"", "SIL", "SP", "SPN"})
STRESS_DIGITS = "012"
BOUNDARY_TOLERANCE_S = 1e-6

DEFAULT_CONSONANTS = (
    "B", "D", "G", "P", "T", "K",
    "Z", "V", "S", "SH", "F", "HH", "TH", "DH",
    "CH", "JH",
    "N", "M", "NG",
    "L", "R",
)
DEFAULT_VOWELS = frozenset({
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER",
    "EY", "IH", "IY", "OW", "OY", "UH", "UW",
})


# --- Labels ---

def normalize_label(label: str) -> Optional[str]:
    """
    Canonical ARPABET form of an aligner label.

    Upper-cases, strips trailing stress digits and returns None for
    silence labels. normalize_label(normalize_label(x)) == normalize_label(x).
    """
    cleaned = label.strip().upper().rstrip(STRESS_DIGITS)
    if cleaned in SILENCE_LABELS:
        return None
    return cleaned


# --- Audio ---

@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono 16 kHz audio with samples scaled to [-1, 1]"""
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise UnsupportedFormat(f"sample rate {self.sample_rate_hz} Hz, expected {SAMPLE_RATE_HZ}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise CorruptFile("audio must be a non-empty mono signal")
        if np.max(np.abs(self.samples)) > 1.0:
            raise CorruptFile("audio samples exceed [-1, 1]")
        self.samples.setflags(write=False)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _declared_data_size(path: Path) -> Optional[int]:
    """Byte size announced by the RIFF `data` chunk header"""
    with open(path, "rb") as fh:
        fh.seek(12)
        while True:
            header = fh.read(8)
            if len(header) < 8:
                return None
            chunk_id, size = struct.unpack("<4sI", header)
            if chunk_id == b"data":
                return size
            fh.seek(size + (size & 1), 1)


def load_wav(path: str | Path) -> AudioClip:
    """
    Load a 16-bit PCM mono 16 kHz WAV file.

    Raises:
        MissingFile: path does not exist
        UnsupportedFormat: not RIFF/WAVE, wrong rate, channels or encoding
        CorruptFile: unreadable or truncated data chunk
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"audio file not found: {path}")

    with open(path, "rb") as fh:
        magic = fh.read(12)
    if len(magic) < 12 or magic[:4] != b"RIFF" or magic[8:12] != b"WAVE":
        raise UnsupportedFormat(f"{path}: not a RIFF/WAVE file")

    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error) as e:
        raise CorruptFile(f"{path}: {e}")

    if rate != SAMPLE_RATE_HZ:
        raise UnsupportedFormat(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE_HZ}")
    if data.ndim != 1:
        raise UnsupportedFormat(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype != np.int16:
        raise UnsupportedFormat(f"{path}: sample type {data.dtype}, expected 16-bit PCM")

    declared = _declared_data_size(path)
    if declared is not None and data.size * 2 < declared:
        raise CorruptFile(f"{path}: data chunk truncated ({data.size * 2} of {declared} bytes)")
    if data.size == 0:
        raise CorruptFile(f"{path}: no samples")

    return AudioClip(samples=data.astype(np.float64) / 32768.0, sample_rate_hz=rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int = SAMPLE_RATE_HZ) -> None:
    """Write samples in [-1, 1] as 16-bit PCM"""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with atomic_output(path) as tmp:
        wavfile.write(tmp, sample_rate_hz, pcm.astype(np.int16))


# --- Alignments ---

@dataclass(frozen=True)
class PhoneInterval:
    label: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("phone label must be non-empty")
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"invalid interval {self.label}@({self.start_s}, {self.end_s})")


@dataclass(frozen=True)
class AlignmentTrack:
    """Time-ordered, non-overlapping phone intervals of one utterance"""
    utterance_id: str
    intervals: tuple[PhoneInterval, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(self.intervals))
        for prev, cur in zip(self.intervals, self.intervals[1:]):
            if cur.start_s < prev.start_s or prev.end_s > cur.start_s + BOUNDARY_TOLERANCE_S:
                raise NonMonotonicIntervals(
                    f"{self.utterance_id}: {prev.label}@{prev.start_s} overlaps {cur.label}@{cur.start_s}"
                )

    def __len__(self) -> int:
        return len(self.intervals)

    def __iter__(self) -> Iterator[PhoneInterval]:
        return iter(self.intervals)


# Praat text format tokens: quoted strings ("" escapes a quote), existence
# flags, numbers. Keys, bracketed indices and punctuation are discarded,
# which lets one reader handle both the long and the short variant.
_TEXTGRID_TOKEN = re.compile(
    r'"((?:[^"]|"")*)"'
    r"|(<exists>|<absent>)"
    r"|\[[^\]]*\]"
    r"|[A-Za-z_][\w?]*"
    r"|([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|\S"
)


class _TokenStream:
    def __init__(self, text: str, source: Path):
        self.source = source
        self.tokens: list[tuple[str, str]] = []
        for match in _TEXTGRID_TOKEN.finditer(text):
            string, flag, number = match.groups()
            if string is not None:
                self.tokens.append(("str", string.replace('""', '"')))
            elif flag is not None:
                self.tokens.append(("flag", flag))
            elif number is not None:
                self.tokens.append(("num", number))
        self.pos = 0

    def _next(self, kind: str) -> str:
        if self.pos >= len(self.tokens):
            raise MalformedTextGrid(f"{self.source}: unexpected end of file")
        got_kind, value = self.tokens[self.pos]
        if got_kind != kind:
            raise MalformedTextGrid(f"{self.source}: expected {kind}, found {value!r}")
        self.pos += 1
        return value

    def string(self) -> str:
        return self._next("str")

    def number(self) -> float:
        value = float(self._next("num"))
        if not math.isfinite(value):
            raise MalformedTextGrid(f"{self.source}: non-finite number")
        return value

    def count(self) -> int:
        value = self.number()
        if value < 0 or value != int(value):
            raise MalformedTextGrid(f"{self.source}: invalid size {value}")
        return int(value)

    def flag(self) -> Optional[str]:
        if self.pos < len(self.tokens) and self.tokens[self.pos][0] == "flag":
            self.pos += 1
            return self.tokens[self.pos - 1][1]
        return None


def _normalized_intervals(
    raw: Sequence[tuple[float, float, str]],
) -> list[PhoneInterval]:
    intervals = []
    for start, end, text in raw:
        label = normalize_label(text)
        if label is None or end <= start:
            continue
        intervals.append(PhoneInterval(label, float(start), float(end)))
    return intervals


def parse_textgrid(path: str | Path, tier_name: str) -> AlignmentTrack:
    """
    Read one IntervalTier of a Praat TextGrid (long or short text form).

    Silence intervals are dropped, labels upper-cased and stress digits
    stripped. The utterance id is the file stem.

    Raises:
        MissingTier: no IntervalTier called `tier_name`
        MalformedTextGrid: unparsable tokens or inconsistent xmin/xmax
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"alignment file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8-sig")
    except UnicodeDecodeError as e:
        raise MalformedTextGrid(f"{path}: not UTF-8 ({e})")

    stream = _TokenStream(text, path)
    if stream.string() != "ooTextFile" or stream.string() != "TextGrid":
        raise MalformedTextGrid(f"{path}: not a TextGrid text file")
    grid_min, grid_max = stream.number(), stream.number()
    if grid_min > grid_max:
        raise MalformedTextGrid(f"{path}: xmin {grid_min} > xmax {grid_max}")

    found: Optional[list[tuple[float, float, str]]] = None
    names = []
    if stream.flag() != "<absent>":
        for _ in range(stream.count()):
            tier_class, name = stream.string(), stream.string()
            tier_min, tier_max = stream.number(), stream.number()
            if tier_min > tier_max:
                raise MalformedTextGrid(f"{path}: tier {name!r} xmin > xmax")
            n = stream.count()
            names.append(name)

            if tier_class == "IntervalTier":
                raw = []
                prev_end = tier_min
                for _ in range(n):
                    start, end, mark = stream.number(), stream.number(), stream.string()
                    if start > end or start < 0:
                        raise MalformedTextGrid(f"{path}: invalid interval ({start}, {end})")
                    if start < prev_end - BOUNDARY_TOLERANCE_S or end > tier_max + BOUNDARY_TOLERANCE_S:
                        raise MalformedTextGrid(f"{path}: interval ({start}, {end}) out of order in {name!r}")
                    prev_end = end
                    raw.append((start, end, mark))
                if name == tier_name and found is None:
                    found = raw
            elif tier_class == "TextTier":
                for _ in range(n):
                    stream.number()
                    stream.string()
            else:
                raise MalformedTextGrid(f"{path}: unknown tier class {tier_class!r}")

    if found is None:
        raise MissingTier(f"{path}: no IntervalTier named {tier_name!r} (tiers: {names})")

    return AlignmentTrack(path.stem, tuple(_normalized_intervals(found)))


def _praat_string(value: str) -> str:
    return '"' + value.replace('"', '""') + '"'


def _filled_intervals(track: AlignmentTrack) -> list[tuple[float, float, str]]:
    """Track intervals with empty intervals filling the gaps, as Praat expects"""
    rows = []
    cursor = 0.0
    for interval in track:
        if interval.start_s > cursor:
            rows.append((cursor, interval.start_s, ""))
        rows.append((interval.start_s, interval.end_s, interval.label))
        cursor = interval.end_s
    return rows


def write_textgrid(
    path: str | Path,
    track: AlignmentTrack,
    tier_name: str = "phones",
    short: bool = False,
) -> None:
    """Write a single-tier TextGrid that parse_textgrid reads back exactly"""
    rows = _filled_intervals(track)
    xmax = rows[-1][1] if rows else 0.0

    if short:
        lines = ['File type = "ooTextFile"', 'Object class = "TextGrid"', "",
                 "0", repr(xmax), "<exists>", "1",
                 '"IntervalTier"', _praat_string(tier_name), "0", repr(xmax), str(len(rows))]
        for start, end, mark in rows:
            lines += [repr(start), repr(end), _praat_string(mark)]
    else:
        lines = ['File type = "ooTextFile"', 'Object class = "TextGrid"', "",
                 "xmin = 0", f"xmax = {xmax!r}", "tiers? <exists>", "size = 1", "item []:",
                 "    item [1]:",
                 '        class = "IntervalTier"',
                 f"        name = {_praat_string(tier_name)}",
                 "        xmin = 0",
                 f"        xmax = {xmax!r}",
                 f"        intervals: size = {len(rows)}"]
        for i, (start, end, mark) in enumerate(rows, start=1):
            lines += [f"        intervals [{i}]:",
                      f"            xmin = {start!r}",
                      f"            xmax = {end!r}",
                      f"            text = {_praat_string(mark)}"]

    with atomic_output(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_alignment_csv(path: str | Path) -> AlignmentTrack:
    """
    Read a `phone,start_s,end_s` alignment CSV.

    Rows are normalized like TextGrid labels and sorted by start time
    before validation.

    Raises:
        MalformedCsv: missing columns, unparsable numbers, empty intervals
        NonMonotonicIntervals: overlapping intervals after sorting
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"alignment file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedCsv(f"{path}: {e}")

    missing = {"phone", "start_s", "end_s"} - set(df.columns)
    if missing:
        raise MalformedCsv(f"{path}: missing column(s) {sorted(missing)}")

    try:
        starts = df["start_s"].map(float).to_numpy(dtype=np.float64)
        ends = df["end_s"].map(float).to_numpy(dtype=np.float64)
    except ValueError as e:
        raise MalformedCsv(f"{path}: {e}")

    intervals = []
    for row, (phone, start, end) in enumerate(zip(df["phone"], starts, ends), start=2):
        label = normalize_label(phone)
        if label is None:
            continue
        if not (math.isfinite(start) and math.isfinite(end)) or start < 0 or start >= end:
            raise MalformedCsv(f"{path}:{row}: invalid interval ({start}, {end})")
        intervals.append(PhoneInterval(label, float(start), float(end)))

    intervals.sort(key=lambda interval: interval.start_s)
    return AlignmentTrack(path.stem, tuple(intervals))


def write_alignment_csv(path: str | Path, track: AlignmentTrack) -> None:
    df = pd.DataFrame(
        [(i.label, repr(i.start_s), repr(i.end_s)) for i in track],
        columns=["phone", "start_s", "end_s"],
    )
    with atomic_output(path) as tmp:
        df.to_csv(tmp, index=False, lineterminator="\n")


def load_alignment(path: str | Path, tier_name: str = "phones") -> AlignmentTrack:
    """Dispatch on extension: .TextGrid or .csv"""
    path = Path(path)
    if path.suffix.lower() == ".textgrid":
        return parse_textgrid(path, tier_name)
    if path.suffix.lower() == ".csv":
        return parse_alignment_csv(path)
    raise UnsupportedFormat(f"{path}: unknown alignment format {path.suffix!r}")


def write_alignment(path: str | Path, track: AlignmentTrack, tier_name: str = "phones") -> None:
    path = Path(path)
    if path.suffix.lower() == ".textgrid":
        write_textgrid(path, track, tier_name)
    else:
        write_alignment_csv(path, track)


# --- Inventory ---

class InventoryFile(BaseModel):
    consonants: list[str]
    vowels: list[str]


@dataclass(frozen=True)
class PhoneInventory:
    """Consonant classes (ordered, defines the CNN output index) and vowels"""
    consonants: tuple[str, ...] = DEFAULT_CONSONANTS
    vowels: frozenset[str] = DEFAULT_VOWELS
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "consonants", tuple(self.consonants))
        object.__setattr__(self, "vowels", frozenset(self.vowels))
        if not self.consonants or not self.vowels:
            raise InvalidInventory("inventory needs at least one consonant and one vowel")
        if len(set(self.consonants)) != len(self.consonants):
            raise InvalidInventory("duplicate consonant symbols")
        overlap = set(self.consonants) & self.vowels
        if overlap:
            raise InvalidInventory(f"symbols listed as both consonant and vowel: {sorted(overlap)}")
        for symbol in (*self.consonants, *self.vowels):
            if normalize_label(symbol) != symbol:
                raise InvalidInventory(f"symbol {symbol!r} is not in normalized ARPABET form")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.consonants)})

    def __len__(self) -> int:
        return len(self.consonants)

    def index(self, consonant: str) -> int:
        return self._index[consonant]

    def is_consonant(self, label: str) -> bool:
        return label in self._index

    def is_vowel(self, label: str) -> bool:
        return label in self.vowels

    def to_dict(self) -> dict:
        return {"consonants": list(self.consonants), "vowels": sorted(self.vowels)}


def load_inventory(path: str | Path) -> PhoneInventory:
    """Read a JSON inventory file `{"consonants": [...], "vowels": [...]}`"""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"inventory file not found: {path}")
    try:
        raw = InventoryFile.model_validate_json(path.read_text(encoding="utf-8"))
    except (ValidationError, json.JSONDecodeError) as e:
        raise InvalidInventory(f"{path}: {e}")
    return PhoneInventory(tuple(raw.consonants), frozenset(raw.vowels))


# --- Manifest and ratings ---

class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    utterance_id: str
    speaker_id: str
    audio_path: Path
    alignment_path: Path

    @field_validator("utterance_id", "speaker_id")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("must be non-empty")
        return value


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)


class RatingEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    speaker_id: str
    rating: float

    @field_validator("rating")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("rating must be finite")
        return value


@dataclass(frozen=True)
class RatingTable:
    entries: tuple[RatingEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def as_dict(self) -> dict[str, float]:
        return {e.speaker_id: e.rating for e in self.entries}

    def join(self, values_by_speaker: Mapping[str, float]) -> list[tuple[str, float, float]]:
        """(speaker_id, rating, value) for speakers present in both tables"""
        return [
            (e.speaker_id, e.rating, values_by_speaker[e.speaker_id])
            for e in self.entries
            if e.speaker_id in values_by_speaker
        ]


def read_table(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    if not path.is_file():
        raise MissingFile(f"file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedCsv(f"{path}: {e}")
    missing = set(columns) - set(df.columns)
    if missing:
        raise MalformedCsv(f"{path}: missing column(s) {sorted(missing)}")
    return df


def _check_unique(path: Path, ids: Sequence[str], what: str) -> None:
    seen = set()
    for value in ids:
        if value in seen:
            raise DuplicateId(f"{path}: duplicate {what} {value!r}")
        seen.add(value)


def load_manifest(path: str | Path) -> Manifest:
    """
    Read `utterance_id,speaker_id,audio_path,alignment_path`.

    Relative paths are resolved against the manifest's directory and must
    exist at load time.
    """
    path = Path(path)
    df = read_table(path, ["utterance_id", "speaker_id", "audio_path", "alignment_path"])
    base = path.parent

    entries = []
    for row, record in enumerate(df.to_dict("records"), start=2):
        try:
            entry = ManifestEntry.model_validate(record)
        except ValidationError as e:
            raise MalformedCsv(f"{path}:{row}: {e}")
        entry = entry.model_copy(update={
            "audio_path": base / entry.audio_path,
            "alignment_path": base / entry.alignment_path,
        })
        for file in (entry.audio_path, entry.alignment_path):
            if not file.is_file():
                raise MissingFile(f"{path}:{row}: {file} does not exist")
        entries.append(entry)

    _check_unique(path, [e.utterance_id for e in entries], "utterance_id")
    logger.info(f"Loaded manifest {path} with {len(entries)} utterances")
    return Manifest(tuple(entries))


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    df = pd.DataFrame(
        [(e.utterance_id, e.speaker_id, str(e.audio_path), str(e.alignment_path)) for e in manifest],
        columns=["utterance_id", "speaker_id", "audio_path", "alignment_path"],
    )
    with atomic_output(path) as tmp:
        df.to_csv(tmp, index=False, lineterminator="\n")


def load_ratings(path: str | Path) -> RatingTable:
    """Read `speaker_id,rating`; speaker ids must be unique, ratings finite"""
    path = Path(path)
    df = read_table(path, ["speaker_id", "rating"])
    entries = []
    for row, record in enumerate(df[["speaker_id", "rating"]].to_dict("records"), start=2):
        try:
            entries.append(RatingEntry.model_validate(record))
        except ValidationError as e:
            raise MalformedCsv(f"{path}:{row}: {e}")
    _check_unique(path, [e.speaker_id for e in entries], "speaker_id")
    return RatingTable(tuple(entries))
