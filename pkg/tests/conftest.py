"""
Pytest configuration and shared fixtures for cv-oam tests.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from app.config import get_settings
from app.corpus import AlignmentTrack, PhoneInterval, PhoneInventory, write_alignment, write_wav
from app.network import NetworkSpec

SR = 16000

# label, start_s, end_s; onsets at 0.30 (P-AA) and 0.60 (S-IY)
DEFAULT_PHONES = (
    ("SIL", 0.0, 0.2),
    ("P", 0.2, 0.3),
    ("AA", 0.3, 0.5),
    ("S", 0.5, 0.6),
    ("IY", 0.6, 0.8),
    ("SIL", 0.8, 1.0),
)


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    """Keep OAM_* variables from the developer's shell out of the tests."""
    for key in list(os.environ):
        if key.startswith("OAM_"):
            monkeypatch.delenv(key)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


# --- Inventories and specs ---

@pytest.fixture
def small_inventory():
    """Four consonant classes, two vowels."""
    return PhoneInventory(("P", "T", "S", "M"), frozenset({"AA", "IY"}))


@pytest.fixture
def reduced_spec():
    """12x10 input, 3x3 kernels, 8 filters, FC width 32, float64."""
    return NetworkSpec.reduced()


# --- Synthetic audio corpora ---

def synth_audio(phones, seed: int = 0, duration_s: float = 1.0, tone_gap_s: float = 0.0) -> np.ndarray:
    """
    Low-level noise plus a consonant-specific tone inside each consonant interval.

    With tone_gap_s > 0 the tone stops that long before the consonant ends,
    leaving only noise right before the vowel onset.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * SR))
    audio = 0.01 * rng.standard_normal(n)
    t = np.arange(n) / SR
    tones = {"P": 300.0, "T": 1500.0, "S": 5000.0, "M": 600.0}
    for label, start, end in phones:
        lo, hi = int(round(start * SR)), int(round(end * SR))
        if label in tones:
            hi = int(round((end - tone_gap_s) * SR))
            audio[lo:hi] += 0.3 * np.sin(2 * np.pi * tones[label] * t[lo:hi])
        elif label not in ("SIL", ""):
            audio[lo:hi] += 0.2 * np.sin(2 * np.pi * 200.0 * t[lo:hi])
    return np.clip(audio, -0.99, 0.99)


def write_utterance(
    directory: Path, utterance_id: str, phones=DEFAULT_PHONES, seed: int = 0, fmt: str = ".csv", tone_gap_s: float = 0.0
):
    """Write <id>.wav and its alignment; returns (wav_path, alignment_path)."""
    directory.mkdir(parents=True, exist_ok=True)
    wav_path = directory / f"{utterance_id}.wav"
    alignment_path = directory / f"{utterance_id}{fmt}"
    duration = max(end for _, _, end in phones)
    write_wav(wav_path, synth_audio(phones, seed, duration, tone_gap_s))
    intervals = tuple(PhoneInterval(label, start, end) for label, start, end in phones if label != "SIL")
    write_alignment(alignment_path, AlignmentTrack(utterance_id, intervals))
    return wav_path, alignment_path


def write_corpus(directory: Path, utterances, fmt: str = ".csv", tone_gap_s: float = 0.0) -> Path:
    """
    Write a synthetic corpus and its manifest.

    utterances: iterable of (utterance_id, speaker_id, phones).
    """
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["utterance_id,speaker_id,audio_path,alignment_path"]
    for i, (utterance_id, speaker_id, phones) in enumerate(utterances):
        wav, alignment = write_utterance(
            directory / "data", utterance_id, phones, seed=i, fmt=fmt, tone_gap_s=tone_gap_s
        )
        lines.append(f"{utterance_id},{speaker_id},data/{wav.name},data/{alignment.name}")
    manifest = directory / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def cv_phones(consonants, vowel: str = "AA", step: float = 0.2):
    """Alternating consonant/vowel intervals, one CV pair per consonant."""
    phones, t = [("SIL", 0.0, 0.1)], 0.1
    for consonant in consonants:
        phones.append((consonant, t, t + step / 2))
        phones.append((vowel, t + step / 2, t + step))
        t += step
    phones.append(("SIL", t, t + 0.1))
    return tuple(phones)


@pytest.fixture
def corpus_factory(tmp_path):
    """Callable writing a synthetic corpus under tmp_path and returning the manifest path."""
    def factory(name: str, utterances, fmt: str = ".csv", tone_gap_s: float = 0.0) -> Path:
        return write_corpus(tmp_path / name, utterances, fmt, tone_gap_s)
    return factory


@pytest.fixture
def small_corpus(corpus_factory):
    """Four utterances from two speakers, each holding P, T, S and M before a vowel."""
    utterances = [
        (f"utt{i}", f"spk{i % 2}", cv_phones(["P", "T", "S", "M"], vowel="AA" if i % 2 else "IY"))
        for i in range(4)
    ]
    return corpus_factory("small", utterances)


# --- Synthetic spectrogram datasets ---

def quadrant_dataset(n: int, seed: int, height: int = 12, width: int = 10):
    """
    Four-class spectrograms: the class is the quadrant carrying extra energy.

    Returns (inputs (n, height, width), labels (n,), utterance_ids).
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    inputs = rng.normal(0.0, 0.3, size=(n, height, width))
    h2, w2 = height // 2, width // 2
    for i, label in enumerate(labels):
        rows = slice(0, h2) if label < 2 else slice(h2, height)
        cols = slice(0, w2) if label % 2 == 0 else slice(w2, width)
        inputs[i, rows, cols] += 2.0
    utterance_ids = tuple(f"u{i // 5}" for i in range(n))
    return inputs, labels.astype(np.int64), utterance_ids


@pytest.fixture
def quadrant_data():
    return quadrant_dataset


@pytest.fixture
def make_phones():
    return cv_phones
