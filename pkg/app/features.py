"""
Log-mel front-end: Hamming framing, power spectra and a triangular mel filterbank.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd

from .config import FeatureConfig
from .exceptions import InvalidBand, InvalidWindow
from .fileio import atomic_output
from .segmenter import CVSegment

logger = logging.getLogger(__name__)

DEFAULT_FEATURES = FeatureConfig()


def hertz_to_mel(freq):
    """HTK mel scale, scalar or array"""
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hertz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    """
    Triangular filters as an (n_mels, n_fft // 2 + 1) weight matrix.

    edge_bins holds the n_mels + 2 FFT bins the triangles are built on;
    filter m rises from edge m to its peak at edge m + 1 and falls to
    edge m + 2.
    """
    weights: np.ndarray
    edge_bins: np.ndarray
    sample_rate_hz: int
    n_fft: int

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def center_bins(self) -> np.ndarray:
        return self.edge_bins[1:-1]

    @property
    def centers_hz(self) -> np.ndarray:
        return self.center_bins * self.sample_rate_hz / self.n_fft

    def apply(self, power: np.ndarray) -> np.ndarray:
        """Mel energies for (n_frames, n_bins) power spectra, as (n_mels, n_frames)"""
        return self.weights @ power.T


def build_filterbank(
    n_mels: int = 40,
    fmin: float = 100.0,
    fmax: float = 7800.0,
    sr: int = 16000,
    nfft: int = 512,
) -> MelFilterbank:
    """
    Mel filterbank with band edges equally spaced in mel between fmin and fmax.

    Edges are quantized to the nearest FFT bin so every filter peaks at
    exactly 1.0 on its center bin.
    """
    if fmin >= fmax:
        raise InvalidBand(f"fmin ({fmin} Hz) must be below fmax ({fmax} Hz)")
    if fmin < 0 or fmax > sr / 2:
        raise InvalidBand(f"band [{fmin}, {fmax}] Hz must lie within [0, {sr / 2}] Hz")

    edges_mel = np.linspace(hertz_to_mel(fmin), hertz_to_mel(fmax), n_mels + 2)
    edge_bins = np.round(mel_to_hertz(edges_mel) * nfft / sr).astype(np.int64)
    if np.any(np.diff(edge_bins) <= 0):
        raise InvalidBand(
            f"{n_mels} filters over [{fmin}, {fmax}] Hz collapse at FFT size {nfft}"
        )

    bins = np.arange(nfft // 2 + 1)
    weights = np.zeros((n_mels, bins.size), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = edge_bins[m:m + 3]
        rising = (bins - left) / (center - left)
        falling = (right - bins) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))

    weights.setflags(write=False)
    edge_bins.setflags(write=False)
    return MelFilterbank(weights, edge_bins, sr, nfft)


@lru_cache
def filterbank_for(config: FeatureConfig = DEFAULT_FEATURES) -> MelFilterbank:
    """Shared filterbank for a feature configuration"""
    return build_filterbank(
        config.n_mels, config.fmin_hz, config.fmax_hz, config.sample_rate_hz, config.n_fft
    )


def _samples(segment: CVSegment | np.ndarray) -> np.ndarray:
    if isinstance(segment, CVSegment):
        return segment.samples
    return np.asarray(segment, dtype=np.float64)


def frame_segment(
    segment: CVSegment | np.ndarray,
    config: FeatureConfig = DEFAULT_FEATURES,
) -> np.ndarray:
    """
    Hamming-windowed frames, one per frame shift, as (n_frames, frame_length).

    The segment is right-zero-padded so the last frame starting inside it
    is complete.
    """
    samples = _samples(segment)
    shift, length = config.frame_shift, config.frame_length
    if samples.ndim != 1 or samples.size == 0 or samples.size % shift:
        raise InvalidWindow(f"segment length {samples.shape} is not a multiple of the {shift}-sample shift")

    n_frames = samples.size // shift
    padded = np.zeros((n_frames - 1) * shift + length, dtype=np.float64)
    padded[:samples.size] = samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, length)[::shift]
    return frames * np.hamming(length)


def power_spectrum(frames: np.ndarray, n_fft: int = DEFAULT_FEATURES.n_fft) -> np.ndarray:
    """|DFT|^2 of zero-padded frames over the one-sided bins 0..n_fft/2"""
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2


def melspec(
    segment: CVSegment | np.ndarray,
    config: FeatureConfig = DEFAULT_FEATURES,
    filterbank: MelFilterbank | None = None,
) -> np.ndarray:
    """Natural-log mel energies, (n_mels, n_frames), floored at config.log_floor"""
    filterbank = filterbank or filterbank_for(config)
    energies = filterbank.apply(power_spectrum(frame_segment(segment, config), config.n_fft))
    return np.log(np.maximum(energies, config.log_floor))


def melspec_batch(
    segments,
    config: FeatureConfig = DEFAULT_FEATURES,
    filterbank: MelFilterbank | None = None,
) -> np.ndarray:
    """Stack of melspecs, (n_segments, n_mels, n_frames)"""
    filterbank = filterbank or filterbank_for(config)
    specs = [melspec(s, config, filterbank) for s in segments]
    if not specs:
        return np.zeros((0, config.n_mels, 0), dtype=np.float64)
    return np.stack(specs)


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    """Matrix as headerless CSV, row 0 first (lowest mel bin for spectrograms)"""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    with atomic_output(path) as tmp:
        pd.DataFrame(matrix).to_csv(tmp, header=False, index=False, float_format="%.9g", lineterminator="\n")
    logger.debug(f"Wrote {matrix.shape[0]}x{matrix.shape[1]} matrix to {path}")
