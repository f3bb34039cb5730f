"""
Guided-backpropagation saliency maps for the consonant classifier.
"""

import logging

import numpy as np

from .exceptions import InvalidClass
from .network import ModelParams, backprop, forward

logger = logging.getLogger(__name__)


def _check_target(params: ModelParams, target_class: int) -> None:
    if not 0 <= target_class < params.n_classes:
        raise InvalidClass(f"target class {target_class} outside [0, {params.n_classes})")


def input_gradient(
    params: ModelParams, spectrogram: np.ndarray, target_class: int, guided: bool = True
) -> np.ndarray:
    """Gradient of the target pre-softmax score with respect to the (H, W) input"""
    _check_target(params, target_class)
    _, cache = forward(params, spectrogram)
    dlogits = np.zeros_like(cache.logits)
    dlogits[:, target_class] = 1.0
    _, dx = backprop(params, cache, dlogits, guided=guided, need_input=True)
    return dx[0]


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero map stays zero, a constant one becomes ones"""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values) if hi == 0 else np.ones_like(values)
    return (values - lo) / (hi - lo)


def saliency(params: ModelParams, spectrogram: np.ndarray, target_class: int) -> np.ndarray:
    """
    Normalized |guided gradient| of the target score over the input.

    The map is what reaches the input through the first convolutional
    layer, so it has the spectrogram's (n_mels, n_frames) shape.
    """
    grad = input_gradient(params, spectrogram, target_class, guided=True)
    saliency_map = normalize_map(np.abs(grad))
    logger.debug(f"Saliency for class {target_class}: peak at {np.unravel_index(saliency_map.argmax(), saliency_map.shape)}")
    return saliency_map
