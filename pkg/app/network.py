"""
Consonant classifier CNN in numpy.

Architecture: conv -> act -> maxpool -> conv -> act -> maxpool -> flatten
-> fc_layers x (dense -> act) -> dense -> softmax. Tensors are NHWC with
the mel axis as height and the frame axis as width.

Layer primitives are exposed as plain functions so they can be checked
against loop implementations and finite differences.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, field_validator

from .config import DEFAULT_WINDOW_MS, FeatureConfig
from .corpus import PhoneInventory
from .exceptions import ShapeMismatch

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
# Smallest normal float64; posteriors never drop below it
POSTERIOR_FLOOR = float(np.finfo(np.float64).tiny)


class NetworkSpec(BaseModel):
    """Layer geometry; the defaults are the 40x32 production network"""

    model_config = ConfigDict(frozen=True)

    input_height: int = 40
    input_width: int = 32
    conv1_kernel: tuple[int, int] = (9, 5)
    conv2_kernel: tuple[int, int] = (5, 3)
    filters: int = 64
    pool_size: int = 2
    pool_stride: int = 1
    fc_width: int = 1024
    fc_layers: int = 3
    activation: Literal["relu", "identity"] = "relu"
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("input_height", "input_width", "filters", "pool_size", "pool_stride", "fc_width", "fc_layers")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @classmethod
    def reduced(cls, **overrides) -> "NetworkSpec":
        """Small float64 network for gradient checks and quick tests"""
        values = dict(
            input_height=12, input_width=10, conv1_kernel=(3, 3), conv2_kernel=(3, 3),
            filters=8, fc_width=32, dtype="float64",
        )
        values.update(overrides)
        return cls(**values)

    def for_input(self, height: int, width: int) -> "NetworkSpec":
        return self.model_copy(update={"input_height": height, "input_width": width})

    def _pool_out(self, n: int) -> int:
        return (n - self.pool_size) // self.pool_stride + 1

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Spatial (height, width) after each convolutional stage"""
        h, w = self.input_height, self.input_width
        shapes = {}
        for name, (kh, kw) in (("conv1", self.conv1_kernel), ("conv2", self.conv2_kernel)):
            h, w = h - kh + 1, w - kw + 1
            shapes[name] = (h, w)
            h, w = self._pool_out(h), self._pool_out(w)
            shapes[name.replace("conv", "pool")] = (h, w)
            if h <= 0 or w <= 0:
                raise ShapeMismatch(
                    f"input {self.input_height}x{self.input_width} is too small for the network ({name})"
                )
        return shapes

    @property
    def flatten_dim(self) -> int:
        h, w = self.layer_shapes()["pool2"]
        return h * w * self.filters

    def param_shapes(self, n_classes: int) -> dict[str, tuple[int, ...]]:
        """Tensor names and shapes in storage order"""
        (k1h, k1w), (k2h, k2w) = self.conv1_kernel, self.conv2_kernel
        shapes = {
            "conv1_w": (k1h, k1w, 1, self.filters),
            "conv1_b": (self.filters,),
            "conv2_w": (k2h, k2w, self.filters, self.filters),
            "conv2_b": (self.filters,),
        }
        width_in = self.flatten_dim
        for k in range(1, self.fc_layers + 1):
            shapes[f"fc{k}_w"] = (width_in, self.fc_width)
            shapes[f"fc{k}_b"] = (self.fc_width,)
            width_in = self.fc_width
        shapes["out_w"] = (width_in, n_classes)
        shapes["out_b"] = (n_classes,)
        return shapes


@dataclass(eq=False)
class ModelParams:
    """Weights plus the metadata needed to score new audio with them"""
    spec: NetworkSpec
    inventory: PhoneInventory
    tensors: dict[str, np.ndarray]
    window_ms: int = DEFAULT_WINDOW_MS
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        self.check()

    @property
    def n_classes(self) -> int:
        return len(self.inventory)

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def check(self) -> None:
        expected = self.spec.param_shapes(self.n_classes)
        if list(self.tensors) != list(expected):
            raise ShapeMismatch(f"tensor names {list(self.tensors)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec, self.inventory, {k: v.copy() for k, v in self.tensors.items()},
            self.window_ms, self.features,
        )


def init_params(
    spec: NetworkSpec,
    inventory: PhoneInventory,
    window_ms: int = DEFAULT_WINDOW_MS,
    seed: int | np.random.Generator = 42,
    features: Optional[FeatureConfig] = None,
) -> ModelParams:
    """Fan-in scaled normal weights (std = sqrt(2 / fan_in)), zero biases"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = np.dtype(spec.dtype)
    tensors = {}
    for name, shape in spec.param_shapes(len(inventory)).items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        tensors[name] = rng.standard_normal(shape, dtype=dtype) * dtype.type(np.sqrt(2.0 / fan_in))
    params = ModelParams(spec, inventory, tensors, window_ms, features or FeatureConfig())
    logger.info(f"Initialized {params.n_parameters} parameters for {params.n_classes} classes")
    return params


# --- Layer primitives ---

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid stride-1 convolution (cross-correlation): (B,H,W,C) x (kh,kw,C,F) -> (B,H',W',F)"""
    kh, kw = w.shape[:2]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (B,H',W',C,kh,kw)
    return np.tensordot(windows, w, axes=([3, 4, 5], [2, 0, 1])) + b


def conv2d_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray, need_input: bool = True
) -> tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of a valid stride-1 convolution"""
    kh, kw = w.shape[:2]
    out_h, out_w = dout.shape[1:3]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    dw = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    if not need_input:
        return None, dw, db
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + out_h, j:j + out_w, :] += dout @ w[i, j].T
    return dx, dw, db


def maxpool_forward(x: np.ndarray, size: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid max pooling; returns the output and the row-major argmax inside each window"""
    windows = sliding_window_view(x, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    flat = windows.reshape(*windows.shape[:4], size * size)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(
    dout: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...], size: int, stride: int
) -> np.ndarray:
    """Route each output gradient to the position that won its window"""
    dx = np.zeros(input_shape, dtype=dout.dtype)
    out_h, out_w = dout.shape[1:3]
    for p in range(size):
        for q in range(size):
            routed = np.where(argmax == p * size + q, dout, 0)
            dx[:, p:p + stride * (out_h - 1) + 1:stride, q:q + stride * (out_w - 1) + 1:stride, :] += routed
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, floored at POSTERIOR_FLOOR so every posterior stays positive"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return np.maximum(e / e.sum(axis=-1, keepdims=True), POSTERIOR_FLOOR)


def loss(labels: np.ndarray, probs: np.ndarray) -> float:
    """Categorical cross-entropy summed over the batch; labels are class indices"""
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:1]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {probs.shape[0]} posteriors")
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return z if activation == "identity" else np.maximum(z, 0)


def _activation_backward(d: np.ndarray, z: np.ndarray, activation: str, guided: bool) -> np.ndarray:
    if activation == "identity":
        return d
    d = d * (z > 0)
    if guided:
        d = d * (d > 0)
    return d


# --- Forward / backward ---

@dataclass
class ForwardCache:
    x: np.ndarray
    conv1_z: np.ndarray
    conv1_a: np.ndarray
    pool1_arg: np.ndarray
    pool1: np.ndarray
    conv2_z: np.ndarray
    conv2_a: np.ndarray
    pool2_arg: np.ndarray
    pool2: np.ndarray
    fc_inputs: list[np.ndarray]
    fc_z: list[np.ndarray]
    hidden: np.ndarray
    logits: np.ndarray


def _as_batch(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs)
    if x.ndim == 2:
        x = x[None]
    expected = (params.spec.input_height, params.spec.input_width)
    if x.ndim != 3 or x.shape[1:] != expected:
        raise ShapeMismatch(f"input shape {np.shape(inputs)} does not match the network's {expected}")
    return x.astype(params.spec.dtype, copy=False)[..., None]


def forward(params: ModelParams, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """
    Posteriors (B, K) for a batch (B, H, W) or a single (H, W) spectrogram.

    Softmax runs in float64 regardless of the parameter dtype.
    """
    spec, t = params.spec, params.tensors
    x = _as_batch(params, inputs)

    conv1_z = conv2d_forward(x, t["conv1_w"], t["conv1_b"])
    conv1_a = _activate(conv1_z, spec.activation)
    pool1, pool1_arg = maxpool_forward(conv1_a, spec.pool_size, spec.pool_stride)

    conv2_z = conv2d_forward(pool1, t["conv2_w"], t["conv2_b"])
    conv2_a = _activate(conv2_z, spec.activation)
    pool2, pool2_arg = maxpool_forward(conv2_a, spec.pool_size, spec.pool_stride)

    h = pool2.reshape(pool2.shape[0], -1)
    fc_inputs, fc_z = [], []
    for k in range(1, spec.fc_layers + 1):
        fc_inputs.append(h)
        z = h @ t[f"fc{k}_w"] + t[f"fc{k}_b"]
        fc_z.append(z)
        h = _activate(z, spec.activation)

    logits = h @ t["out_w"] + t["out_b"]
    probs = softmax(logits.astype(np.float64))
    cache = ForwardCache(
        x, conv1_z, conv1_a, pool1_arg, pool1, conv2_z, conv2_a, pool2_arg, pool2,
        fc_inputs, fc_z, h, logits,
    )
    return probs, cache


def backprop(
    params: ModelParams,
    cache: ForwardCache,
    dlogits: np.ndarray,
    guided: bool = False,
    need_input: bool = False,
) -> tuple[dict[str, np.ndarray], Optional[np.ndarray]]:
    """
    Push a logit gradient back through the network.

    Returns parameter gradients and, when need_input is set, the gradient
    with respect to the (B, H, W) input. With guided set, every ReLU
    passes gradient only where its forward input and the incoming
    gradient are both positive.
    """
    spec, t = params.spec, params.tensors
    act = spec.activation
    d = dlogits.astype(spec.dtype, copy=False)
    grads: dict[str, np.ndarray] = {}

    grads["out_w"] = cache.hidden.T @ d
    grads["out_b"] = d.sum(axis=0)
    d = d @ t["out_w"].T

    for k in range(spec.fc_layers, 0, -1):
        d = _activation_backward(d, cache.fc_z[k - 1], act, guided)
        grads[f"fc{k}_w"] = cache.fc_inputs[k - 1].T @ d
        grads[f"fc{k}_b"] = d.sum(axis=0)
        d = d @ t[f"fc{k}_w"].T

    d = d.reshape(cache.pool2.shape)
    d = maxpool_backward(d, cache.pool2_arg, cache.conv2_a.shape, spec.pool_size, spec.pool_stride)
    d = _activation_backward(d, cache.conv2_z, act, guided)
    d, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(d, cache.pool1, t["conv2_w"])

    d = maxpool_backward(d, cache.pool1_arg, cache.conv1_a.shape, spec.pool_size, spec.pool_stride)
    d = _activation_backward(d, cache.conv1_z, act, guided)
    dx, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(d, cache.x, t["conv1_w"], need_input)

    ordered = {name: grads[name] for name in t}
    return ordered, (dx[..., 0] if dx is not None else None)


def backward(
    params: ModelParams, cache: ForwardCache, probs: np.ndarray, labels: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the summed cross-entropy for the batch in `cache`"""
    labels = np.asarray(labels)
    dlogits = probs.copy()
    dlogits[np.arange(labels.size), labels] -= 1.0
    grads, _ = backprop(params, cache, dlogits)
    return grads


def predict_logits(params: ModelParams, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Pre-softmax scores (N, K) in float64, computed batch_size at a time"""
    inputs = np.asarray(inputs)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.shape[0] == 0:
        return np.zeros((0, params.n_classes), dtype=np.float64)
    chunks = [
        forward(params, inputs[start:start + batch_size])[1].logits.astype(np.float64)
        for start in range(0, inputs.shape[0], batch_size)
    ]
    return np.concatenate(chunks)


def predict(params: ModelParams, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Posteriors for N inputs, computed batch_size at a time"""
    return softmax(predict_logits(params, inputs, batch_size))
