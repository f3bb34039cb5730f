"""
Training and evaluation of the consonant classifier.

Batches group the CV segments of whole utterances (sentences_per_batch
consecutive utterances after a seeded shuffle) unless a fixed segment
count is configured. Gradients are summed over micro-batches in a fixed
order, so a run is reproducible bit-for-bit from its seed.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import DEFAULT_WINDOW_MS, SUPPORTED_WINDOWS_MS, FeatureConfig, TrainConfig
from .corpus import Manifest, PhoneInventory
from .exceptions import EmptyEvaluationSet, EmptyTrainingSet, InvalidInventory, InvalidWindow
from .features import MelFilterbank, filterbank_for, melspec
from .network import ModelParams, NetworkSpec, backward, forward, init_params, loss, predict
from .segmenter import CVSegment, segment_corpus

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ExampleSet:
    """Spectrograms (N, n_mels, n_frames) with class indices and source utterances"""
    inputs: np.ndarray
    labels: np.ndarray
    utterance_ids: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.inputs) == len(self.labels) == len(self.utterance_ids)):
            raise ValueError("inputs, labels and utterance_ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "ExampleSet":
        indices = np.asarray(indices, dtype=np.int64)
        return ExampleSet(
            self.inputs[indices], self.labels[indices], tuple(self.utterance_ids[i] for i in indices)
        )


def examples_from_segments(
    segments: Sequence[CVSegment],
    inventory: PhoneInventory,
    features: FeatureConfig = FeatureConfig(),
    filterbank: Optional[MelFilterbank] = None,
    threads: int = 1,
) -> ExampleSet:
    """Log-mel inputs and class labels for a list of CV segments"""
    filterbank = filterbank or filterbank_for(features)
    labels = []
    for segment in segments:
        if not inventory.is_consonant(segment.target_consonant):
            raise InvalidInventory(
                f"{segment.utterance_id}: consonant {segment.target_consonant!r} is not in the inventory"
            )
        labels.append(inventory.index(segment.target_consonant))

    def spectrogram(segment: CVSegment) -> np.ndarray:
        return melspec(segment, features, filterbank)

    if threads > 1 and len(segments) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            specs = list(pool.map(spectrogram, segments))
    else:
        specs = [spectrogram(s) for s in segments]

    if specs:
        inputs = np.stack(specs)
    else:
        inputs = np.zeros((0, features.n_mels, 0), dtype=np.float64)
    return ExampleSet(inputs, np.asarray(labels, dtype=np.int64), tuple(s.utterance_id for s in segments))


def examples_from_manifest(
    manifest: Manifest,
    inventory: PhoneInventory,
    window_ms: int = DEFAULT_WINDOW_MS,
    features: FeatureConfig = FeatureConfig(),
    threads: int = 1,
    tier_name: str = "phones",
) -> ExampleSet:
    segments = segment_corpus(manifest, inventory, window_ms, tier_name, threads)
    return examples_from_segments(segments, inventory, features, threads=threads)


# --- Optimization ---

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    train_accuracy: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "train_accuracy": self.train_accuracy}


class Adam:
    """Adam with bias correction, updating tensors in place"""

    def __init__(self, tensors: dict[str, np.ndarray], config: TrainConfig):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.t += 1
        correction1 = 1.0 - c.beta1 ** self.t
        correction2 = 1.0 - c.beta2 ** self.t
        for name, param in tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            param -= c.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + c.epsilon)


def make_batches(
    utterance_ids: Sequence[str], config: TrainConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Example indices per batch for one epoch"""
    if config.fixed_batch_segments:
        order = rng.permutation(len(utterance_ids))
        n = config.fixed_batch_segments
        return [order[i:i + n] for i in range(0, len(order), n)]

    groups: dict[str, list[int]] = {}
    for i, utterance_id in enumerate(utterance_ids):
        groups.setdefault(utterance_id, []).append(i)
    keys = list(groups)
    order = rng.permutation(len(keys))
    n = config.sentences_per_batch
    return [
        np.asarray([i for k in order[start:start + n] for i in groups[keys[k]]], dtype=np.int64)
        for start in range(0, len(keys), n)
    ]


def batch_gradient(
    params: ModelParams, inputs: np.ndarray, labels: np.ndarray, micro_batch_size: int
) -> tuple[float, dict[str, np.ndarray], int]:
    """Summed loss, summed gradients and correct-prediction count over a batch"""
    total = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    batch_loss, correct = 0.0, 0
    for start in range(0, len(labels), micro_batch_size):
        x, y = inputs[start:start + micro_batch_size], labels[start:start + micro_batch_size]
        probs, cache = forward(params, x)
        batch_loss += loss(y, probs)
        correct += int((probs.argmax(axis=1) == y).sum())
        for name, g in backward(params, cache, probs, y).items():
            total[name] += g
    return batch_loss, total, correct


def train(
    examples: ExampleSet,
    inventory: PhoneInventory,
    config: TrainConfig = TrainConfig(),
    spec: Optional[NetworkSpec] = None,
    window_ms: int = DEFAULT_WINDOW_MS,
    features: Optional[FeatureConfig] = None,
) -> tuple[ModelParams, list[EpochLog]]:
    """
    Fit a classifier with Adam on the summed cross-entropy.

    The network input size follows the examples; all randomness
    (initialization and shuffling) comes from one generator seeded with
    config.seed.
    """
    if len(examples) == 0:
        raise EmptyTrainingSet("no CV segments to train on")

    spec = (spec or NetworkSpec()).for_input(*examples.inputs.shape[1:])
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, inventory, window_ms, rng, features)
    optimizer = Adam(params.tensors, config)
    history = []

    logger.info(
        f"Training on {len(examples)} segments from {len(set(examples.utterance_ids))} utterances "
        f"for {config.epochs} epochs"
    )
    for epoch in range(1, config.epochs + 1):
        epoch_loss, epoch_correct = 0.0, 0
        for batch in make_batches(examples.utterance_ids, config, rng):
            batch_loss, grads, correct = batch_gradient(
                params, examples.inputs[batch], examples.labels[batch], config.micro_batch_size
            )
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"epoch {epoch}: loss diverged")
            optimizer.step(params.tensors, grads)
            epoch_loss += batch_loss
            epoch_correct += correct
            logger.debug(f"epoch {epoch} step {optimizer.t}: batch of {len(batch)}, loss {batch_loss:.4f}")

        entry = EpochLog(epoch, epoch_loss / len(examples), epoch_correct / len(examples))
        history.append(entry)
        logger.info(f"Epoch {epoch}: loss {entry.loss:.4f}, train accuracy {entry.train_accuracy:.3f}")

    return params, history


# --- Evaluation ---

@dataclass(frozen=True, eq=False)
class EvaluationResult:
    accuracy: float
    confusion: np.ndarray  # confusion[true, predicted]
    per_class_accuracy: np.ndarray  # NaN for classes absent from the test set
    n: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n": self.n,
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
        }


def evaluate(params: ModelParams, examples: ExampleSet, batch_size: int = 16) -> EvaluationResult:
    if len(examples) == 0:
        raise EmptyEvaluationSet("no CV segments to evaluate")
    predicted = predict(params, examples.inputs, batch_size).argmax(axis=1)
    k = params.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (examples.labels, predicted), 1)

    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / support, np.nan)
    accuracy = float((predicted == examples.labels).mean())
    logger.info(f"Evaluated {len(examples)} segments: accuracy {accuracy:.4f}")
    return EvaluationResult(accuracy, confusion, per_class, len(examples))


# --- Window sweep ---

@dataclass(frozen=True)
class SweepResult:
    window_ms: int
    accuracy: float
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return {"window_ms": self.window_ms, "accuracy": self.accuracy, "n_train": self.n_train, "n_test": self.n_test}


def sweep_window(
    train_manifest: Manifest,
    test_manifest: Manifest,
    inventory: PhoneInventory,
    windows: Sequence[int] = SUPPORTED_WINDOWS_MS,
    config: TrainConfig = TrainConfig(),
    spec: Optional[NetworkSpec] = None,
    features: FeatureConfig = FeatureConfig(),
    threads: int = 1,
    tier_name: str = "phones",
) -> list[SweepResult]:
    """Train and test one model per CV window length"""
    for w in windows:
        if w not in SUPPORTED_WINDOWS_MS:
            raise InvalidWindow(f"window {w} ms is not one of {list(SUPPORTED_WINDOWS_MS)}")

    results = []
    for w in windows:
        train_set = examples_from_manifest(train_manifest, inventory, w, features, threads, tier_name)
        test_set = examples_from_manifest(test_manifest, inventory, w, features, threads, tier_name)
        params, _ = train(train_set, inventory, config, spec, w, features)
        result = evaluate(params, test_set)
        logger.info(f"Window {w} ms: accuracy {result.accuracy:.4f}")
        results.append(SweepResult(w, result.accuracy, len(train_set), len(test_set)))
    return results
