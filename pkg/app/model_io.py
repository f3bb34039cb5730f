"""
Model file format.

Layout: an 8-byte little-endian header length, a compact UTF-8 JSON
header (magic, version, metadata, tensor names and shapes), then every
tensor as little-endian float32 in header order.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from .config import FeatureConfig
from .corpus import InventoryFile, PhoneInventory
from .exceptions import CorruptFile, MissingFile, ShapeMismatch, VersionMismatch
from .fileio import atomic_output
from .network import ModelParams, NetworkSpec

logger = logging.getLogger(__name__)

MAGIC = "CVOAM1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_TENSOR_DTYPE = np.dtype("<f4")


class TensorEntry(BaseModel):
    name: str
    shape: list[int]


class ModelHeader(BaseModel):
    magic: str
    version: int
    window_ms: int
    inventory: InventoryFile
    features: FeatureConfig
    network: NetworkSpec
    tensors: list[TensorEntry]


def save_model(params: ModelParams, path: str | Path) -> None:
    params.check()
    inventory = params.inventory.to_dict()
    header = ModelHeader(
        magic=MAGIC,
        version=FORMAT_VERSION,
        window_ms=params.window_ms,
        inventory=InventoryFile(**inventory),
        features=params.features,
        network=params.spec,
        tensors=[TensorEntry(name=k, shape=list(v.shape)) for k, v in params.tensors.items()],
    )
    header_bytes = json.dumps(
        header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    with atomic_output(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(_LENGTH.pack(len(header_bytes)))
            f.write(header_bytes)
            for tensor in params.tensors.values():
                f.write(np.ascontiguousarray(tensor, dtype=_TENSOR_DTYPE).tobytes())
    logger.info(f"Saved model ({params.n_parameters} parameters) to {path}")


def _read_header(path: Path, data: bytes) -> tuple[dict, int]:
    if len(data) < _LENGTH.size:
        raise CorruptFile(f"{path}: file too short for a model header")
    (length,) = _LENGTH.unpack_from(data)
    end = _LENGTH.size + length
    if end > len(data):
        raise CorruptFile(f"{path}: header runs past end of file")
    try:
        raw = json.loads(data[_LENGTH.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: unreadable header: {e}")
    if not isinstance(raw, dict):
        raise CorruptFile(f"{path}: header is not a JSON object")
    return raw, end


def load_model(path: str | Path) -> ModelParams:
    """Read a model file, rejecting other formats, versions and inconsistent shapes"""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"model file not found: {path}")
    data = path.read_bytes()
    raw, offset = _read_header(path, data)

    if raw.get("magic") != MAGIC:
        raise VersionMismatch(f"{path}: not a model file (magic {raw.get('magic')!r})")
    if raw.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {raw.get('version')}, expected {FORMAT_VERSION}")
    try:
        header = ModelHeader.model_validate(raw)
    except ValidationError as e:
        raise CorruptFile(f"{path}: invalid header: {e}")

    inventory = PhoneInventory(tuple(header.inventory.consonants), frozenset(header.inventory.vowels))
    spec = header.network
    expected = spec.param_shapes(len(inventory))
    declared = {t.name: tuple(t.shape) for t in header.tensors}
    if list(declared) != list(expected):
        raise ShapeMismatch(f"{path}: tensors {list(declared)} do not match the architecture")
    for name, shape in expected.items():
        if declared[name] != shape:
            raise ShapeMismatch(f"{path}: {name} declared {declared[name]}, architecture needs {shape}")

    needed = sum(int(np.prod(shape)) for shape in expected.values()) * _TENSOR_DTYPE.itemsize
    if len(data) - offset != needed:
        raise CorruptFile(f"{path}: {len(data) - offset} tensor bytes, expected {needed}")

    tensors = {}
    for name, shape in expected.items():
        count = int(np.prod(shape))
        flat = np.frombuffer(data, dtype=_TENSOR_DTYPE, count=count, offset=offset)
        tensors[name] = flat.reshape(shape).astype(spec.dtype)
        offset += count * _TENSOR_DTYPE.itemsize

    params = ModelParams(spec, inventory, tensors, header.window_ms, header.features)
    logger.info(f"Loaded model {path}: {params.n_classes} classes, {header.window_ms} ms window")
    return params
