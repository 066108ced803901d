"""Netpbm image I/O, the binary checkpoint format and JSON experiment configs.

Checkpoint layout (all integers little-endian)::

    b"CUN1" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header lists every tensor's name, shape, byte offset and byte count;
the payload is the tensors' float32 samples in header order.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .model import CUNetParams, ModelConfig
from .tensor import ContractError
from .train import AdamState, TrainConfig

MAGIC = b"CUN1"
VERSION = 1


class ImageFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class CheckpointError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class ConfigError(ValueError):
    pass


# -- netpbm -------------------------------------------------------------------

_CHANNELS = {b"P5": 1, b"P6": 3}


def _header_ints(buf: bytes, start: int, count: int):
    """Parse ``count`` decimal header fields from ``start``; returns (values, offsets, end)."""
    values, offsets = [], []
    i = start
    n = len(buf)
    while len(values) < count:
        while i < n and (buf[i] in b" \t\r\n\v\f" or buf[i] == ord("#")):
            if buf[i] == ord("#"):
                while i < n and buf[i] not in b"\r\n":
                    i += 1
            else:
                i += 1
        if i >= n:
            raise ImageFormatError("truncated header", i)
        j = i
        while j < n and 48 <= buf[j] <= 57:
            j += 1
        last = len(values) == count - 1
        # the payload may follow maxval without a separator, so only earlier fields need one
        if j == i or (not last and j < n and buf[j] not in b" \t\r\n\v\f#"):
            raise ImageFormatError(f"expected a decimal number at {buf[i:i + 8]!r}", i)
        values.append(int(buf[i:j]))
        offsets.append(i)
        i = j
    return values, offsets, i


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary PGM (P5) / PPM (P6) bytes to a float64 ``(H, W, C)`` array in [0, 1]."""
    if buf[:2] not in _CHANNELS:
        raise ImageFormatError(f"unsupported magic {buf[:2]!r}", 0)
    channels = _CHANNELS[buf[:2]]
    values, offsets, data_at = _header_ints(buf, 2, 3)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ImageFormatError("image dimensions must be positive", offsets[0])
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} out of range", offsets[2])
    nbytes = 1 if maxval < 256 else 2
    size = width * height * channels * nbytes
    rest = len(buf) - data_at
    if rest == size + 1 or (rest > size and buf[data_at : data_at + 1].isspace()):
        if not buf[data_at : data_at + 1].isspace():
            raise ImageFormatError("expected whitespace after maxval", data_at)
        data_at += 1
    elif rest < size:
        raise ImageFormatError(f"truncated payload: need {size} bytes, have {max(rest, 0)}", len(buf))
    raw = np.frombuffer(buf, dtype=">u2" if nbytes == 2 else np.uint8, count=width * height * channels, offset=data_at)
    if np.any(raw > maxval):
        raise ImageFormatError("sample exceeds maxval", data_at)
    return (raw.astype(np.float64) / maxval).reshape(height, width, channels)


def encode_netpbm(img: np.ndarray, maxval: int = 255) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    magic = {1: b"P5", 3: b"P6"}.get(img.shape[-1])
    if magic is None:
        raise ContractError(f"netpbm needs 1 or 3 channels, got {img.shape[-1]}")
    if not 0 < maxval < 65536:
        raise ContractError("maxval must be in 1..65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n{maxval}\n".encode("ascii") + raw


def load_image(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def save_image(path, img: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_netpbm(img, maxval))


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    hyperparameters: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    optimizer: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ck: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in ck.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "hyperparameters": ck.hyperparameters,
        "metadata": ck.metadata,
        "optimizer": ck.optimizer,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", ck.version, len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError("version", "file too short")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version} (expected {VERSION})")
    if len(buf) < 12 + hlen:
        raise CheckpointError("header", "truncated header")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("header", f"malformed JSON: {e}") from None
    payload = memoryview(buf)[12 + hlen :]
    tensors = {}
    expected_offset = 0
    for entry in header.get("tensors", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if entry["nbytes"] != nbytes:
            raise CheckpointError(f"tensors.{name}.nbytes", f"{entry['nbytes']} does not match shape {shape}")
        if entry["offset"] != expected_offset:
            raise CheckpointError(f"tensors.{name}.offset", f"expected {expected_offset}, got {entry['offset']}")
        if expected_offset + nbytes > len(payload):
            raise CheckpointError(f"tensors.{name}", "truncated payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=expected_offset).reshape(shape).copy()
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CheckpointError("payload", f"{len(payload) - expected_offset} trailing bytes")
    return Checkpoint(
        hyperparameters=header.get("hyperparameters", {}),
        tensors=tensors,
        optimizer=header.get("optimizer"),
        metadata=header.get("metadata", {}),
        version=version,
    )


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_from_params(params: CUNetParams, state: Optional[AdamState] = None, metadata=None) -> Checkpoint:
    tensors = dict(params.named_tensors())
    optimizer = None
    if state is not None and state.m:
        optimizer = {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
        for name in params.named_tensors():
            tensors[f"adam.m.{name}"] = state.m[name]
        for name in params.named_tensors():
            tensors[f"adam.v.{name}"] = state.v[name]
    return Checkpoint(dataclasses.asdict(params.config), tensors, optimizer, dict(metadata or {}))


def params_from_checkpoint(ck: Checkpoint, dtype=np.float32):
    """Returns ``(params, adam_state_or_None)``."""
    try:
        cfg = ModelConfig(**ck.hyperparameters)
    except TypeError as e:
        raise CheckpointError("hyperparameters", str(e)) from None
    model = {k: v.astype(dtype) for k, v in ck.tensors.items() if not k.startswith("adam.")}
    try:
        params = CUNetParams.from_named(cfg, model)
    except ContractError as e:
        raise CheckpointError("tensors", str(e)) from None
    state = None
    if ck.optimizer is not None:
        state = AdamState(t=ck.optimizer["t"], beta1=ck.optimizer["beta1"], beta2=ck.optimizer["beta2"], eps=ck.optimizer["eps"])
        for name in model:
            state.m[name] = ck.tensors[f"adam.m.{name}"].astype(dtype)
            state.v[name] = ck.tensors[f"adam.v.{name}"].astype(dtype)
    return params, state


# -- experiment config ----------------------------------------------------------

@dataclass
class DatasetSpec:
    kind: str = "guided-SR"
    count: int = 2000
    val_count: int = 200
    seed: int = 0
    size: int = 64
    sr_factor: int = 4
    noise_sigma: float = 25.0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    out_dir: str = "out"

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        sections = {"model": ModelConfig, "train": TrainConfig, "dataset": DatasetSpec}
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        kw = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key} must be an object")
                names = {f.name for f in dataclasses.fields(sections[key])}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                try:
                    kw[key] = sections[key](**value)
                except (TypeError, ContractError) as e:
                    raise ConfigError(f"invalid {key}: {e}") from None
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply ``key=value`` strings; dotted keys address sections (``train.lr0=3e-3``)."""
        d = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not KEY=VALUE")
            key, raw = pair.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())
