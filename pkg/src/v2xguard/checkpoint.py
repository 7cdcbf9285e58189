"""Portable binary checkpoint: magic, version, JSON header, float32 weights.

Layout (all integers little-endian)::

    8 bytes   magic b"V2XGCKPT"
    u16       format version
    u32       header length, then UTF-8 JSON header (sorted keys, compact)
    u32       tensor count
    per tensor: u16 name length, name, u8 ndim, u32 dims, float32 values

Loading and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import NormStats
from .model import ModelConfig, count_parameters, parameter_shapes
from .scoring import BenignMae
from .training import TrainConfig

MAGIC = b"V2XGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    weights: OrderedDict[str, np.ndarray]
    norm: NormStats
    train_config: TrainConfig = field(default_factory=TrainConfig)
    mae: BenignMae | None = None
    tau: float | None = None
    percentile: float | None = None
    seed: int = 0
    corpus_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def calibrated(self) -> bool:
        return self.mae is not None and self.tau is not None

    def with_calibration(self, mae: BenignMae, tau: float, percentile: float) -> Checkpoint:
        return replace(self, mae=mae, tau=float(tau), percentile=float(percentile))

    def header(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "norm_stats": self.norm.to_dict(),
            "benign_mae": None if self.mae is None else self.mae.to_list(),
            "tau": self.tau,
            "percentile": self.percentile,
            "seed": self.seed,
            "corpus_hash": self.corpus_hash,
            "parameter_count": count_parameters(self.weights),
            "extra": self.extra,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    expected = parameter_shapes(ckpt.model_config)
    if list(expected) != list(ckpt.weights):
        raise CheckpointError("weight names do not match the model config")
    for name, shape in expected.items():
        if ckpt.weights[name].shape != shape:
            raise CheckpointError(f"{name}: shape {ckpt.weights[name].shape} != {shape}")
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.weights)))
    for name, arr in ckpt.weights.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, header_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    weights: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        weights[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after weight section")
    if count_parameters(weights) != header["parameter_count"]:
        raise CheckpointError("header parameter count does not match the weight section")
    mae = header["benign_mae"]
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        weights=weights,
        norm=NormStats.from_dict(header["norm_stats"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        mae=None if mae is None else BenignMae(np.asarray(mae, dtype=np.float64)),
        tau=header["tau"],
        percentile=header["percentile"],
        seed=header["seed"],
        corpus_hash=header["corpus_hash"],
        extra=header["extra"],
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())


def file_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
