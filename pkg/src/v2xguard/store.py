"""On-disk cache of ingested sender sequences.

The store keeps raw (unnormalized) features so one ingest serves any model or
normalization. Its metadata records the hash of the source traces, the hash
of the ingest settings and the hash of the array payload; a payload that no
longer matches its recorded hash is refused.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domain import NUM_FEATURES, AttackLabel, RelativeFeatureVector, SenderSequence
from .features import MIN_SEQUENCE_LENGTH
from .ingestion import DEFAULT_MAX_GAP

STORE_VERSION = 1
_ARRAYS = ("values", "times", "seg_lengths", "seg_owner", "labels")


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class IngestConfig:
    max_gap: float = DEFAULT_MAX_GAP
    gap_threshold: float = DEFAULT_MAX_GAP
    min_length: int = MIN_SEQUENCE_LENGTH

    def digest(self) -> str:
        text = json.dumps({"version": STORE_VERSION, **asdict(self)}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def hash_files(paths: Iterable[str | Path]) -> str:
    """Content hash over files in the given order (names are not hashed)."""
    h = hashlib.sha256()
    for p in paths:
        data = Path(p).read_bytes()
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.hexdigest()


def _payload_hash(arrays: dict[str, np.ndarray], sender_ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    for name in _ARRAYS:
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(np.asarray(a.shape, dtype=np.int64).tobytes())
        h.update(a.tobytes())
    h.update("\n".join(sender_ids).encode())
    return h.hexdigest()


def _to_arrays(sequences: Sequence[SenderSequence]) -> tuple[dict[str, np.ndarray], list[str]]:
    values, times, lengths, owner = [], [], [], []
    for i, seq in enumerate(sequences):
        for seg in seq.segments:
            lengths.append(len(seg))
            owner.append(i)
            for t, fv in seg:
                times.append(t)
                values.append(fv.values)
    arrays = {
        "values": np.asarray(values, dtype=np.float64).reshape(-1, NUM_FEATURES),
        "times": np.asarray(times, dtype=np.float64),
        "seg_lengths": np.asarray(lengths, dtype=np.int64),
        "seg_owner": np.asarray(owner, dtype=np.int64),
        "labels": np.asarray([int(s.label) for s in sequences], dtype=np.int64),
    }
    return arrays, [s.sender_id for s in sequences]


def _from_arrays(arrays: dict[str, np.ndarray], sender_ids: Sequence[str]) -> list[SenderSequence]:
    segments: list[list] = [[] for _ in sender_ids]
    pos = 0
    for length, owner in zip(arrays["seg_lengths"], arrays["seg_owner"]):
        rows = arrays["values"][pos : pos + length]
        ts = arrays["times"][pos : pos + length]
        seg = tuple((float(t), RelativeFeatureVector(tuple(float(v) for v in row), float(t))) for t, row in zip(ts, rows))
        segments[int(owner)].append(seg)
        pos += int(length)
    return [
        SenderSequence(sid, AttackLabel(int(lab)), tuple(segs))
        for sid, lab, segs in zip(sender_ids, arrays["labels"], segments)
    ]


def save_store(path: str | Path, sequences: Sequence[SenderSequence], trace_hash: str, config: IngestConfig) -> dict:
    arrays, ids = _to_arrays(sequences)
    meta = {
        "version": STORE_VERSION,
        "trace_hash": trace_hash,
        "feature_hash": config.digest(),
        "ingest_config": asdict(config),
        "payload_hash": _payload_hash(arrays, ids),
        "sequences": len(ids),
    }
    with open(path, "wb") as fh:
        np.savez(fh, sender_ids=np.asarray(ids, dtype=str), meta=np.asarray(json.dumps(meta, sort_keys=True)), **arrays)
    return meta


def read_meta(path: str | Path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            return json.loads(str(z["meta"]))
    except (OSError, KeyError, ValueError) as exc:
        raise StoreError(f"cannot read window store {path}: {exc}") from exc


def load_store(path: str | Path) -> tuple[list[SenderSequence], dict]:
    p = Path(path)
    if not p.exists():
        raise StoreError(f"window store not found: {p}")
    try:
        with np.load(p, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {name: z[name] for name in _ARRAYS}
            ids = [str(s) for s in z["sender_ids"]]
    except (OSError, KeyError, ValueError) as exc:
        raise StoreError(f"cannot read window store {p}: {exc}") from exc
    if meta.get("version") != STORE_VERSION:
        raise StoreError(f"window store version {meta.get('version')} is not supported (expected {STORE_VERSION})")
    if _payload_hash(arrays, ids) != meta["payload_hash"]:
        raise StoreError(f"window store {p} is corrupt: payload hash mismatch")
    return _from_arrays(arrays, ids), meta


def is_fresh(path: str | Path, trace_hash: str, config: IngestConfig) -> bool:
    """True if the store at ``path`` was built from these traces and settings."""
    if not Path(path).exists():
        return False
    try:
        meta = read_meta(path)
    except StoreError:
        return False
    return meta.get("trace_hash") == trace_hash and meta.get("feature_hash") == config.digest()
