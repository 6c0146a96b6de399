"""
Binary file formats: US1D datasets and UMAE checkpoints.

All integers are little-endian. Writes go to a temporary file in the
target directory and are moved into place with os.replace.

US1D layout:
    header  "<4sHIHIB3x"  magic, version, count, signal_length, sample_rate_hz,
                          flags (bit 0: labels present), 3 reserved bytes
    records [label u16 if flagged] + signal_length u8 samples, repeated count times

UMAE layout:
    "<4sHI"  magic, version, metadata length; UTF-8 JSON metadata
    "<I"     tensor count
    per tensor: "<H" name length, UTF-8 name, "<B" rank, "<{rank}I" extents,
                little-endian float32 data in row-major order
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import DataIOError, FormatError, LabelRangeError, UsageError
from .signal_synth import NUM_CLASSES, SAMPLE_RATE, SignalRecord

logger = logging.getLogger(__name__)

US1D_MAGIC = b"US1D"
US1D_VERSION = 1
US1D_HEADER = struct.Struct("<4sHIHIB3x")
FLAG_LABELS = 0x01

UMAE_MAGIC = b"UMAE"
UMAE_VERSION = 1
UMAE_PREFIX = struct.Struct("<4sHI")
UMAE_COUNT = struct.Struct("<I")
UMAE_NAME_LENGTH = struct.Struct("<H")
UMAE_RANK = struct.Struct("<B")

TENSOR_DTYPE = np.dtype("<f4")
OPTIM_FIRST = "optim.m."
OPTIM_SECOND = "optim.v."


@dataclass
class Us1dFile:
    records: List[SignalRecord]
    signal_length: int
    sample_rate: int = int(SAMPLE_RATE)

    @property
    def labeled(self) -> bool:
        return bool(self.records) and all(r.label is not None for r in self.records)

    def signals(self) -> np.ndarray:
        """(count, signal_length) uint8 sample matrix."""
        if not self.records:
            return np.empty((0, self.signal_length), dtype=np.uint8)
        return np.stack([r.samples for r in self.records])

    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise UsageError("Dataset has no labels")
        return np.array([r.label for r in self.records], dtype=np.int64)


@dataclass
class Checkpoint:
    """Named float32 tensors plus JSON metadata, in insertion order."""
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def model_tensors(self) -> Dict[str, np.ndarray]:
        return {
            name: array for name, array in self.tensors.items()
            if not name.startswith((OPTIM_FIRST, OPTIM_SECOND))
        }

    def optimizer_moments(self) -> Optional[Dict[str, Dict[str, np.ndarray]]]:
        first = {n[len(OPTIM_FIRST):]: a for n, a in self.tensors.items() if n.startswith(OPTIM_FIRST)}
        second = {
            n[len(OPTIM_SECOND):]: a for n, a in self.tensors.items() if n.startswith(OPTIM_SECOND)
        }
        if not first:
            return None
        return {"m": first, "v": second}


# ==================== File helpers ====================

def atomic_write(path: str, payload: bytes) -> None:
    """Write bytes to `path` via a temporary sibling file and os.replace."""
    target = Path(path)
    directory = target.parent if str(target.parent) else Path(".")
    tmp_name = None
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            dir=directory, prefix=f".{target.name}.", suffix=".tmp", delete=False
        ) as handle:
            tmp_name = handle.name
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except OSError as e:
        if tmp_name and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise DataIOError(f"Cannot write {path}: {e}") from e


def read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"Cannot read {path}: {e}") from e


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise FormatError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise FormatError(
                f"{self.source}: {len(self.payload) - self.offset} unexpected trailing bytes"
            )


# ==================== US1D ====================

def _record_dtype(signal_length: int, labeled: bool) -> np.dtype:
    fields = [("label", "<u2")] if labeled else []
    fields.append(("samples", "u1", (signal_length,)))
    return np.dtype(fields)


def us1d_to_bytes(dataset: Us1dFile) -> bytes:
    records = dataset.records
    labeled = dataset.labeled
    if records and not labeled and any(r.label is not None for r in records):
        raise UsageError("Either every record or no record may carry a label")
    for index, record in enumerate(records):
        if np.shape(record.samples) != (dataset.signal_length,):
            raise UsageError(
                f"Record {index} has {np.size(record.samples)} samples, "
                f"expected {dataset.signal_length}"
            )
        if labeled and not 0 <= record.label < NUM_CLASSES:
            raise LabelRangeError(f"Record {index} label {record.label} outside 0-{NUM_CLASSES - 1}")

    table = np.zeros(len(records), dtype=_record_dtype(dataset.signal_length, labeled))
    if records:
        table["samples"] = dataset.signals()
        if labeled:
            table["label"] = [r.label for r in records]
    header = US1D_HEADER.pack(
        US1D_MAGIC,
        US1D_VERSION,
        len(records),
        dataset.signal_length,
        int(dataset.sample_rate),
        FLAG_LABELS if labeled else 0,
    )
    return header + table.tobytes()


def us1d_from_bytes(payload: bytes, source: str = "<bytes>") -> Us1dFile:
    reader = _Reader(payload, source)
    magic, version, count, signal_length, sample_rate, flags = reader.unpack(US1D_HEADER)
    if magic != US1D_MAGIC:
        raise FormatError(f"{source}: not a US1D file (magic {magic!r})")
    if version != US1D_VERSION:
        raise FormatError(f"{source}: unsupported US1D version {version}")
    if signal_length == 0:
        raise FormatError(f"{source}: zero signal length")
    labeled = bool(flags & FLAG_LABELS)
    dtype = _record_dtype(signal_length, labeled)
    expected = US1D_HEADER.size + count * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{source}: size {len(payload)} bytes, header implies {expected}")
    table = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)
    reader.finish()

    records = []
    for index, row in enumerate(table):
        label = None
        if labeled:
            label = int(row["label"])
            if label >= NUM_CLASSES:
                raise FormatError(f"{source}: record {index} label {label} outside 0-{NUM_CLASSES - 1}")
        records.append(SignalRecord(samples=np.array(row["samples"], dtype=np.uint8), label=label))
    return Us1dFile(records=records, signal_length=signal_length, sample_rate=sample_rate)


def write_us1d(path: str, dataset: Us1dFile) -> None:
    atomic_write(path, us1d_to_bytes(dataset))
    logger.info("Wrote %d records to %s", len(dataset.records), path)


def read_us1d(path: str) -> Us1dFile:
    dataset = us1d_from_bytes(read_bytes(path), source=str(path))
    logger.debug("Read %d records from %s", len(dataset.records), path)
    return dataset


# ==================== UMAE checkpoints ====================

def encode_metadata(metadata: Dict[str, Any]) -> bytes:
    try:
        text = json.dumps(metadata, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as e:
        raise UsageError(f"Checkpoint metadata is not JSON-serializable: {e}") from e
    return text.encode("utf-8")


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    meta = encode_metadata(checkpoint.metadata)
    parts = [UMAE_PREFIX.pack(UMAE_MAGIC, UMAE_VERSION, len(meta)), meta]
    parts.append(UMAE_COUNT.pack(len(checkpoint.tensors)))
    for name, array in checkpoint.tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype=TENSOR_DTYPE)
        parts.append(UMAE_NAME_LENGTH.pack(len(encoded)))
        parts.append(encoded)
        parts.append(UMAE_RANK.pack(array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, source)
    magic, version, meta_length = reader.unpack(UMAE_PREFIX)
    if magic != UMAE_MAGIC:
        raise FormatError(f"{source}: not a UMAE checkpoint (magic {magic!r})")
    if version != UMAE_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        metadata = json.loads(reader.take(meta_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: corrupt metadata block: {e}") from e

    (count,) = reader.unpack(UMAE_COUNT)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack(UMAE_NAME_LENGTH)
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: corrupt tensor name: {e}") from e
        (rank,) = reader.unpack(UMAE_RANK)
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(size * TENSOR_DTYPE.itemsize), dtype=TENSOR_DTYPE)
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor {name!r}")
        tensors[name] = data.astype(np.float32).reshape(shape)
    reader.finish()
    return Checkpoint(tensors=tensors, metadata=metadata)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    atomic_write(path, checkpoint_to_bytes(checkpoint))
    logger.info("Saved checkpoint with %d tensors to %s", len(checkpoint.tensors), path)


def load_checkpoint(path: str) -> Checkpoint:
    return checkpoint_from_bytes(read_bytes(path), source=str(path))
