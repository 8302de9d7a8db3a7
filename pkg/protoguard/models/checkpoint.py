"""
``PAAC`` checkpoint files.

Layout: ``b"PAAC"``, u32 version, u32 entry count, then per entry a u16 name
length, the UTF-8 name and an embedded ``.ten`` tensor. Entry order is kept,
so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from protoguard.core.errors import ContractError
from protoguard.models.encoder import PAAResNet, build_encoder
from protoguard.schemas.config import ExperimentConfig
from protoguard.tensor.serialization import decode_tensor, encode_tensor

CHECKPOINT_MAGIC = b"PAAC"
CHECKPOINT_VERSION = 1

MOMENTUM_PREFIX = "momentum."
RESERVED_PREFIXES = (MOMENTUM_PREFIX, "bank.", "proto.", "meta.")


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, array in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"entry name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(encode_tensor(array))
    return b"".join(chunks)


def decode_checkpoint(buffer: bytes) -> dict[str, np.ndarray]:
    if buffer[:4] != CHECKPOINT_MAGIC:
        raise ContractError("not a PAAC checkpoint")
    version, count = struct.unpack_from("<II", buffer, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    cursor = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<H", buffer, cursor)
        cursor += 2
        name = buffer[cursor : cursor + length].decode("utf-8")
        cursor += length
        entries[name], cursor = decode_tensor(buffer, cursor)
    if cursor != len(buffer):
        raise ContractError("trailing bytes after the last checkpoint entry")
    return entries


def save_checkpoint(path: str | Path, entries: Mapping[str, np.ndarray]) -> Path:
    """Write atomically: temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(entries)
    fd, tmp = tempfile.mkstemp(prefix=".paac-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        return decode_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise ContractError(f"cannot read checkpoint {path}: {exc}") from exc


def encoder_entries(entries: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, np.ndarray]:
    """Entries of one encoder; ``prefix=""`` selects the online encoder."""
    if prefix:
        return {name[len(prefix):]: value for name, value in entries.items() if name.startswith(prefix)}
    return {
        name: value for name, value in entries.items() if not name.startswith(RESERVED_PREFIXES)
    }


def pack_json(payload: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(payload, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(array: np.ndarray) -> dict:
    return json.loads(np.asarray(array, dtype=np.uint8).tobytes().decode("utf-8"))


def export_inference(source: str | Path, target: str | Path) -> Path:
    """Copy a training checkpoint without momentum encoder, bank and prototypes."""
    entries = load_checkpoint(source)
    kept = {
        name: value
        for name, value in entries.items()
        if not name.startswith((MOMENTUM_PREFIX, "bank.", "proto."))
    }
    return save_checkpoint(target, kept)


def restore_encoder(entries: Mapping[str, np.ndarray]) -> tuple[ExperimentConfig, PAAResNet]:
    """Rebuild the online encoder and its experiment config from checkpoint entries."""
    if "meta.config" not in entries:
        raise ContractError("checkpoint carries no meta.config")
    config = ExperimentConfig.model_validate(unpack_json(entries["meta.config"]))
    encoder = build_encoder(config.train)
    encoder.load_state_dict(encoder_entries(entries))
    encoder.eval()
    return config, encoder
