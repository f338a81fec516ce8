"""
Versioned checkpoint container

Layout:
    8 bytes   magic b"SFNCKPT\\0"
    u32 LE    format version
    u64 LE    header length
    header    UTF-8 JSON: entries (name, group, shape, offset), configs,
              training cursor, RNG state and the payload sha256
    payload   concatenated little-endian float32 arrays
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .exceptions import CheckpointError, ConfigMismatchError
from .utils import cleanup_temp_files

logger = logging.getLogger(__name__)

MAGIC = b"SFNCKPT\0"
VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")
GROUPS = ("param", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly"""

    params: Dict[str, np.ndarray]
    model_config: Dict[str, Any]
    train_config: Dict[str, Any] = field(default_factory=dict)
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    batch_cursor: int = 0
    permutation: Optional[List[int]] = None
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def _groups(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {"param": self.params, "adam_m": self.adam_m, "adam_v": self.adam_v}


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """
    Write a checkpoint atomically (temporary file, then rename)

    Args:
        ckpt: Checkpoint to serialise
        path: Destination file

    Returns:
        The sha256 of the payload
    """
    entries = []
    chunks = []
    offset = 0
    for group, arrays in ckpt._groups().items():
        for name, array in arrays.items():
            data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)
            entries.append({"name": name, "group": group, "shape": list(data.shape), "offset": offset})
            chunks.append(data.tobytes())
            offset += data.nbytes
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()

    header = {
        "entries": entries,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "batch_cursor": ckpt.batch_cursor,
        "permutation": ckpt.permutation,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "payload_bytes": len(payload),
        "sha256": digest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", VERSION, len(header_bytes)))
            f.write(header_bytes)
            f.write(payload)
        os.replace(tmp_path, path)
    except OSError as e:
        cleanup_temp_files(tmp_path)
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path} (step {ckpt.step}, {len(payload)} bytes)")
    return digest


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read and verify a checkpoint

    Raises:
        CheckpointError: Missing file, bad magic, unsupported version,
            truncated data or checksum mismatch
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    prefix = len(MAGIC) + struct.calcsize("<IQ")
    if len(raw) < prefix or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[len(MAGIC) : prefix])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(raw[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted header") from e

    payload = raw[prefix + header_len :]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")

    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for entry in header["entries"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=entry["offset"])
        groups[entry["group"]][entry["name"]] = array.reshape(entry["shape"]).astype(np.float32)

    return Checkpoint(
        params=groups["param"],
        model_config=header["model_config"],
        train_config=header.get("train_config", {}),
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step=header.get("step", 0),
        epoch=header.get("epoch", 0),
        batch_cursor=header.get("batch_cursor", 0),
        permutation=header.get("permutation"),
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
    )


def check_model_config(ckpt: Checkpoint, expected: Dict[str, Any]) -> None:
    """Raise ConfigMismatchError naming the first architecture key that differs"""
    stored = ckpt.model_config
    for key in sorted(set(stored) | set(expected)):
        if key == "profile":
            continue
        if stored.get(key) != expected.get(key):
            raise ConfigMismatchError(
                key, f"checkpoint was trained with {stored.get(key)!r}, configuration requests {expected.get(key)!r}"
            )
