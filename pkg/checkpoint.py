# checkpoint.py
"""Binary tensor container shared by checkpoints, dataset samples and body templates.

Layout (all integers little-endian)::

    magic "DPMK1" | version u32 | manifest length u64 | manifest JSON | blobs

The manifest is canonical JSON (sorted keys, compact separators) holding the
tensor table (name, dtype, shape, offset, nbytes relative to the blob start),
the config hash, the seed and free-form metadata. Tensors keep insertion order,
so encoding a decoded container reproduces it byte for byte.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np
import torch

from config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from exceptions import CheckpointFormatError
from logger import StructuredLogger
from utils import write_bytes_atomic

logger = StructuredLogger(__name__)

_HEADER = struct.Struct("<IQ")

# storage dtype name -> (explicit little-endian numpy dtype, torch dtype)
DTYPES = {
    "float32": (np.dtype("<f4"), torch.float32),
    "float64": (np.dtype("<f8"), torch.float64),
    "int64": (np.dtype("<i8"), torch.int64),
    "uint8": (np.dtype("|u1"), torch.uint8),
    "bool": (np.dtype("|b1"), torch.bool),
}
_TORCH_TO_NAME = {torch_dtype: name for name, (_, torch_dtype) in DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    version: int = CHECKPOINT_VERSION


def _storage_name(tensor: torch.Tensor) -> str:
    if tensor.dtype in _TORCH_TO_NAME:
        return _TORCH_TO_NAME[tensor.dtype]
    if tensor.is_floating_point():
        return "float32"
    return "int64"


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in ckpt.tensors.items():
        dtype_name = _storage_name(tensor)
        np_dtype = DTYPES[dtype_name][0]
        array = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np_dtype, copy=False))
        raw = array.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "tensors": entries,
        "metadata": ckpt.metadata,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = CHECKPOINT_MAGIC + _HEADER.pack(ckpt.version, len(manifest_bytes))
    return header + manifest_bytes + b"".join(blobs)


def decode_checkpoint(data: bytes, source="<bytes>") -> Checkpoint:
    prefix = len(CHECKPOINT_MAGIC)
    if len(data) < prefix + _HEADER.size or data[:prefix] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(source, f"{source}: bad magic, not a DPMK1 container")
    version, manifest_len = _HEADER.unpack_from(data, prefix)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(source, f"{source}: unsupported container version {version}")
    start = prefix + _HEADER.size
    try:
        manifest = json.loads(data[start : start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(source, f"{source}: unreadable manifest ({str(e)})")
    blob_start = start + manifest_len
    blob_len = len(data) - blob_start

    tensors = {}
    expected_offset = 0
    for entry in manifest.get("tensors", []):
        if entry["dtype"] not in DTYPES:
            raise CheckpointFormatError(source, f"{source}: unknown dtype {entry['dtype']}")
        np_dtype, torch_dtype = DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["offset"] != expected_offset or entry["nbytes"] != count * np_dtype.itemsize:
            raise CheckpointFormatError(
                source, f"{source}: tensor {entry['name']} overlaps or is out of order"
            )
        end = entry["offset"] + entry["nbytes"]
        if end > blob_len:
            raise CheckpointFormatError(source, f"{source}: tensor {entry['name']} is truncated")
        array = np.frombuffer(
            data, dtype=np_dtype, count=count, offset=blob_start + entry["offset"]
        ).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np_dtype.newbyteorder("="))).to(
            torch_dtype
        )
        expected_offset = end
    if expected_offset != blob_len:
        raise CheckpointFormatError(source, f"{source}: trailing bytes after last tensor")

    return Checkpoint(
        tensors=tensors,
        metadata=manifest.get("metadata", {}),
        config_hash=manifest.get("config_hash", ""),
        seed=manifest.get("seed", 0),
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint):
    payload = encode_checkpoint(ckpt)
    write_bytes_atomic(path, payload)
    logger.info(f"Saved container to {path}", tensors=len(ckpt.tensors), nbytes=len(payload))
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Failed to read container {path}: {str(e)}")
        raise
    return decode_checkpoint(data, source=str(path))


def state_dict_tensors(prefix, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_prefixed_state(module: torch.nn.Module, tensors: Dict[str, torch.Tensor], prefix, strict=True):
    marker = f"{prefix}."
    state = {k[len(marker) :]: v for k, v in tensors.items() if k.startswith(marker)}
    if not state and strict:
        raise CheckpointFormatError(prefix, f"No tensors stored under prefix '{prefix}'")
    own = module.state_dict()
    converted = {k: v.to(own[k].dtype) if k in own else v for k, v in state.items()}
    return module.load_state_dict(converted, strict=strict)
