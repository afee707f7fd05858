"""
Binary checkpoint format.

    [8 bytes]  little-endian unsigned header length
    [header]   UTF-8 JSON {"tensors": {name: {shape, dtype, offset, nbytes}}, "meta": {...}}
    [payload]  little-endian float32 tensors, in sorted-name order

Optimizer moments travel as ordinary tensors named adamw.m.<param> and
adamw.v.<param>. Writes go through a temporary file and an atomic rename.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import CheckpointFormatError

logger = logging.getLogger(__name__)

HEADER_LEN = struct.Struct("<Q")
PAYLOAD_DTYPE = np.dtype("<f4")
MOMENT_M = "adamw.m."
MOMENT_V = "adamw.v."


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    iteration: int = 0
    phase: str = "phase1"
    seed: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_steps: Dict[str, int] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def meta(self) -> Dict[str, Any]:
        return {
            "iter": self.iteration,
            "phase": self.phase,
            "seed": self.seed,
            "adam_steps": dict(self.adam_steps),
            "rng_state": self.rng_state,
            "extra": self.extra,
        }

    def all_tensors(self) -> Dict[str, np.ndarray]:
        named = dict(self.tensors)
        named.update({MOMENT_M + k: val for k, val in self.m.items()})
        named.update({MOMENT_V + k: val for k, val in self.v.items()})
        return named


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    named = ckpt.all_tensors()
    index: Dict[str, Dict[str, Any]] = {}
    chunks = []
    offset = 0
    for name in sorted(named):
        array = np.ascontiguousarray(named[name], dtype=PAYLOAD_DTYPE)
        index[name] = {"shape": list(array.shape), "dtype": "f32", "offset": offset, "nbytes": array.nbytes}
        chunks.append(array.tobytes())
        offset += array.nbytes

    header = json.dumps({"tensors": index, "meta": ckpt.meta()}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(HEADER_LEN.pack(len(header)))
        handle.write(header)
        for chunk in chunks:
            handle.write(chunk)
    os.replace(tmp, path)
    logger.debug(f"Wrote checkpoint {path} ({len(named)} tensors, iter {ckpt.iteration})")
    return path


def _require(condition: bool, message: str, offset: int) -> None:
    if not condition:
        raise CheckpointFormatError(message, offset)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Parse and fully validate a checkpoint; nothing is returned on partial reads"""
    path = Path(path)
    data = path.read_bytes()
    _require(len(data) >= HEADER_LEN.size, "File too short for header length", 0)
    (header_len,) = HEADER_LEN.unpack_from(data, 0)
    base = HEADER_LEN.size + header_len
    _require(base <= len(data), f"Header of {header_len} bytes extends past end of file", HEADER_LEN.size)
    try:
        header = json.loads(data[HEADER_LEN.size:base].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"Corrupt header: {exc}", HEADER_LEN.size) from exc
    _require(isinstance(header, dict) and isinstance(header.get("tensors"), dict)
             and isinstance(header.get("meta"), dict), "Header lacks 'tensors'/'meta' objects", HEADER_LEN.size)

    named: Dict[str, np.ndarray] = {}
    payload_end = base
    for name, info in header["tensors"].items():
        try:
            shape = tuple(int(d) for d in info["shape"])
            offset, nbytes, dtype = int(info["offset"]), int(info["nbytes"]), info["dtype"]
        except (KeyError, TypeError, ValueError):
            raise CheckpointFormatError(f"Malformed index entry for '{name}'", HEADER_LEN.size) from None
        start = base + offset
        count = int(np.prod(shape, dtype=np.int64))
        _require(dtype == "f32", f"Tensor '{name}' has unsupported dtype {dtype}", start)
        _require(nbytes == count * PAYLOAD_DTYPE.itemsize, f"Tensor '{name}' size does not match its shape", start)
        _require(offset >= 0 and start + nbytes <= len(data), f"Tensor '{name}' truncated", start)
        named[name] = np.frombuffer(data, dtype=PAYLOAD_DTYPE, count=count, offset=start).reshape(shape).astype(np.float32)
        payload_end = max(payload_end, start + nbytes)
    _require(payload_end == len(data), "Unexpected trailing bytes", payload_end)

    meta = header["meta"]
    try:
        ckpt = Checkpoint(
            tensors=OrderedDict(),
            iteration=int(meta["iter"]),
            phase=str(meta["phase"]),
            seed=int(meta["seed"]),
            adam_steps={k: int(val) for k, val in meta.get("adam_steps", {}).items()},
            rng_state=meta.get("rng_state"),
            extra=meta.get("extra", {}),
        )
    except (KeyError, TypeError, ValueError):
        raise CheckpointFormatError("Header meta lacks iter/phase/seed", HEADER_LEN.size) from None

    for name in sorted(named):
        if name.startswith(MOMENT_M):
            ckpt.m[name[len(MOMENT_M):]] = named[name]
        elif name.startswith(MOMENT_V):
            ckpt.v[name[len(MOMENT_V):]] = named[name]
        else:
            ckpt.tensors[name] = named[name]
    return ckpt
