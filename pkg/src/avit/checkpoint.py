"""
AVCK checkpoint files.

Layout (little-endian)::

    b"AVCK" | version u16 | count u32 | count x record
    record := name_len u16 | name utf-8 | rank u8 | dims u32 * rank | dtype u8 | payload

dtype tags: 0 = float32, 1 = float64.
"""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from typing import Dict, Iterable, List, Mapping, Optional, Union

import numpy as np

from .errors import CheckpointFormatError, ContractError, DimensionError
from .nn import Module

MAGIC = b"AVCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, os.PathLike]


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", _TAGS[arr.dtype]))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError("checkpoint truncated", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointFormatError("bad magic, not an AVCK checkpoint", 0)
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        at = pos
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError("tensor name is not valid UTF-8", at) from e
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", at)
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name!r}", pos - 1)
        dt = _DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        out[name] = data.astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor", pos)
    return out


def save_checkpoint(model: Union[Module, Mapping[str, np.ndarray]], path: PathLike, prefixes: Optional[Iterable[str]] = None) -> None:
    state = model.state_dict() if isinstance(model, Module) else model
    if prefixes is not None:
        prefixes = tuple(prefixes)
        state = OrderedDict((k, v) for k, v in state.items() if k.startswith(prefixes))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(state))
    os.replace(tmp, path)


def read_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode(fh.read())


def _targets(model: Module) -> Dict[str, np.ndarray]:
    out = OrderedDict((n, p.data) for n, p in model.named_parameters())
    out.update(model.named_buffers())
    return out


def load_state(
    model: Module,
    tensors: Mapping[str, np.ndarray],
    partial: bool = False,
    prefixes: Optional[Iterable[str]] = None,
) -> List[str]:
    """Copy named tensors into ``model`` in place; validates everything before writing.

    Strict mode needs an exact name match. ``partial`` loads the names both sides
    share (optionally restricted to ``prefixes``) and leaves the rest untouched.
    Shape mismatches are always an error.
    """
    targets = _targets(model)
    if prefixes is not None:
        prefixes = tuple(prefixes)
        tensors = OrderedDict((k, v) for k, v in tensors.items() if k.startswith(prefixes))
    if not partial:
        missing = [k for k in targets if k not in tensors]
        extra = [k for k in tensors if k not in targets]
        if missing or extra:
            raise ContractError(
                f"checkpoint/model mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}"
            )
    names = [k for k in tensors if k in targets]
    for k in names:
        if tuple(tensors[k].shape) != tuple(targets[k].shape):
            raise DimensionError(f"{k}: checkpoint shape {tensors[k].shape} vs model {targets[k].shape}")
    for k in names:
        np.copyto(targets[k], tensors[k], casting="same_kind")
    return names


def load_checkpoint(path: PathLike, model: Module, partial: bool = False, prefixes: Optional[Iterable[str]] = None) -> List[str]:
    return load_state(model, read_checkpoint(path), partial, prefixes)
