"""Binary NetPBM (P5 greyscale / P6 RGB, 8-bit) reader and writer."""
from __future__ import annotations

import os
from typing import Tuple, Union

import numpy as np

from .errors import ParseError

_WS = b" \t\n\r\v\f"


def _token(buf: bytes, pos: int) -> Tuple[bytes, int, int]:
    """Next header token after whitespace and comments: (token, start, end)."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos : pos + 1] not in _WS and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return buf[start:pos], start, pos


def _int(tok: bytes, offset: int) -> int:
    if not tok.isdigit():
        raise ParseError(f"expected a decimal integer, got {tok[:16]!r}", offset)
    return int(tok)


def decode(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into uint8 (H, W) or (H, W, 3), rescaled to maxval 255."""
    if buf[:2] not in (b"P5", b"P6"):
        raise ParseError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        tok, start, pos = _token(buf, pos)
        fields.append(_int(tok, start))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"non-positive image size {width}x{height}", 2)
    if not 0 < maxval < 256:
        raise ParseError(f"only 8-bit maxval is supported, got {maxval}", start)
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    px = px.reshape(shape).copy()
    if maxval != 255:
        if px.max(initial=0) > maxval:
            raise ParseError(f"pixel value exceeds maxval {maxval}", pos)
        px = np.rint(px.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return px


def encode(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError("NetPBM writer expects uint8 pixels")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode(data)
    except ParseError as e:
        err = ParseError(f"{os.fspath(path)}: {e.args[0]}")
        err.offset = e.offset
        raise err from e


def write(path: Union[str, os.PathLike], pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(pixels))
