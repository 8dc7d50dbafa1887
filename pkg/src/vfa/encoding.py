"""Byte-level helpers: base64url, canonical CBOR, length-prefixed framing."""

from __future__ import annotations

import base64
import hashlib
import io
import struct
from typing import Any

import cbor2


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def unb64url(text: str) -> bytes:
    if not isinstance(text, str):
        raise ValueError("base64url field must be a string")
    pad = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + pad)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def cbor_dumps(obj: Any) -> bytes:
    """Deterministic (canonical) CBOR encoding."""
    return cbor2.dumps(obj, canonical=True)


def cbor_loads(data: bytes) -> Any:
    """Decode exactly one CBOR item; trailing bytes are an error."""
    fp = io.BytesIO(data)
    obj = cbor2.CBORDecoder(fp).decode()
    if fp.tell() != len(data):
        raise ValueError("trailing bytes after CBOR item")
    return obj


def lp32(part: bytes) -> bytes:
    """4-byte big-endian length prefix followed by ``part``."""
    return struct.pack(">I", len(part)) + part


def lp16(part: bytes) -> bytes:
    return struct.pack(">H", len(part)) + part
