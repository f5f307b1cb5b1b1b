"""Binary request/response frames exchanged between client and servers.

All integers are little-endian.

Request::

    "PCQ1" | u32 p | u16 N | u16 K | u16 M | u64 L | u32 query_count
    query_count x ( u16 term_count | term_count x (u16 m | u64 position | u8 sign) )

Response::

    "PCA1" | u32 value_count | value_count x u64

Sign bytes are 0 for + and 1 for -.  Queries appear block by block; block
``B`` holds ``(N-1)^(B-1) * C(M,B)`` queries of ``B`` terms, which lets both
ends move whole blocks with a single packed numpy view.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np

from .errors import ConfigMismatch, IndexOutOfRange, MalformedFrame, UnknownMessage, VersionMismatch

REQUEST_MAGIC = b"PCQ1"
RESPONSE_MAGIC = b"PCA1"
_HEADER = struct.Struct("<4sIHHHQI")
_RESP_HEADER = struct.Struct("<4sI")
HEADER_SIZE = _HEADER.size
RESPONSE_HEADER_SIZE = _RESP_HEADER.size


@dataclass(frozen=True)
class RequestHeader:
    p: int
    N: int
    K: int
    M: int
    L: int
    query_count: int


@dataclass(frozen=True)
class WireBlock:
    """``count`` queries of ``block`` terms: (count, block) arrays of m, position and sign."""

    block: int
    messages: np.ndarray
    positions: np.ndarray
    signs: np.ndarray

    @property
    def count(self) -> int:
        return self.messages.shape[0]

    def queries(self) -> list[tuple[tuple[int, int, int], ...]]:
        return [
            tuple(zip(m, pos, s))
            for m, pos, s in zip(self.messages.tolist(), self.positions.tolist(), self.signs.tolist())
        ]


@lru_cache(maxsize=None)
def _block_dtype(B: int) -> np.dtype:
    term = np.dtype([("m", "<u2"), ("pos", "<u8"), ("s", "u1")])
    return np.dtype([("tc", "<u2"), ("terms", term, (B,))])


def block_counts(N: int, M: int) -> list[int]:
    """Queries per block at one server."""
    return [(N - 1) ** (B - 1) * comb(M, B) for B in range(1, M + 1)]


def request_size(N: int, M: int) -> int:
    return HEADER_SIZE + sum(c * _block_dtype(B).itemsize for B, c in enumerate(block_counts(N, M), 1))


def encode_request(header: RequestHeader, blocks: Sequence[WireBlock]) -> bytes:
    parts = [_HEADER.pack(REQUEST_MAGIC, header.p % 2**32, header.N, header.K, header.M, header.L, header.query_count)]
    for bl in blocks:
        if bl.count == 0:
            continue
        arr = np.empty(bl.count, dtype=_block_dtype(bl.block))
        arr["tc"] = bl.block
        arr["terms"]["m"] = bl.messages
        arr["terms"]["pos"] = bl.positions
        arr["terms"]["s"] = (np.asarray(bl.signs) < 0).astype(np.uint8)
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_header(data: bytes) -> RequestHeader:
    if len(data) < HEADER_SIZE:
        raise MalformedFrame(f"request header truncated ({len(data)} of {HEADER_SIZE} bytes)")
    magic, p, N, K, M, L, count = _HEADER.unpack_from(data)
    if magic != REQUEST_MAGIC:
        raise VersionMismatch(f"unknown request magic {magic!r}")
    return RequestHeader(p, N, K, M, L, count)


def decode_request(data: bytes) -> tuple[RequestHeader, list[WireBlock]]:
    """Parse and validate a request whose layout follows the block structure."""
    header = decode_header(data)
    counts = block_counts(header.N, header.M)
    if header.N < 1 or header.M < 1 or sum(counts) != header.query_count:
        raise ConfigMismatch(
            f"query_count {header.query_count} does not fit the block structure for N={header.N}, M={header.M}"
        )
    expected = request_size(header.N, header.M)
    if len(data) < expected:
        raise MalformedFrame(f"request truncated ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise MalformedFrame(f"{len(data) - expected} trailing bytes after request")
    offset = HEADER_SIZE
    blocks = []
    for B, c in enumerate(counts, 1):
        dt = _block_dtype(B)
        arr = np.frombuffer(data, dtype=dt, count=c, offset=offset)
        offset += c * dt.itemsize
        if c and np.any(arr["tc"] != B):
            raise ConfigMismatch(f"block {B} carries queries with a different term count")
        m = arr["terms"]["m"].astype(np.int64).reshape(c, B)
        pos = arr["terms"]["pos"].astype(np.int64).reshape(c, B)
        sbytes = arr["terms"]["s"].reshape(c, B)
        if np.any(sbytes > 1):
            raise MalformedFrame("sign byte outside {0, 1}")
        if c and (m.min() < 1 or m.max() > header.M):
            raise UnknownMessage(f"message index outside [1:{header.M}]")
        if B > 1 and c and np.any(np.diff(m, axis=1) <= 0):
            raise MalformedFrame("message indices must increase within a query")
        if c and (pos.min() < 1 or pos.max() > header.L):
            raise IndexOutOfRange(f"position outside [1:{header.L}]")
        blocks.append(WireBlock(B, m, pos, np.where(sbytes == 1, -1, 1).astype(np.int64)))
    return header, blocks


def encode_response(values: np.ndarray) -> bytes:
    vals = np.ascontiguousarray(values, dtype="<u8").ravel()
    return _RESP_HEADER.pack(RESPONSE_MAGIC, vals.size) + vals.tobytes()


def decode_response(data: bytes, expected: int | None = None) -> np.ndarray:
    if len(data) < RESPONSE_HEADER_SIZE:
        raise MalformedFrame("response header truncated")
    magic, count = _RESP_HEADER.unpack_from(data)
    if magic != RESPONSE_MAGIC:
        raise VersionMismatch(f"unknown response magic {magic!r}")
    if expected is not None and count != expected:
        raise MalformedFrame(f"response carries {count} values, expected {expected}")
    if len(data) != RESPONSE_HEADER_SIZE + 8 * count:
        raise MalformedFrame("response length does not match its value count")
    return np.frombuffer(data, dtype="<u8", offset=RESPONSE_HEADER_SIZE).astype(np.int64)
