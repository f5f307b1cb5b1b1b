"""Stateless server: evaluate wire queries on the replicated store, compress, reply."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gfmath, wire
from .errors import (
    BindError,
    ConfigMismatch,
    IndexOutOfRange,
    MalformedFrame,
    PrivCompError,
    ShapeMismatch,
    UnknownMessage,
)
from .model import CombinationMatrix, DatasetStore, MessageView
from .redundancy import CompressionSpec, compression_spec

log = logging.getLogger(__name__)

WireQuery = tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class AnswerBlock:
    """Compressed answers of one level: one row per vertex."""

    level: int
    values: np.ndarray  # (vertices, rows)

    @property
    def count(self) -> int:
        return int(self.values.size)


def _messages(store: DatasetStore, V: CombinationMatrix) -> np.ndarray:
    return MessageView(store, V).messages()


def evaluate_block(W: np.ndarray, messages: np.ndarray, positions: np.ndarray, signs: np.ndarray, p: int) -> np.ndarray:
    """Vectorized sum_k sign_k * W[m_k, pos_k] mod p for a (count, B) block."""
    if messages.size == 0:
        return np.zeros(messages.shape[0], dtype=np.int64)
    vals = W[messages - 1, positions - 1]
    return (vals * signs).sum(axis=1) % p


def evaluate(store: DatasetStore, V: CombinationMatrix, queries: Sequence[WireQuery]) -> list[int]:
    """Value of every query: sum of sign * W_m(position)."""
    W = _messages(store, V)
    M, L = W.shape
    out = []
    for q in queries:
        total = 0
        for m, pos, s in q:
            if not 1 <= m <= M:
                raise UnknownMessage(f"message {m} outside [1:{M}]")
            if not 1 <= pos <= L:
                raise IndexOutOfRange(f"position {pos} outside [1:{L}]")
            total += s * int(W[m - 1, pos - 1])
        out.append(total % store.p)
    return out


def compress(raw: Sequence[np.ndarray], spec: CompressionSpec) -> list[AnswerBlock]:
    """y = G_m q for every vertex; ``raw[m-1]`` holds level m's values in vertex order."""
    if len(raw) != spec.M:
        raise ShapeMismatch(f"{len(raw)} levels of raw values, expected {spec.M}")
    out = []
    for m, vals in enumerate(raw, 1):
        G = spec.matrix(m)
        vals = np.asarray(vals, dtype=np.int64)
        width = G.shape[1]
        if vals.size % width:
            raise ShapeMismatch(f"level {m}: {vals.size} values is not a multiple of C(M,{m})={width}")
        Q = vals.reshape(-1, width)
        out.append(AnswerBlock(m, gfmath.matmul_mod(Q, G.T, spec.p)))
    return out


class ServerEngine:
    """One replicated server holding the datasets and the public matrix V."""

    def __init__(self, store: DatasetStore, V: CombinationMatrix, *, compress: bool = True):
        if V.p != store.p or V.K != store.K:
            raise ConfigMismatch("store and combination matrix disagree on (p, K)")
        self.store = store
        self.V = V
        self.compress = compress
        self._W = _messages(store, V)
        self._specs: dict[int, CompressionSpec] = {}
        self._lock = threading.Lock()

    @property
    def p(self) -> int:
        return self.store.p

    def spec(self, N: int) -> CompressionSpec:
        with self._lock:
            if N not in self._specs:
                M, K = self.V.M, self.V.K
                self._specs[N] = compression_spec(N, M, K if self.compress else M, self.p, self.V if self.compress else None)
            return self._specs[N]

    def raw_values(self, blocks: Sequence[wire.WireBlock]) -> list[np.ndarray]:
        return [evaluate_block(self._W, b.messages, b.positions, b.signs, self.p) for b in blocks]

    def answer(self, header: wire.RequestHeader, blocks: Sequence[wire.WireBlock]) -> list[AnswerBlock]:
        if header.p != self.p or header.M != self.V.M or header.K != self.V.K:
            raise ConfigMismatch(
                f"request for (p={header.p}, M={header.M}, K={header.K}) sent to a server holding "
                f"(p={self.p}, M={self.V.M}, K={self.V.K})"
            )
        if header.L != self.store.L:
            raise ConfigMismatch(f"request addresses L={header.L}, store holds {self.store.L}")
        return compress(self.raw_values(blocks), self.spec(header.N))

    def handle_bytes(self, data: bytes) -> bytes:
        header, blocks = wire.decode_request(data)
        answers = self.answer(header, blocks)
        flat = np.concatenate([a.values.ravel() for a in answers]) if answers else np.zeros(0, np.int64)
        return wire.encode_response(flat)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(1 << 20, n - len(buf)))
        if not chunk:
            raise MalformedFrame(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_request(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, wire.HEADER_SIZE)
    header = wire.decode_header(head)
    body = wire.request_size(header.N, header.M) - wire.HEADER_SIZE
    return head + _recv_exact(sock, body)


def handle_session(engine: ServerEngine, conn: socket.socket) -> None:
    """Read one full request, then reply; on a bad frame close without answering."""
    try:
        data = read_request(conn)
        reply = engine.handle_bytes(data)
    except PrivCompError as exc:
        log.warning("rejected request: %s: %s", type(exc).__name__, exc)
        return
    conn.sendall(reply)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        handle_session(self.server.engine, self.request)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def serve(engine: ServerEngine, host: str = "127.0.0.1", port: int = 0) -> socketserver.ThreadingTCPServer:
    """Start a threaded TCP server in the background; ``port=0`` picks a free port."""
    try:
        server = _Server((host, port), _Handler)
    except OSError as exc:
        raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
    server.engine = engine
    threading.Thread(target=server.serve_forever, name=f"privcomp-server-{server.server_address[1]}", daemon=True).start()
    log.info("serving on %s:%d", *server.server_address[:2])
    return server
