"""Client side: plan a retrieval, talk to the servers, decode the desired message.

Decoding walks the levels in order.  For every vertex at level ``m`` the
client knows the ``G_m``-compressed answers ``y`` and, from the parent
vertex (decoded one level earlier at another server), the side information
mixed into each desired-symbol query.  The redundancy relations turn that
into a square system::

    [G_m]       [y              ]
    [R_m] q  =  [P (eps * parent)]

whose inverse depends only on (theta, m, V), so one inverse serves every
vertex of the level and the solve is a single matrix product.
"""

from __future__ import annotations

import hashlib
import json
import logging
import socket
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from itertools import combinations
from math import comb
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import gfmath, planner, wire
from .analysis import pc_capacity
from .errors import DecodeError, IncompleteAnswers, InvalidArgument, PrivCompError, TransportError
from .model import CombinationMatrix
from .planner import QueryPlan, QueryVertex
from .redundancy import CompressionSpec, compression_spec, relation_matrix, select_basis
from .serverengine import AnswerBlock, ServerEngine

log = logging.getLogger(__name__)


# --- decode structure --------------------------------------------------------------


@dataclass(frozen=True)
class LevelStructure:
    level: int
    chains: tuple[tuple[int, ...], ...]  # vertex order: servers ascending, canonical within a server
    counts: tuple[int, ...]  # vertices per server
    parent_row: np.ndarray  # (n_v,) row of the parent in the previous level, -1 at level 1
    theta_index: np.ndarray  # (n_v, n_src) virtual index of each desired symbol
    src_pos: np.ndarray  # positions of the desired-message types among the C(M,m) types
    i_pos: np.ndarray  # positions of the other types
    parent_i: np.ndarray  # for each desired-message type, column in the parent's I-values
    s_theta: np.ndarray  # sign of the desired term per desired-message type
    eps: np.ndarray  # side-information sign per desired-message type


def _vertex_signs(v: QueryVertex, parent: QueryVertex | None, theta: int, types, p_types) -> tuple[list[int], list[int]]:
    by_type = {q.messages: q for q in v.m_part}
    parent_by_type = {q.messages: q for q in parent.i_part} if parent else {}
    s_list, e_list = [], []
    for t in types:
        q = by_type[t]
        s = next(sg for m, _, sg in q.terms if m == theta)
        s_list.append(s)
        if parent is None:
            e_list.append(1)
            continue
        pq = parent_by_type[tuple(x for x in t if x != theta)]
        ratios = set()
        rest = [(m, i, sg) for m, i, sg in q.terms if m != theta]
        for (m, i, sg), (pm, pi, psg) in zip(rest, pq.terms):
            if (m, i) != (pm, pi):
                raise DecodeError(f"vertex {v.chain}: desired query {t} does not embed its side information")
            ratios.add(sg * psg)
        if len(ratios) != 1:
            raise DecodeError(f"vertex {v.chain}: side information enters query {t} with mixed signs")
        e_list.append(ratios.pop())
    return s_list, e_list


@lru_cache(maxsize=32)
def _structure_cached(theta: int, N: int, M: int, p: int | None) -> tuple[LevelStructure, ...]:
    return build_structure(planner.make_plan(theta, N, M, p))


def build_structure(plan: QueryPlan) -> tuple[LevelStructure, ...]:
    theta, M = plan.theta, plan.M
    levels = []
    prev_rows: dict[tuple[int, ...], int] = {}
    for m in range(1, M + 1):
        types = list(combinations(range(1, M + 1), m))
        src_types = [t for t in types if theta in t]
        pos = {t: k for k, t in enumerate(types)}
        p_types = [s for s in combinations([x for x in range(1, M + 1) if x != theta], m - 1)]
        p_col = {t: k for k, t in enumerate(p_types)}
        chains, counts, parent_row, tidx = [], [], [], []
        s_ref = e_ref = None
        for n in sorted(plan.vertices):
            vs = plan.server_vertices(n, m)
            counts.append(len(vs))
            for v in vs:
                parent = plan.vertex(v.chain[1:]) if m > 1 else None
                by_type = {q.messages: q for q in v.m_part}
                tidx.append([by_type[t].index_of(theta) for t in src_types])
                parent_row.append(prev_rows[v.chain[1:]] if m > 1 else -1)
                chains.append(v.chain)
                s, e = _vertex_signs(v, parent, theta, src_types, p_types)
                if s_ref is None:
                    s_ref, e_ref = s, e
                elif (s, e) != (s_ref, e_ref):
                    raise DecodeError(f"level {m}: sign structure differs between vertices")
        n_src = len(src_types)
        levels.append(
            LevelStructure(
                level=m,
                chains=tuple(chains),
                counts=tuple(counts),
                parent_row=np.array(parent_row, dtype=np.int64),
                theta_index=np.array(tidx, dtype=np.int64).reshape(len(chains), n_src),
                src_pos=np.array([pos[t] for t in src_types], dtype=np.int64),
                i_pos=np.array([pos[t] for t in types if theta not in t], dtype=np.int64),
                parent_i=np.array([p_col[tuple(x for x in t if x != theta)] for t in src_types], dtype=np.int64),
                s_theta=np.array(s_ref or [1] * n_src, dtype=np.int64),
                eps=np.array(e_ref or [1] * n_src, dtype=np.int64),
            )
        )
        prev_rows = {c: k for k, c in enumerate(chains)}
    return tuple(levels)


def plan_structure(plan: QueryPlan) -> tuple[LevelStructure, ...]:
    return _structure_cached(plan.theta, plan.N, plan.M, plan.p)


@dataclass(frozen=True)
class LevelSystem:
    """Inverse of stack(G_m, R_m) and the side-information map P for one level."""

    inverse: np.ndarray
    P: np.ndarray
    rows: int


@lru_cache(maxsize=64)
def _level_systems(theta: int, V: CombinationMatrix, spec: CompressionSpec) -> tuple[LevelSystem, ...]:
    ctx = gfmath.field_context(V.p)
    compressed = spec.K == V.K
    basis = select_basis(theta, V) if compressed else None
    out = []
    for m in range(1, V.M + 1):
        G = spec.matrix(m)
        if compressed:
            R, P = relation_matrix(theta, m, basis)
        else:
            R, P = np.zeros((0, G.shape[1]), np.int64), np.zeros((0, comb(V.M - 1, m - 1)), np.int64)
        try:
            inv = gfmath.inverse(ctx, np.vstack([G, R]).tolist())
        except PrivCompError as exc:
            raise DecodeError(f"level {m} is not decodable for theta={theta}: {exc}") from exc
        out.append(LevelSystem(np.array(inv, dtype=np.int64), P, G.shape[0]))
    return tuple(out)


class SideInfoLedger:
    """Decoded undesired-query values per vertex, filled level by level."""

    def __init__(self):
        self._levels: dict[int, np.ndarray] = {}
        self._chains: dict[int, tuple] = {}
        self.missing_reads = 0

    def record(self, level: int, chains: Sequence[tuple[int, ...]], values: np.ndarray) -> None:
        self._levels[level] = values
        self._chains[level] = tuple(chains)

    def level(self, m: int) -> np.ndarray:
        if m not in self._levels:
            self.missing_reads += 1
            raise DecodeError(f"side information for level {m} requested before it was decoded")
        return self._levels[m]

    def get(self, chain: tuple[int, ...]) -> np.ndarray:
        m = len(chain)
        rows = self.level(m)
        try:
            return rows[self._chains[m].index(tuple(chain))]
        except ValueError:
            self.missing_reads += 1
            raise DecodeError(f"no side information for vertex {chain}") from None

    def __contains__(self, chain) -> bool:
        m = len(chain)
        return m in self._chains and tuple(chain) in self._chains[m]


def _solve_level(st: LevelStructure, sysm: LevelSystem, Y: np.ndarray, parent_vals: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (all query values q, desired symbols) for a batch of vertices."""
    side = (parent_vals * st.eps) % p
    rhs = gfmath.matmul_mod(side, sysm.P.T % p, p) if sysm.P.size else np.zeros((Y.shape[0], 0), np.int64)
    Z = np.concatenate([Y % p, rhs], axis=1)
    q = gfmath.matmul_mod(Z, sysm.inverse.T, p)
    desired = (st.s_theta * (q[:, st.src_pos] - side)) % p
    return q, desired


def decode_vertex(
    plan: QueryPlan,
    vertex: QueryVertex,
    answers: np.ndarray,
    V: CombinationMatrix,
    spec: CompressionSpec,
    ledger: SideInfoLedger,
) -> tuple[dict[int, int], np.ndarray]:
    """Decode one vertex: ({virtual index: u_theta value}, undesired-query values)."""
    m = vertex.level
    st = plan_structure(plan)[m - 1]
    sysm = _level_systems(plan.theta, V, spec)[m - 1]
    row = st.chains.index(vertex.chain)
    if m > 1:
        parent_vals = ledger.get(vertex.chain[1:])[st.parent_i][None, :]
    else:
        parent_vals = np.zeros((1, len(st.src_pos)), np.int64)
    q, desired = _solve_level(st, sysm, np.asarray(answers, np.int64)[None, :], parent_vals, V.p)
    return dict(zip(st.theta_index[row].tolist(), desired[0].tolist())), q[0, st.i_pos]


def _split_answers(plan: QueryPlan, answers: Mapping[int, np.ndarray | Sequence[AnswerBlock]], spec: CompressionSpec, structure) -> list[np.ndarray]:
    """Per level, a (n_vertices, rows) matrix assembled across servers."""
    per_level: list[list[np.ndarray]] = [[] for _ in range(plan.M)]
    for idx, n in enumerate(sorted(plan.vertices)):
        if n not in answers:
            raise IncompleteAnswers(f"no answers from server {n}")
        got = answers[n]
        if not isinstance(got, np.ndarray):
            got = np.concatenate([b.values.ravel() for b in got]) if got else np.zeros(0, np.int64)
        offset = 0
        for m in range(1, plan.M + 1):
            rows = spec.levels[m - 1].rows
            cnt = structure[m - 1].counts[idx]
            chunk = got[offset : offset + cnt * rows]
            if chunk.size != cnt * rows:
                raise IncompleteAnswers(f"server {n} returned too few values for level {m}")
            per_level[m - 1].append(chunk.reshape(cnt, rows))
            offset += cnt * rows
        if offset != got.size:
            raise IncompleteAnswers(f"server {n} returned {got.size - offset} unexpected extra values")
    return [np.concatenate(x, axis=0) for x in per_level]


def decode(
    plan: QueryPlan,
    answers: Mapping[int, np.ndarray | Sequence[AnswerBlock]],
    *,
    V: CombinationMatrix,
    spec: CompressionSpec,
    ledger: SideInfoLedger | None = None,
) -> np.ndarray:
    """Recover W_theta(1..L) from every server's compressed answers."""
    if plan.randomizer is None:
        raise InvalidArgument("plan has no randomizer")
    p = V.p
    structure = plan_structure(plan)
    systems = _level_systems(plan.theta, V, spec)
    Ys = _split_answers(plan, answers, spec, structure)
    ledger = ledger if ledger is not None else SideInfoLedger()
    u_theta = np.full(plan.L + 1, -1, dtype=np.int64)
    for m in range(1, plan.M + 1):
        st = structure[m - 1]
        if m > 1:
            parent_vals = ledger.level(m - 1)[st.parent_row][:, st.parent_i]
        else:
            parent_vals = np.zeros((len(st.chains), len(st.src_pos)), np.int64)
        q, desired = _solve_level(st, systems[m - 1], Ys[m - 1], parent_vals, p)
        u_theta[st.theta_index.ravel()] = desired.ravel()
        ledger.record(m, st.chains, q[:, st.i_pos])
    if np.any(u_theta[1:] < 0):
        raise DecodeError("some desired symbols were never recovered")
    return _unrandomize(plan, u_theta, p)


def _unrandomize(plan: QueryPlan, u_theta: np.ndarray, p: int) -> np.ndarray:
    r = plan.randomizer
    out = np.zeros(plan.L, dtype=np.int64)
    out[r.pi_array[1:] - 1] = (r.sigma_array[1:] * u_theta[1:]) % p
    return out


def decode_uncompressed_oracle(plan: QueryPlan, raw: Mapping[int, Sequence[int]], p: int) -> np.ndarray:
    """Structural decode from raw (uncompressed) answers, vertex by vertex."""
    theta = plan.theta
    u_theta: dict[int, int] = {}
    i_values: dict[tuple[int, ...], dict[tuple[int, ...], int]] = {}
    for n in sorted(plan.vertices):
        vals = list(raw[n])
        k = 0
        for v in plan.vertices[n]:
            for q in v.queries:
                i_values.setdefault(v.chain, {})[q.messages] = int(vals[k])
                k += 1
    for m in range(1, plan.M + 1):
        for n in sorted(plan.vertices):
            for v in plan.server_vertices(n, m):
                mine = i_values[v.chain]
                for q in v.m_part:
                    s = next(sg for mm, _, sg in q.terms if mm == theta)
                    side = 0
                    if m > 1:
                        rest = tuple(x for x in q.messages if x != theta)
                        parent_q = next(x for x in plan.vertex(v.chain[1:]).i_part if x.messages == rest)
                        sign = {t[:2]: t[2] for t in parent_q.terms}
                        eps = {t[2] * sign[t[:2]] for t in q.terms if t[0] != theta}
                        if len(eps) != 1:
                            raise DecodeError("inconsistent side-information signs")
                        side = eps.pop() * i_values[v.chain[1:]][rest]
                    u_theta[q.index_of(theta)] = s * (mine[q.messages] - side) % p
    arr = np.full(plan.L + 1, 0, dtype=np.int64)
    for i, val in u_theta.items():
        arr[i] = val
    return _unrandomize(plan, arr, p)


# --- transports --------------------------------------------------------------------


class Endpoint(Protocol):
    def send(self, request: bytes) -> None: ...

    def receive(self) -> bytes: ...


class InProcessEndpoint:
    """Direct call into a :class:`ServerEngine`; same bytes as the socket path."""

    def __init__(self, engine: ServerEngine):
        self.engine = engine
        self._pending: bytes | None = None

    def send(self, request: bytes) -> None:
        self._pending = request

    def receive(self) -> bytes:
        if self._pending is None:
            raise TransportError("receive() before send()")
        data, self._pending = self._pending, None
        try:
            return self.engine.handle_bytes(data)
        except PrivCompError as exc:
            raise TransportError(f"server rejected the request: {exc}") from exc


class SocketEndpoint:
    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self.address = (host, port)
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def send(self, request: bytes) -> None:
        try:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
            self._sock.sendall(request)
            self._sock.shutdown(socket.SHUT_WR)
        except OSError as exc:
            raise TransportError(f"cannot send to {self.address[0]}:{self.address[1]}: {exc}") from exc

    def receive(self) -> bytes:
        if self._sock is None:
            raise TransportError("receive() before send()")
        chunks = []
        try:
            while True:
                chunk = self._sock.recv(1 << 20)
                if not chunk:
                    break
                chunks.append(chunk)
        except OSError as exc:
            raise TransportError(f"receive from {self.address[0]}:{self.address[1]} failed: {exc}") from exc
        finally:
            self._sock.close()
            self._sock = None
        data = b"".join(chunks)
        if not data:
            raise TransportError(f"server {self.address[0]}:{self.address[1]} closed without answering")
        return data


def parse_endpoints(text: str) -> list[tuple[str, int]]:
    out = []
    for item in text.split(","):
        host, _, port = item.strip().rpartition(":")
        if not host or not port.isdigit():
            raise InvalidArgument(f"endpoint {item!r} is not host:port")
        out.append((host, int(port)))
    return out


# --- retrieval ---------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalConfig:
    N: int
    V: CombinationMatrix
    store_length: int | None = None  # defaults to one round, N^M
    compress: bool = True
    identity_randomizer: bool = False

    @property
    def M(self) -> int:
        return self.V.M

    @property
    def K(self) -> int:
        return self.V.K

    @property
    def p(self) -> int:
        return self.V.p

    @property
    def round_length(self) -> int:
        return self.N**self.M

    @property
    def rounds(self) -> int:
        total = self.store_length or self.round_length
        if total % self.round_length:
            raise InvalidArgument(f"store length {total} is not a multiple of N^M={self.round_length}")
        return total // self.round_length


@dataclass
class Transcript:
    N: int
    K: int
    M: int
    p: int
    L: int
    rounds: int
    compress: bool
    theta: int = field(repr=False)
    requests: list[dict[int, bytes]] = field(repr=False, default_factory=list)
    responses: list[dict[int, bytes]] = field(repr=False, default_factory=list)
    decoded: np.ndarray | None = field(repr=False, default=None)
    D_total: int = 0

    @property
    def rate(self) -> Fraction:
        return Fraction(self.L, self.D_total)

    def digest(self) -> str:
        h = hashlib.sha256()
        for rnd in self.requests + self.responses:
            for n in sorted(rnd):
                h.update(rnd[n])
        return h.hexdigest()

    def summary(self, *, redact: bool = True) -> dict:
        out = {
            "N": self.N,
            "K": self.K,
            "M": self.M,
            "p": self.p,
            "L": self.L,
            "rounds": self.rounds,
            "compressed": self.compress,
            "D_total": self.D_total,
            "rate": str(self.rate),
            "capacity": str(pc_capacity(self.N, self.K)),
            "match": self.rate == pc_capacity(self.N, self.K),
            "request_bytes": {str(n): sum(len(r[n]) for r in self.requests) for n in sorted(self.requests[0])} if self.requests else {},
            "transcript_sha256": self.digest(),
        }
        if not redact:
            out["theta"] = self.theta
        return out

    def to_json(self, *, redact: bool = True) -> str:
        return json.dumps(self.summary(redact=redact), indent=2, sort_keys=True)


def _round_seed(seed: int | None, rnd: int) -> int | None:
    if seed is None or rnd == 0:
        return seed
    return int.from_bytes(hashlib.sha256(f"{seed}:{rnd}".encode()).digest()[:8], "little")


def build_requests(plan: QueryPlan, config: RetrievalConfig, rnd: int = 0, *, leak_theta: bool = False) -> dict[int, bytes]:
    layout = planner.wire_layout(plan, leak_theta=leak_theta)
    offset = rnd * config.round_length
    L_store = config.rounds * config.round_length
    out = {}
    for n, lay in layout.items():
        blocks = [wire.WireBlock(b.block, b.messages, b.index + offset, b.signs) for b in lay.blocks]
        header = wire.RequestHeader(config.p, config.N, config.K, config.M, L_store, sum(b.count for b in blocks))
        out[n] = wire.encode_request(header, blocks)
    return out


def retrieve(theta: int, endpoints: Sequence[Endpoint], config: RetrievalConfig, seed: int | None = None) -> Transcript:
    """Run every round against ``endpoints`` (one per server) and decode W_theta."""
    N, M = config.N, config.M
    if len(endpoints) != N:
        raise InvalidArgument(f"{len(endpoints)} endpoints for N={N} servers")
    if not 1 <= theta <= M:
        raise InvalidArgument(f"theta={theta} outside [1:{M}]")
    base = planner.make_plan(theta, N, M, config.p)
    spec = compression_spec(N, M, config.K if config.compress else M, config.p, config.V if config.compress else None)
    transcript = Transcript(N, config.K, M, config.p, config.rounds * config.round_length, config.rounds, config.compress, theta)
    expected = spec.per_server_download()
    pieces = []
    for rnd in range(config.rounds):
        plan = planner.randomize(base, _round_seed(seed, rnd), identity=config.identity_randomizer)
        requests = build_requests(plan, config, rnd)
        for n, ep in enumerate(endpoints, 1):
            ep.send(requests[n])
        responses = {n: ep.receive() for n, ep in enumerate(endpoints, 1)}
        answers = {}
        for n, data in responses.items():
            try:
                answers[n] = wire.decode_response(data)
            except PrivCompError as exc:
                raise TransportError(f"bad response from server {n}: {exc}") from exc
            if answers[n].size != expected:
                raise IncompleteAnswers(f"server {n} sent {answers[n].size} symbols, expected {expected}")
            transcript.D_total += answers[n].size
        pieces.append(decode(plan, answers, V=config.V, spec=spec))
        transcript.requests.append(requests)
        transcript.responses.append(responses)
    transcript.decoded = np.concatenate(pieces)
    return transcript


def local_endpoints(store, V: CombinationMatrix, N: int, *, compress: bool = True) -> list[InProcessEndpoint]:
    """N in-process replicas of the same store."""
    engine = ServerEngine(store, V, compress=compress)
    return [InProcessEndpoint(engine) for _ in range(N)]
