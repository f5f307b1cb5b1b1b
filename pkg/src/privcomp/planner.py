"""Private query plans: the query tree, index assignment and sign assignment.

A plan is built in four passes:

1. :func:`build_tree` grows the per-server query tree.  Each vertex holds the
   queries containing the desired message (``m_part``, produced by
   :func:`exploit_si` from the parent's side information) and the queries
   that do not (``i_part``, produced by :func:`m_sym` for message symmetry).
2. :func:`sign_assign` attaches +/- to every term.
3. :func:`randomize` draws the private permutation and sign vector.
4. :func:`to_wire` / :func:`wire_layout` emit the server-visible queries.

Indices are 1-based throughout: messages ``1..M``, servers ``1..N`` and
virtual symbol indices ``1..L`` with ``L = N**M``.
"""

from __future__ import annotations

import itertools
import logging
import hashlib
import warnings
from dataclasses import dataclass, replace
from collections import OrderedDict
from functools import cached_property, lru_cache
from math import comb
from typing import Iterator, Sequence

import numpy as np

from .errors import AllocatorExhausted, InvalidArgument, MissingSource, SignConflict

log = logging.getLogger(__name__)

Term = tuple[int, int, int]  # (message, virtual index, scheme sign)
Chain = tuple[int, ...]  # (n_B, ..., n_1); chain[0] is the owning server


@dataclass(frozen=True, slots=True)
class Query:
    """Signed sum of one symbol from each of several distinct messages.

    Terms are kept in increasing message order.
    """

    terms: tuple[Term, ...]

    @property
    def messages(self) -> tuple[int, ...]:
        return tuple(t[0] for t in self.terms)

    @property
    def block(self) -> int:
        return len(self.terms)

    def delta(self, theta: int) -> int:
        """1-based position of message ``theta`` in the query, 0 if absent."""
        for pos, t in enumerate(self.terms, 1):
            if t[0] == theta:
                return pos
        return 0

    def index_of(self, m: int) -> int:
        for t in self.terms:
            if t[0] == m:
                return t[1]
        raise KeyError(m)

    @classmethod
    def of(cls, terms) -> "Query":
        return cls(tuple(sorted(terms)))


@dataclass(frozen=True)
class QueryVertex:
    chain: Chain
    m_part: tuple[Query, ...]
    i_part: tuple[Query, ...]

    @property
    def server(self) -> int:
        return self.chain[0]

    @property
    def level(self) -> int:
        return len(self.chain)

    @property
    def parent_chain(self) -> Chain | None:
        return self.chain[1:] or None

    @cached_property
    def queries(self) -> tuple[Query, ...]:
        """All queries in wire order: lexicographic by message tuple."""
        return tuple(sorted(self.m_part + self.i_part, key=lambda q: q.messages))

    @cached_property
    def positions(self) -> dict[tuple[int, ...], int]:
        return {q.messages: k for k, q in enumerate(self.queries)}


@dataclass(frozen=True)
class Randomizer:
    """Private permutation and signs: u_m(i) = sigma_i W_m(pi(i))."""

    pi: tuple[int, ...]  # pi[i-1] = pi(i)
    sigma: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        if sorted(self.pi) != list(range(1, len(self.pi) + 1)):
            raise InvalidArgument("pi is not a permutation of [1:L]")
        if len(self.sigma) != len(self.pi) or any(s not in (1, -1) for s in self.sigma):
            raise InvalidArgument("sigma must be L signs in {+1, -1}")

    @classmethod
    def identity(cls, L: int) -> "Randomizer":
        return cls(tuple(range(1, L + 1)), (1,) * L)

    @cached_property
    def pi_array(self) -> np.ndarray:
        return np.array((0,) + self.pi, dtype=np.int64)

    @cached_property
    def sigma_array(self) -> np.ndarray:
        return np.array((0,) + self.sigma, dtype=np.int64)


@dataclass(frozen=True)
class QueryPlan:
    theta: int
    N: int
    M: int
    vertices: dict[int, tuple[QueryVertex, ...]]  # server -> canonical order
    allocation: tuple[tuple[int, Chain], ...]  # (fresh index, vertex chain), in visit order
    signed: bool = False
    p: int | None = None
    K: int | None = None  # informational; the tree itself does not depend on K
    randomizer: Randomizer | None = None

    @property
    def L(self) -> int:
        return self.N**self.M

    @cached_property
    def by_chain(self) -> dict[Chain, QueryVertex]:
        return {v.chain: v for vs in self.vertices.values() for v in vs}

    def vertex(self, chain: Chain) -> QueryVertex:
        return self.by_chain[tuple(chain)]

    def server_vertices(self, n: int, block: int | None = None) -> list[QueryVertex]:
        return [v for v in self.vertices[n] if block is None or v.level == block]

    def iter_queries(self) -> Iterator[tuple[QueryVertex, Query]]:
        for n in sorted(self.vertices):
            for v in self.vertices[n]:
                for q in v.queries:
                    yield v, q

    @cached_property
    def sub_blocks(self) -> dict[int, dict[int, int]]:
        """block -> {delta: S}.  Positive deltas are numbered in descending
        order; the delta = 0 group gets the last number."""
        seen: dict[int, set[int]] = {}
        for v in self.vertices[1]:
            for q in v.queries:
                seen.setdefault(q.block, set()).add(q.delta(self.theta))
        out = {}
        for b, deltas in seen.items():
            order = sorted((d for d in deltas if d > 0), reverse=True)
            if 0 in deltas:
                order.append(0)
            out[b] = {d: s for s, d in enumerate(order, 1)}
        return out

    def sub_block(self, q: Query) -> int:
        return self.sub_blocks[q.block][q.delta(self.theta)]

    def query_count(self, n: int | None = None) -> int:
        servers = [n] if n is not None else list(self.vertices)
        return sum(len(v.queries) for s in servers for v in self.vertices[s])


class IndexAllocator:
    """Hands out fresh desired-symbol indices in visit order."""

    def __init__(self, start: int, limit: int):
        self.next_index = start
        self.limit = limit
        self.log: list[tuple[int, Chain]] = []
        self.owner: Chain = ()

    def __call__(self) -> int:
        if self.next_index > self.limit:
            raise AllocatorExhausted(f"more than {self.limit} desired-symbol indices requested")
        i = self.next_index
        self.next_index += 1
        self.log.append((i, self.owner))
        return i


def expected_queries_per_server(N: int, M: int) -> int:
    return sum((N - 1) ** (m - 1) * (comb(M - 1, m) + comb(M - 1, m - 1)) for m in range(1, M + 1))


def exploit_si(prev_i: Sequence[Query], theta: int, allocator: IndexAllocator) -> list[Query]:
    """Mix a fresh desired symbol into every side-information query."""
    out = []
    for q in prev_i:
        if theta in q.messages:
            raise InvalidArgument("side-information query already contains the desired message")
        out.append(Query.of(q.terms + ((theta, allocator(), 1),)))
    return out


def m_sym(m_queries: Sequence[Query], theta: int, block: int, M: int) -> list[Query]:
    """Queries of every type avoiding ``theta``, indices forced by ``m_queries``.

    For the subset {i_1 < ... < i_B}, the symbol of u_{i_l} takes the
    desired-symbol index of the query whose other messages are the subset
    without i_l.
    """
    source: dict[tuple[int, ...], int] = {}
    for q in m_queries:
        rest = tuple(m for m in q.messages if m != theta)
        source[rest] = q.index_of(theta)
    others = [m for m in range(1, M + 1) if m != theta]
    out = []
    for subset in itertools.combinations(others, block):
        terms = []
        for l, i in enumerate(subset):
            key = subset[:l] + subset[l + 1 :]
            if key not in source:
                raise MissingSource(f"no desired-symbol query over messages {key}")
            terms.append((i, source[key], 1))
        out.append(Query(tuple(terms)))
    return out


def build_tree(theta: int, N: int, M: int) -> QueryPlan:
    """Unsigned query tree with index assignment for every server."""
    if M < 1 or N < 1:
        raise InvalidArgument(f"need N >= 1 and M >= 1, got N={N}, M={M}")
    if not 1 <= theta <= M:
        raise InvalidArgument(f"theta={theta} outside [1:{M}]")
    if N == 1:
        warnings.warn("N=1: single server, the plan downloads everything and privacy is vacuous", stacklevel=2)
    L = N**M
    allocator = IndexAllocator(N + 1, L)
    per_server: dict[int, list[QueryVertex]] = {n: [] for n in range(1, N + 1)}
    for n in range(1, N + 1):
        m_part = [Query(((theta, n, 1),))]
        allocator.log.append((n, (n,)))
        per_server[n].append(QueryVertex((n,), tuple(m_part), tuple(m_sym(m_part, theta, 1, M))))
    previous = {n: list(per_server[n]) for n in per_server}
    for block in range(2, M + 1):
        current: dict[int, list[QueryVertex]] = {n: [] for n in per_server}
        for n in range(1, N + 1):
            for parent_server in range(1, N + 1):
                if parent_server == n:
                    continue
                for parent in previous[parent_server]:
                    chain = (n,) + parent.chain
                    allocator.owner = chain
                    m_part = exploit_si(parent.i_part, theta, allocator)
                    i_part = m_sym(m_part, theta, block, M)
                    current[n].append(QueryVertex(chain, tuple(m_part), tuple(i_part)))
        for n in per_server:
            per_server[n].extend(current[n])
        previous = current
    log.debug("built tree theta=%d N=%d M=%d with %d fresh indices", theta, N, M, allocator.next_index - 1)
    return QueryPlan(
        theta=theta,
        N=N,
        M=M,
        vertices={n: tuple(vs) for n, vs in per_server.items()},
        allocation=tuple(sorted(allocator.log)),
    )


def _alternating(q: Query) -> Query:
    return Query(tuple((m, i, 1 if pos % 2 == 0 else -1) for pos, (m, i, _) in enumerate(q.terms)))


def sign_assign(plan: QueryPlan, p: int | None = None) -> QueryPlan:
    """Attach scheme signs to every term.

    Step 1 alternates signs inside queries without the desired message;
    step 2 negates every other occurrence of a symbol negated in step 1;
    step 3 multiplies each query holding the desired message by
    (-1)^(S + [theta != 1]); step 4 then gives the desired term the sign
    (-1)^(delta + 1).  Over F_2 every sign collapses to +.
    """
    theta = plan.theta
    if p == 2:
        flat = {
            n: tuple(
                QueryVertex(
                    v.chain,
                    tuple(Query(tuple((m, i, 1) for m, i, _ in q.terms)) for q in v.m_part),
                    tuple(Query(tuple((m, i, 1) for m, i, _ in q.terms)) for q in v.i_part),
                )
                for v in vs
            )
            for n, vs in plan.vertices.items()
        }
        return replace(plan, vertices=flat, signed=True, p=p)

    # step 1: every query without theta is an i_part query
    negated: set[tuple[int, int]] = set()
    positive: set[tuple[int, int]] = set()
    for vs in plan.vertices.values():
        for v in vs:
            for q in v.i_part:
                for pos, (m, i, _) in enumerate(q.terms):
                    (negated if pos % 2 else positive).add((m, i))
    clash = negated & positive
    if clash:
        raise SignConflict(f"symbols {sorted(clash)[:5]} need both signs")

    indicator = 0 if theta == 1 else 1
    sub_blocks = plan.sub_blocks

    def signed_m(q: Query) -> Query:
        delta = q.delta(theta)
        flip = -1 if (sub_blocks[q.block][delta] + indicator) % 2 else 1
        terms = []
        for m, i, _ in q.terms:
            if m == theta:
                s = 1 if delta % 2 else -1  # step 4 overrides steps 2-3
            else:
                s = (-1 if (m, i) in negated else 1) * flip
            terms.append((m, i, s))
        return Query(tuple(terms))

    signed = {
        n: tuple(
            QueryVertex(v.chain, tuple(signed_m(q) for q in v.m_part), tuple(_alternating(q) for q in v.i_part))
            for v in vs
        )
        for n, vs in plan.vertices.items()
    }
    return replace(plan, vertices=signed, signed=True, p=p)


def _seed_entropy(seed) -> int | None:
    if seed is None or (isinstance(seed, int) and seed >= 0):
        return seed
    return int.from_bytes(hashlib.sha256(repr(seed).encode()).digest()[:16], "little")


def randomize(plan: QueryPlan, seed: int | str | None = None, *, identity: bool = False) -> QueryPlan:
    """Attach a private (pi, sigma); uniform and deterministic given ``seed``.

    ``seed=None`` draws fresh OS entropy.  Non-integer seeds are hashed.
    """
    L = plan.L
    if identity:
        return replace(plan, randomizer=Randomizer.identity(L))
    rng = np.random.default_rng(_seed_entropy(seed))
    pi = rng.permutation(L) + 1
    if plan.p == 2:
        sigma = np.ones(L, dtype=np.int64)
    else:
        sigma = 1 - 2 * rng.integers(0, 2, size=L)
    return replace(plan, randomizer=Randomizer(tuple(pi.tolist()), tuple(sigma.tolist()), seed))


@lru_cache(maxsize=24)
def make_plan(theta: int, N: int, M: int, p: int | None = None) -> QueryPlan:
    """Signed plan without a randomizer (memoized; plans are immutable)."""
    return sign_assign(build_tree(theta, N, M), p)


# --- wire layout -----------------------------------------------------------------


@dataclass(frozen=True)
class BlockLayout:
    """All queries of one block at one server, in wire order.

    Arrays have shape (vertex_count * C(M, B), B); rows follow vertex order
    and, inside a vertex, lexicographic message order.
    """

    block: int
    messages: np.ndarray
    index: np.ndarray  # virtual index, or wire position after randomization
    signs: np.ndarray

    @property
    def count(self) -> int:
        return self.messages.shape[0]


@dataclass(frozen=True)
class ServerLayout:
    server: int
    blocks: tuple[BlockLayout, ...]


def _build_layout(plan: QueryPlan) -> dict[int, ServerLayout]:
    out = {}
    for n, vs in plan.vertices.items():
        blocks = []
        for b in range(1, plan.M + 1):
            rows = [q.terms for v in vs if v.level == b for q in v.queries]
            arr = np.array(rows, dtype=np.int64).reshape(len(rows), b, 3)
            blocks.append(BlockLayout(b, arr[:, :, 0].copy(), arr[:, :, 1].copy(), arr[:, :, 2].copy()))
        out[n] = ServerLayout(n, tuple(blocks))
    return out


_LAYOUT_CACHE: OrderedDict[int, tuple[dict, dict[int, ServerLayout]]] = OrderedDict()


def virtual_layout(plan: QueryPlan) -> dict[int, ServerLayout]:
    """Wire-ordered query arrays before (pi, sigma) are applied."""
    key = id(plan.vertices)
    hit = _LAYOUT_CACHE.get(key)
    if hit is not None and hit[0] is plan.vertices:
        _LAYOUT_CACHE.move_to_end(key)
        return hit[1]
    layout = _build_layout(plan)
    _LAYOUT_CACHE[key] = (plan.vertices, layout)
    while len(_LAYOUT_CACHE) > 16:
        _LAYOUT_CACHE.popitem(last=False)
    return layout


def wire_layout(plan: QueryPlan, *, leak_theta: bool = False) -> dict[int, ServerLayout]:
    """Server-visible queries: term (m, i, s) becomes (m, pi(i), s * sigma_i).

    ``leak_theta`` builds a deliberately broken variant used only as a
    negative control in privacy audits: when theta != 1 the very first
    term sent to each server ignores sigma.
    """
    if plan.randomizer is None:
        raise InvalidArgument("plan has no randomizer; call randomize() first")
    r = plan.randomizer
    out = {}
    for n, lay in virtual_layout(plan).items():
        blocks = []
        for bl in lay.blocks:
            signs = bl.signs * r.sigma_array[bl.index]
            blocks.append(BlockLayout(bl.block, bl.messages, r.pi_array[bl.index], signs))
        if leak_theta and plan.theta != 1:
            first = blocks[0]
            signs = first.signs.copy()
            signs[0, 0] = 1
            blocks[0] = BlockLayout(first.block, first.messages, first.index, signs)
        out[n] = ServerLayout(n, tuple(blocks))
    return out


def to_wire(plan: QueryPlan, *, leak_theta: bool = False) -> dict[int, list[tuple[Term, ...]]]:
    """Per-server ordered list of wire queries as tuples of (m, position, sign)."""
    out = {}
    for n, lay in wire_layout(plan, leak_theta=leak_theta).items():
        qs = []
        for bl in lay.blocks:
            for mrow, prow, srow in zip(bl.messages.tolist(), bl.index.tolist(), bl.signs.tolist()):
                qs.append(tuple(zip(mrow, prow, srow)))
        out[n] = qs
    return out


# --- presentation ----------------------------------------------------------------


def _letter(m: int, M: int) -> str:
    return chr(ord("a") + m - 1) if M <= 26 else f"u{m}"


def format_query(q: Query | Sequence[Term], M: int, *, signed: bool = True) -> str:
    terms = q.terms if isinstance(q, Query) else tuple(q)
    parts = []
    for k, (m, i, s) in enumerate(terms):
        sym = f"{_letter(m, M)}_{i}"
        if not signed:
            parts.append(sym if k == 0 else f" + {sym}")
        elif k == 0:
            parts.append(sym if s > 0 else f"-{sym}")
        else:
            parts.append(f" + {sym}" if s > 0 else f" - {sym}")
    return "".join(parts)


def render_table(plan: QueryPlan) -> str:
    """Block / sub-block table with one column per server (identity randomizer)."""
    if plan.randomizer is not None and plan.randomizer != Randomizer.identity(plan.L):
        raise InvalidArgument("tables are presentation-only and require the identity randomizer")
    theta, M = plan.theta, plan.M
    lines = ["B | S(delta) | " + " | ".join(f"Server {n}" for n in sorted(plan.vertices))]
    columns: dict[int, list[tuple[str, str]]] = {}
    for n in sorted(plan.vertices):
        col: list[tuple[str, str]] = []
        first = plan.vertices[n][0]
        singles = [first.m_part[0]] + list(first.i_part)
        col.append(("1 | ...", ", ".join(format_query(q, M, signed=False) for q in singles)))
        for b in range(2, M + 1):
            rows = []
            for vi, v in enumerate(plan.server_vertices(n, b)):
                for q in v.queries:
                    d = q.delta(theta)
                    rows.append(((plan.sub_block(q), vi, q.messages), f"{b} | {plan.sub_block(q)}({d})", format_query(q, M)))
            rows.sort(key=lambda r: r[0])
            col.extend((label, text) for _, label, text in rows)
        columns[n] = col
    servers = sorted(columns)
    for k in range(len(columns[servers[0]])):
        label = columns[servers[0]][k][0]
        lines.append(label + " | " + " | ".join(columns[n][k][1] for n in servers))
    return "\n".join(lines) + "\n"


def render_tree(plan: QueryPlan) -> str:
    """One line per vertex partition, mirroring the query-tree figure layout."""
    M = plan.M
    lines = []
    for b in range(1, M + 1):
        for n in sorted(plan.vertices):
            for v in plan.server_vertices(n, b):
                name = ",".join(str(c) for c in v.chain)
                if b == 1:
                    qs = list(v.m_part) + list(v.i_part)
                    qs.sort(key=lambda q: q.messages)
                    lines.append(f"{b} | Q({name}): " + ", ".join(format_query(q, M, signed=False) for q in qs))
                    continue
                for tag, part in (("M", v.m_part), ("I", v.i_part)):
                    if part:
                        body = ", ".join(format_query(q, M, signed=False) for q in part)
                        lines.append(f"{b} | Q({name},{tag}): {body}")
    return "\n".join(lines) + "\n"
