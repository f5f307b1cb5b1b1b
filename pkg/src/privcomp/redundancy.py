"""Redundant queries under linear message dependence, and download compression.

Within a level-``m`` vertex, once the desired symbols are known every query
that avoids the desired message and a chosen basis ``r`` of ``K - 1`` further
messages ("Group 2") is a linear function of the other undesired queries
("Group 1").  The server only needs to return ``C(M,m) - C(M-K,m)``
generic combinations of the vertex's ``C(M,m)`` query values.

Coordinates: with basis rows ``[v_theta; v_r]``, each message is written as
``u_y = c_y[0] u_theta + sum_k c_y[k] u_{r_k}``.  ``c_y[1:]`` are the
"r-coordinates" used by the closed-form coefficients.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Mapping, Sequence

import numpy as np

from . import gfmath
from .errors import DimensionMismatch, FieldTooSmall, InvalidArgument, InvalidTuple
from .gfmath import FieldContext, FieldElement
from .model import CombinationMatrix
from .planner import Query, QueryVertex

log = logging.getLogger(__name__)

Types = tuple[int, ...]


@dataclass(frozen=True)
class BasisSelection:
    theta: int
    r: tuple[int, ...]
    coords: tuple[tuple[int, ...], ...]  # coords[y-1] = (theta-coord, r-coords...)
    p: int

    def theta_coord(self, y: int) -> int:
        return self.coords[y - 1][0]

    def r_coords(self, y: int) -> tuple[int, ...]:
        return self.coords[y - 1][1:]

    @property
    def K(self) -> int:
        return len(self.r) + 1


def select_basis(theta: int, V: CombinationMatrix) -> BasisSelection:
    """Lexicographically smallest ``r`` making {v_theta} + {v_r} a basis."""
    ctx = gfmath.field_context(V.p)
    K, M = V.K, V.M
    if not 1 <= theta <= M:
        raise InvalidArgument(f"theta={theta} outside [1:{M}]")
    if gfmath.rank(ctx, V.rows) < K:
        raise InvalidArgument("combination matrix is rank deficient")
    for r in itertools.combinations(range(1, K + 1), K - 1):
        if theta in r:
            continue
        B = [list(V.row(theta))] + [list(V.row(x)) for x in r]
        if gfmath.det(ctx, B) == 0:
            continue
        Binv = gfmath.inverse(ctx, B)
        coords = gfmath.matmul(ctx, [list(row) for row in V.rows], Binv)
        return BasisSelection(theta, r, tuple(tuple(c) for c in coords), V.p)
    # rank K with v_theta nonzero always admits such an r; v_theta = 0 does not
    raise InvalidArgument(f"message {theta} is the zero function; no basis contains it")


def group_split(vertex: QueryVertex, theta: int, basis: BasisSelection) -> tuple[list[Query], list[Query]]:
    avoid = set(basis.r)
    g1, g2 = [], []
    for q in vertex.i_part:
        if theta in q.messages:
            raise InvalidArgument("I-partition query contains the desired message")
        (g1 if avoid & set(q.messages) else g2).append(q)
    return g1, g2


# --- closed form ------------------------------------------------------------


def _check_tuples(j: Types, i: Types, theta: int, basis: BasisSelection) -> list[int]:
    I = sorted(set(basis.r) | set(i))
    if len(set(i)) != len(i) or set(i) & (set(basis.r) | {theta}):
        raise InvalidTuple(f"target {i} must avoid the desired message and the basis {basis.r}")
    if len(j) != len(i) or len(set(j)) != len(j) or not set(j) <= set(I) or set(j) == set(i):
        raise InvalidTuple(f"{j} is not an m-subset of {tuple(I)} other than {i}")
    return I


def h_coefficient(j: Types, i: Types, theta: int, basis: BasisSelection, V: CombinationMatrix | None = None) -> FieldElement:
    """Coefficient of q(u_j) when expanding the Group-2 query q(u_i).

    General form, valid however ``r`` and ``i`` interleave::

        h(j) = -(-1)^(sum_{x in i} pos(x) + sum_{x in j} pos(x)) * det[w_y : y in I \\ j]

    with ``I = r + i`` sorted, ``pos`` the 1-based position in ``I`` and
    ``w_y`` the r-coordinates of ``u_y`` as columns.  When every basis index
    precedes ``i`` this reduces to :func:`h_coefficient_reference`.
    """
    ctx = gfmath.field_context(basis.p)
    I = _check_tuples(tuple(j), tuple(i), theta, basis)
    pos = {x: k for k, x in enumerate(I, 1)}
    exponent = sum(pos[x] for x in i) + sum(pos[x] for x in j)
    rest = [y for y in I if y not in set(j)]
    cols = [basis.r_coords(y) for y in rest]
    mat = [[cols[c][row] for c in range(len(cols))] for row in range(len(basis.r))]
    d = gfmath.det(ctx, mat)
    sign = 1 if exponent % 2 else -1
    return ctx.element(sign * d)


def h_coefficient_reference(j: Types, i: Types, theta: int, basis: BasisSelection) -> FieldElement:
    """Minor-based coefficient with the sign exponent sum Omega + t(t-1)/2 + 1.

    Rows of the t x t minor are the basis messages in ``j``; columns are the
    members of ``i`` missing from ``j``; ``Omega`` is the 1-based position in
    ``i``.  Requires every basis index to precede every element of ``i``.
    """
    ctx = gfmath.field_context(basis.p)
    _check_tuples(tuple(j), tuple(i), theta, basis)
    if basis.r and i and max(basis.r) > min(i):
        raise InvalidTuple("reference form needs the basis indices to precede the target's")
    jbar = [x for x in j if x in basis.r]
    t = len(jbar)
    itilde = [x for x in i if x not in j]
    omega = sum(i.index(x) + 1 for x in itilde)
    rows = [basis.r.index(x) for x in jbar]
    mat = [[basis.r_coords(c)[row] for c in itilde] for row in rows]
    d = gfmath.det(ctx, mat)
    exponent = omega + t * (t - 1) // 2 + 1
    return ctx.element(-d if exponent % 2 else d)


@dataclass(frozen=True)
class TypeRelation:
    """q(target) = sum coeffs[j] q(j) + sum affine[s] u_theta(index of M-type s).

    ``affine`` is keyed by the desired-message query type whose desired
    symbol appears; indices are implicit so the relation is shared by every
    vertex of the level.
    """

    target: Types
    coeffs: Mapping[Types, int]
    affine: Mapping[Types, int]


def _alt(pos: int) -> int:
    return 1 if pos % 2 == 0 else -1  # 0-based position


def type_relations(theta: int, m: int, basis: BasisSelection) -> list[TypeRelation]:
    """Closed-form relations for every Group-2 type at level ``m``."""
    p = basis.p
    M = len(basis.coords)
    avoid = set(basis.r) | {theta}
    free = [y for y in range(1, M + 1) if y not in avoid]
    out = []
    for i in itertools.combinations(free, m):
        I = sorted(set(basis.r) | set(i))
        coeffs: dict[Types, int] = {}
        for j in itertools.combinations(I, m):
            if j == i:
                continue
            h = h_coefficient(j, i, theta, basis).value
            if h:
                coeffs[j] = h
        affine: dict[Types, int] = {}
        for x, weight in [(i, 1)] + [(j, -h) for j, h in coeffs.items()]:
            for l, y in enumerate(x):
                c = basis.theta_coord(y)
                if not c:
                    continue
                src = tuple(sorted(x[:l] + x[l + 1 :] + (theta,)))
                affine[src] = (affine.get(src, 0) + weight * _alt(l) * c) % p
        out.append(TypeRelation(i, coeffs, {k: v for k, v in affine.items() if v}))
    return out


@dataclass(frozen=True)
class RedundancyRelation:
    """q(target) = sum coeffs[j] * q(j) + sum affine[i] * u_theta(i) inside one vertex.

    ``coeffs`` is keyed by Group-1 message tuples, ``affine`` by virtual
    symbol index; zero entries are omitted.
    """

    chain: tuple[int, ...]
    target: Types
    coeffs: Mapping[Types, int]
    affine: Mapping[int, int]

    def residual(self, vertex: QueryVertex, u: np.ndarray, theta: int, p: int) -> int:
        """Evaluate lhs - rhs on u-space values ``u[m-1, i-1]``; zero when it holds."""
        by_type = {q.messages: q for q in vertex.queries}

        def val(q: Query) -> int:
            return sum(s * int(u[m - 1, i - 1]) for m, i, s in q.terms)

        total = val(by_type[self.target])
        total -= sum(c * val(by_type[j]) for j, c in self.coeffs.items())
        total -= sum(c * int(u[theta - 1, i - 1]) for i, c in self.affine.items())
        return total % p


def relations_closed_form(vertex: QueryVertex, theta: int, basis: BasisSelection, V: CombinationMatrix | None = None) -> list[RedundancyRelation]:
    m = vertex.level
    by_type = {q.messages: q for q in vertex.m_part}
    out = []
    for rel in type_relations(theta, m, basis):
        affine: dict[int, int] = {}
        for src, c in rel.affine.items():
            idx = by_type[src].index_of(theta)
            affine[idx] = (affine.get(idx, 0) + c) % basis.p
        out.append(RedundancyRelation(vertex.chain, rel.target, dict(rel.coeffs), {k: v for k, v in affine.items() if v}))
    return out


def relations_oracle(vertex: QueryVertex, theta: int, basis: BasisSelection, V: CombinationMatrix | None = None) -> list[RedundancyRelation]:
    """Relations by elimination over (symbol index, coordinate) columns.

    Works directly from the vertex's signed queries, so it shares no index
    or sign bookkeeping with the closed form.
    """
    ctx = gfmath.field_context(basis.p)
    p = basis.p
    K = basis.K
    g1, g2 = group_split(vertex, theta, basis)
    M = len(basis.coords)
    if len(g2) != comb(M - K, vertex.level):
        raise DimensionMismatch(f"{len(g2)} Group-2 queries, expected C({M - K},{vertex.level})")
    indices = sorted({i for q in vertex.i_part for _, i, _ in q.terms})
    col = {i: n for n, i in enumerate(indices)}

    def expand(q: Query) -> list[int]:
        vec = [0] * (len(indices) * K)
        for y, i, s in q.terms:
            base = col[i] * K
            for k, c in enumerate(basis.coords[y - 1]):
                vec[base + k] = (vec[base + k] + s * c) % p
        return vec

    rcols = [n * K + k for n in range(len(indices)) for k in range(1, K)]
    tcols = [n * K for n in range(len(indices))]
    G1 = [expand(q) for q in g1]
    A = [[row[c] for row in G1] for c in rcols]  # columns are Group-1 queries
    if g1 and gfmath.rank(ctx, A) != len(g1):
        raise DimensionMismatch("Group-1 queries are dependent once the desired symbols are known")
    out = []
    for q in g2:
        t = expand(q)
        h = gfmath.solve_consistent(ctx, A, [t[c] for c in rcols]) if g1 else []
        resid = list(t)
        for hk, row in zip(h, G1):
            if hk:
                resid = [(a - hk * b) % p for a, b in zip(resid, row)]
        if any(resid[c] for c in rcols):
            raise DimensionMismatch(f"query {q.messages} is not redundant")
        coeffs = {g.messages: hk for g, hk in zip(g1, h) if hk}
        affine = {indices[n]: resid[c] for n, c in enumerate(tcols) if resid[c]}
        out.append(RedundancyRelation(vertex.chain, q.messages, coeffs, affine))
    return out


# --- relation rows over a vertex's full query vector --------------------------------


def level_types(M: int, m: int) -> list[Types]:
    return list(itertools.combinations(range(1, M + 1), m))


def desired_sign(theta: int, t: Types) -> int:
    """Scheme sign of the desired term in an M-query of type ``t``."""
    return 1 if (t.index(theta) + 1) % 2 else -1


def relation_matrix(theta: int, m: int, basis: BasisSelection) -> tuple[np.ndarray, np.ndarray]:
    """Rows R and known-side coefficients P of the level-``m`` relations.

    With q the vertex's C(M,m) query values in lexicographic type order,
    each desired symbol written as ``s * (q_src - e * parent_src)`` gives
    ``R q = P (e * parent)``, where ``P`` is indexed by the M-types in
    lexicographic order and ``e`` is the per-query side-information sign
    supplied by the decoder.
    """
    p = basis.p
    M = len(basis.coords)
    types = level_types(M, m)
    pos = {t: k for k, t in enumerate(types)}
    srcs = [t for t in types if theta in t]
    spos = {t: k for k, t in enumerate(srcs)}
    rels = type_relations(theta, m, basis)
    R = np.zeros((len(rels), len(types)), dtype=np.int64)
    P = np.zeros((len(rels), len(srcs)), dtype=np.int64)
    for r, rel in enumerate(rels):
        R[r, pos[rel.target]] = 1
        for j, c in rel.coeffs.items():
            R[r, pos[j]] = (R[r, pos[j]] - c) % p
        for src, c in rel.affine.items():
            a = c * desired_sign(theta, src)
            R[r, pos[src]] = (R[r, pos[src]] - a) % p
            P[r, spos[src]] = (P[r, spos[src]] - a) % p
    return R, P


# --- compression -------------------------------------------------------------


@dataclass(frozen=True)
class LevelCompression:
    level: int
    kind: str  # "identity", "vandermonde" or "matrix"
    nodes: tuple[int, ...]
    G: tuple[tuple[int, ...], ...]

    @property
    def rows(self) -> int:
        return len(self.G)

    @property
    def width(self) -> int:
        return len(self.G[0]) if self.G else 0


@dataclass(frozen=True)
class CompressionSpec:
    N: int
    M: int
    K: int
    p: int
    levels: tuple[LevelCompression, ...]
    validated: bool = False

    def matrix(self, m: int) -> np.ndarray:
        return np.array(self.levels[m - 1].G, dtype=np.int64).reshape(self.levels[m - 1].rows, comb(self.M, m))

    def per_server_download(self) -> int:
        return sum((self.N - 1) ** (m - 1) * lv.rows for m, lv in enumerate(self.levels, 1))

    def to_text(self) -> str:
        lines = [f"compression N={self.N} M={self.M} K={self.K} p={self.p}"]
        for lv in self.levels:
            if lv.kind == "identity":
                lines.append(f"{lv.level} identity {lv.width}")
            elif lv.kind == "vandermonde":
                lines.append(f"{lv.level} vandermonde {lv.width} " + " ".join(str(x) for x in lv.nodes))
            else:
                lines.append(f"{lv.level} matrix {lv.width} " + ";".join(",".join(map(str, r)) for r in lv.G))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CompressionSpec":
        try:
            head, *rest = [ln for ln in text.splitlines() if ln.strip()]
            kv = dict(tok.split("=") for tok in head.split()[1:])
            N, M, K, p = (int(kv[k]) for k in ("N", "M", "K", "p"))
            ctx = gfmath.field_context(p)
            levels = []
            for ln in rest:
                parts = ln.split(" ", 3)
                level, kind, width = int(parts[0]), parts[1], int(parts[2])
                if kind == "identity":
                    levels.append(LevelCompression(level, kind, (), tuple(map(tuple, gfmath.identity(width)))))
                elif kind == "vandermonde":
                    nodes = tuple(int(x) for x in parts[3].split())
                    levels.append(LevelCompression(level, kind, nodes, tuple(map(tuple, gfmath.vandermonde(ctx, nodes, width)))))
                elif kind == "matrix":
                    G = tuple(tuple(int(x) for x in r.split(",")) for r in parts[3].split(";"))
                    levels.append(LevelCompression(level, kind, (), G))
                else:
                    raise ValueError(kind)
        except (ValueError, KeyError, IndexError) as exc:
            raise InvalidArgument(f"malformed compression spec: {exc}") from exc
        return cls(N, M, K, p, tuple(levels))


def _decodable(G: np.ndarray, rels: Sequence[np.ndarray], ctx: FieldContext) -> bool:
    for R in rels:
        stacked = np.vstack([G, R]) if R.size else G
        if stacked.shape[0] != stacked.shape[1] or gfmath.det(ctx, stacked.tolist()) == 0:
            return False
    return True


@lru_cache(maxsize=128)
def compression_spec(N: int, M: int, K: int, p: int, V: CombinationMatrix | None = None, *, max_windows: int = 32, max_random: int = 64) -> CompressionSpec:
    """Public per-level combining matrices G_m.

    Levels without redundancy use the identity.  Others take Vandermonde
    rows over consecutive nodes 1, 2, ...; when ``V`` is given every
    (theta, level) pair is certified decodable and the node window slides
    until it is.  Small fields fall back to deterministic pseudo-random
    matrices before giving up.
    """
    if not M >= K >= 1:
        raise InvalidArgument(f"need M >= K >= 1, got M={M}, K={K}")
    ctx = gfmath.field_context(p)
    if V is not None and (V.M, V.K, V.p) != (M, K, p):
        raise InvalidArgument("combination matrix does not match (M, K, p)")
    bases = [select_basis(theta, V) for theta in range(1, M + 1)] if V is not None else []
    levels = []
    for m in range(1, M + 1):
        width = comb(M, m)
        rows = width - comb(M - K, m)
        if rows == width:
            levels.append(LevelCompression(m, "identity", (), tuple(map(tuple, gfmath.identity(width)))))
            continue
        rels = [relation_matrix(b.theta, m, b)[0] for b in bases]
        chosen = None
        for start in range(1, max_windows + 1):
            nodes = tuple(range(start, start + rows))
            if nodes[-1] >= p:
                break
            G = gfmath.vandermonde(ctx, nodes, width)
            if _decodable(np.array(G, dtype=np.int64), rels, ctx):
                chosen = LevelCompression(m, "vandermonde", nodes, tuple(map(tuple, G)))
                break
        if chosen is None:
            rng = np.random.default_rng([N, M, K, p, m])
            for _ in range(max_random):
                G = rng.integers(0, p, size=(rows, width))
                if gfmath.rank(ctx, G.tolist()) == rows and _decodable(G, rels, ctx):
                    chosen = LevelCompression(m, "matrix", (), tuple(map(tuple, G.tolist())))
                    break
        if chosen is None:
            raise FieldTooSmall(f"no decodable compression found for level {m} over F_{p}")
        levels.append(chosen)
    return CompressionSpec(N, M, K, p, tuple(levels), validated=V is not None)


def download_count(N: int, M: int, K: int) -> int:
    """Total downloaded symbols per round across all servers."""
    if not M >= K >= 1 or N < 1:
        raise InvalidArgument(f"need M >= K >= 1 and N >= 1, got N={N}, M={M}, K={K}")
    return N * sum((N - 1) ** (m - 1) * (comb(M, m) - comb(M - K, m)) for m in range(1, M + 1))
