"""Datasets, the combination matrix, and message evaluation.

Message ``m`` (1-based) is the linear function ``W_m = sum_k V[m][k] W_{d_k}``
of the ``K`` stored datasets.  After :func:`normalize` the first ``K`` rows
of ``V`` are the identity, so messages ``1..K`` are the datasets themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gfmath
from .errors import FileError, IndexOutOfRange, InvalidArgument, RankDeficient
from .gfmath import FieldContext


@dataclass(frozen=True)
class CombinationMatrix:
    """M x K coefficient matrix; row m-1 defines message m."""

    rows: tuple[tuple[int, ...], ...]
    p: int

    def __post_init__(self):
        if not self.rows or not self.rows[0]:
            raise InvalidArgument("combination matrix must be non-empty")
        k = len(self.rows[0])
        if any(len(r) != k for r in self.rows):
            raise InvalidArgument("ragged combination matrix")
        if len(self.rows) < k:
            raise InvalidArgument(f"need M >= K, got M={len(self.rows)}, K={k}")

    @property
    def M(self) -> int:
        return len(self.rows)

    @property
    def K(self) -> int:
        return len(self.rows[0])

    def row(self, m: int) -> tuple[int, ...]:
        if not 1 <= m <= self.M:
            raise IndexOutOfRange(f"message index {m} outside [1:{self.M}]")
        return self.rows[m - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.int64)

    def is_normalized(self) -> bool:
        K = self.K
        return all(self.rows[i][j] == (1 if i == j else 0) for i in range(K) for j in range(K))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], p: int) -> "CombinationMatrix":
        return cls(tuple(tuple(int(x) % p for x in r) for r in rows), p)


@dataclass(frozen=True)
class BasisChange:
    """How a raw matrix was turned into a normalized one.

    ``order[j]`` is the original (1-based) function index of normalized
    message ``j + 1``; ``basis`` is the K x K block B with V' B = V[order].
    """

    order: tuple[int, ...]
    basis: tuple[tuple[int, ...], ...]

    def normalized_index(self, original: int) -> int:
        return self.order.index(original) + 1

    def original_index(self, normalized: int) -> int:
        return self.order[normalized - 1]

    def transform_datasets(self, data: np.ndarray, p: int) -> np.ndarray:
        """Datasets of the normalized system: B times the raw datasets."""
        return gfmath.matmul_mod(np.array(self.basis, dtype=np.int64), data, p)


def normalize(ctx: FieldContext, V: Sequence[Sequence[int]]) -> tuple[CombinationMatrix, BasisChange]:
    raw = [[int(x) % ctx.p for x in r] for r in V]
    if not raw or not raw[0]:
        raise InvalidArgument("empty matrix")
    M, K = len(raw), len(raw[0])
    if M < K:
        raise InvalidArgument(f"need M >= K, got M={M}, K={K}")
    chosen: list[int] = []
    for i in range(M):
        if gfmath.rank(ctx, [raw[j] for j in chosen + [i]]) == len(chosen) + 1:
            chosen.append(i)
            if len(chosen) == K:
                break
    if len(chosen) < K:
        raise RankDeficient(f"rank {len(chosen)} < K={K}")
    order = chosen + [i for i in range(M) if i not in chosen]
    B = [raw[i] for i in chosen]
    Binv = gfmath.inverse(ctx, B)
    rows = gfmath.matmul(ctx, [raw[i] for i in order], Binv)
    cm = CombinationMatrix.from_rows(rows, ctx.p)
    return cm, BasisChange(tuple(i + 1 for i in order), tuple(tuple(r) for r in B))


def random_combination_matrix(ctx: FieldContext, M: int, K: int, rng: np.random.Generator) -> CombinationMatrix:
    """Random full-rank V, normalized to an identity top block."""
    if M < K or K < 1:
        raise InvalidArgument(f"need M >= K >= 1, got M={M}, K={K}")
    while True:
        raw = rng.integers(0, ctx.p, size=(M, K)).tolist()
        try:
            return normalize(ctx, raw)[0]
        except RankDeficient:
            continue


@dataclass(frozen=True)
class DatasetStore:
    """K datasets of L symbols each, as a read-only (K, L) int64 array."""

    data: np.ndarray
    p: int

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.int64) % self.p
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidArgument("dataset array must be (K, L) with K, L >= 1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def L(self) -> int:
        return self.data.shape[1]


def generate_datasets(seed: int, K: int, L: int, p: int = gfmath.DEFAULT_P) -> DatasetStore:
    if K < 1:
        raise InvalidArgument("K must be at least 1")
    if L < 1:
        raise InvalidArgument("L must be at least 1")
    rng = np.random.default_rng(seed)
    return DatasetStore(rng.integers(0, p, size=(K, L), dtype=np.int64), p)


@dataclass
class MessageView:
    """Evaluates W_m(l) = sum_k V[m][k] W_{d_k}(l) on demand."""

    store: DatasetStore
    V: CombinationMatrix
    _cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.V.K != self.store.K:
            raise InvalidArgument(f"V has K={self.V.K} columns but store holds {self.store.K} datasets")
        if self.V.p != self.store.p:
            raise InvalidArgument("field mismatch between V and store")

    @property
    def M(self) -> int:
        return self.V.M

    @property
    def L(self) -> int:
        return self.store.L

    def messages(self) -> np.ndarray:
        """All messages as an (M, L) array."""
        if self._cache is None:
            W = gfmath.matmul_mod(self.V.as_array(), self.store.data, self.store.p)
            W.setflags(write=False)
            self._cache = W
        return self._cache

    def message(self, m: int) -> np.ndarray:
        if not 1 <= m <= self.M:
            raise IndexOutOfRange(f"message index {m} outside [1:{self.M}]")
        return self.messages()[m - 1]


def message_symbol(view: MessageView, m: int, l: int) -> int:
    if not 1 <= m <= view.M:
        raise IndexOutOfRange(f"message index {m} outside [1:{view.M}]")
    if not 1 <= l <= view.L:
        raise IndexOutOfRange(f"symbol index {l} outside [1:{view.L}]")
    p = view.store.p
    return sum(c * int(view.store.data[k, l - 1]) for k, c in enumerate(view.V.row(m))) % p


# --- file formats ------------------------------------------------------------


def write_datasets(path: str | Path, store: DatasetStore) -> None:
    lines = [f"{store.K} {store.L} {store.p}"]
    lines += [" ".join(str(int(x)) for x in row) for row in store.data]
    Path(path).write_text("\n".join(lines) + "\n")


def read_datasets(path: str | Path) -> DatasetStore:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileError(f"cannot read dataset file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        K, L, p = (int(x) for x in lines[0].split())
        rows = [[int(x) for x in ln.split()] for ln in lines[1 : 1 + K]]
    except (ValueError, IndexError) as exc:
        raise FileError(f"malformed dataset file {path}") from exc
    if len(rows) != K or any(len(r) != L for r in rows):
        raise FileError(f"dataset file {path} does not match its header ({K} x {L})")
    if any(not 0 <= x < p for r in rows for x in r):
        raise FileError(f"dataset file {path} has symbols outside [0, {p})")
    return DatasetStore(np.array(rows, dtype=np.int64), p)


def write_matrix(path: str | Path, rows: Sequence[Sequence[int]]) -> None:
    Path(path).write_text("\n".join(" ".join(str(int(x)) for x in r) for r in rows) + "\n")


def read_matrix(path: str | Path) -> list[list[int]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileError(f"cannot read matrix file {path}: {exc}") from exc
    try:
        rows = [[int(x) for x in ln.split()] for ln in text.splitlines() if ln.strip()]
    except ValueError as exc:
        raise FileError(f"malformed matrix file {path}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise FileError(f"matrix file {path} is empty or ragged")
    return rows
