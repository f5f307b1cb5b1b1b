"""Exact arithmetic and linear algebra over a prime field F_p.

Matrices are plain row-major lists of lists of ints in ``[0, p)``.  All
elimination routines pivot on the first nonzero entry of a column (lowest
row index wins) so results are reproducible.  ``matmul_mod`` is the one
numpy-backed kernel; it is used on the hot decode path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DivisionByZero, Inconsistent, NotPrime, NotSquare, Singular

DEFAULT_P = 65537

Matrix = list[list[int]]


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


@dataclass(frozen=True)
class FieldElement:
    value: int
    p: int

    def __post_init__(self):
        if not 0 <= self.value < self.p:
            object.__setattr__(self, "value", self.value % self.p)

    def _coerce(self, other) -> int:
        if isinstance(other, FieldElement):
            if other.p != self.p:
                raise ValueError("field mismatch")
            return other.value
        return int(other) % self.p

    def __add__(self, other):
        return FieldElement((self.value + self._coerce(other)) % self.p, self.p)

    __radd__ = __add__

    def __sub__(self, other):
        return FieldElement((self.value - self._coerce(other)) % self.p, self.p)

    def __rsub__(self, other):
        return FieldElement((self._coerce(other) - self.value) % self.p, self.p)

    def __mul__(self, other):
        return FieldElement(self.value * self._coerce(other) % self.p, self.p)

    __rmul__ = __mul__

    def __neg__(self):
        return FieldElement(-self.value % self.p, self.p)

    def __truediv__(self, other):
        return self * FieldContext(self.p).inv(self._coerce(other))

    def __int__(self):
        return self.value

    def __eq__(self, other):
        if isinstance(other, FieldElement):
            return self.p == other.p and self.value == other.value
        if isinstance(other, int):
            return self.value == other % self.p
        return NotImplemented

    def __hash__(self):
        return hash((self.value, self.p))


@dataclass(frozen=True)
class FieldContext:
    """Immutable arithmetic context for F_p; build it with :func:`field_context`."""

    p: int

    def element(self, x: int) -> FieldElement:
        return FieldElement(x % self.p, self.p)

    def reduce(self, x: int) -> int:
        return x % self.p

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.p

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.p

    def mul(self, a: int, b: int) -> int:
        return a * b % self.p

    def neg(self, a: int) -> int:
        return -a % self.p

    def inv(self, x) -> int:
        x = int(x) % self.p
        if x == 0:
            raise DivisionByZero("zero has no inverse")
        return pow(x, self.p - 2, self.p)

    def sign(self, s: int) -> int:
        """Map a sign in {+1, -1} to its field representative."""
        return 1 if s > 0 else self.p - 1


@lru_cache(maxsize=None)
def field_context(p: int = DEFAULT_P) -> FieldContext:
    if p < 2 or not is_prime(p):
        raise NotPrime(f"{p} is not prime")
    if p >= 2**31:
        raise NotPrime(f"{p} exceeds the supported modulus range (p < 2^31)")
    return FieldContext(p)


def _copy(ctx: FieldContext, A: Sequence[Sequence[int]]) -> Matrix:
    p = ctx.p
    return [[int(x) % p for x in row] for row in A]


def _shape(A: Sequence[Sequence[int]]) -> tuple[int, int]:
    rows = len(A)
    cols = len(A[0]) if rows else 0
    return rows, cols


def _rref_array(R: np.ndarray, p: int) -> tuple[np.ndarray, list[int]]:
    """In-place reduction of an int64 array with whole-row numpy updates.

    Needs p < 2^31 so every product fits in int64.
    """
    rows, cols = R.shape
    pivots: list[int] = []
    r = 0
    for c in range(cols):
        if r == rows:
            break
        nz = np.flatnonzero(R[r:, c])
        if nz.size == 0:
            continue
        piv = r + int(nz[0])
        if piv != r:
            R[[r, piv]] = R[[piv, r]]
        R[r] = R[r] * pow(int(R[r, c]), p - 2, p) % p
        f = R[:, c].copy()
        f[r] = 0
        hit = np.flatnonzero(f)
        if hit.size:
            R[hit] = (R[hit] - np.outer(f[hit], R[r]) % p) % p
        pivots.append(c)
        r += 1
    return R, pivots


def _det_array(R: np.ndarray, p: int) -> int:
    n = R.shape[0]
    d = 1
    for c in range(n):
        nz = np.flatnonzero(R[c:, c])
        if nz.size == 0:
            return 0
        piv = c + int(nz[0])
        if piv != c:
            R[[c, piv]] = R[[piv, c]]
            d = -d
        pv = int(R[c, c])
        d = d * pv % p
        if c + 1 < n:
            f = R[c + 1 :, c] * pow(pv, p - 2, p) % p
            R[c + 1 :] = (R[c + 1 :] - np.outer(f, R[c]) % p) % p
    return d % p


def rref(ctx: FieldContext, A: Sequence[Sequence[int]]) -> tuple[Matrix, list[int]]:
    """Reduced row echelon form and the list of pivot columns."""
    p = ctx.p
    if p < 2**31 and len(A) and len(A[0]):
        R, piv = _rref_array(np.array(A, dtype=np.int64) % p, p)
        return R.tolist(), piv
    R = _copy(ctx, A)
    rows, cols = _shape(R)
    pivots: list[int] = []
    r = 0
    for c in range(cols):
        if r == rows:
            break
        piv = next((i for i in range(r, rows) if R[i][c]), None)
        if piv is None:
            continue
        R[r], R[piv] = R[piv], R[r]
        iv = pow(R[r][c], p - 2, p)
        R[r] = [x * iv % p for x in R[r]]
        pr = R[r]
        for i in range(rows):
            if i != r and R[i][c]:
                f = R[i][c]
                R[i] = [(x - f * y) % p for x, y in zip(R[i], pr)]
        pivots.append(c)
        r += 1
    return R, pivots


def rank(ctx: FieldContext, A: Sequence[Sequence[int]]) -> int:
    if not A or not A[0]:
        return 0
    return len(rref(ctx, A)[1])


def det(ctx: FieldContext, A: Sequence[Sequence[int]]) -> int:
    p = ctx.p
    n, m = _shape(A)
    if n != m:
        raise NotSquare(f"determinant of a {n}x{m} matrix")
    if n == 0:
        return 1
    if p < 2**31:
        return _det_array(np.array(A, dtype=np.int64) % p, p)
    R = _copy(ctx, A)
    d = 1
    for c in range(n):
        piv = next((i for i in range(c, n) if R[i][c]), None)
        if piv is None:
            return 0
        if piv != c:
            R[c], R[piv] = R[piv], R[c]
            d = -d
        d = d * R[c][c] % p
        iv = pow(R[c][c], p - 2, p)
        for i in range(c + 1, n):
            if R[i][c]:
                f = R[i][c] * iv % p
                R[i] = [(x - f * y) % p for x, y in zip(R[i], R[c])]
    return d % p


def solve(ctx: FieldContext, A: Sequence[Sequence[int]], b: Sequence[int]) -> list[int]:
    """Unique solution of a square invertible system."""
    n, m = _shape(A)
    if n != m:
        raise NotSquare(f"solve needs a square matrix, got {n}x{m}")
    aug = [list(row) + [bi] for row, bi in zip(A, b)]
    R, piv = rref(ctx, aug)
    if len(piv) < n or piv[-1] == n:
        raise Singular("matrix is singular")
    return [R[i][n] for i in range(n)]


def solve_consistent(ctx: FieldContext, A: Sequence[Sequence[int]], b: Sequence[int]) -> list[int]:
    """Some x with Ax = b (free variables set to zero); rectangular A allowed."""
    rows, cols = _shape(A)
    if rows == 0:
        return [0] * cols
    aug = [list(row) + [bi] for row, bi in zip(A, b)]
    R, piv = rref(ctx, aug)
    if piv and piv[-1] == cols:
        raise Inconsistent("system has no solution")
    x = [0] * cols
    for i, c in enumerate(piv):
        x[c] = R[i][cols]
    return x


def nullspace(ctx: FieldContext, A: Sequence[Sequence[int]], cols: int | None = None) -> list[list[int]]:
    """Basis of {x : Ax = 0}."""
    p = ctx.p
    if not A:
        n = cols or 0
        return [[1 if i == j else 0 for i in range(n)] for j in range(n)]
    n = _shape(A)[1]
    R, piv = rref(ctx, A)
    free = [c for c in range(n) if c not in set(piv)]
    basis = []
    for f in free:
        x = [0] * n
        x[f] = 1
        for i, c in enumerate(piv):
            x[c] = -R[i][f] % p
        basis.append(x)
    return basis


def inverse(ctx: FieldContext, A: Sequence[Sequence[int]]) -> Matrix:
    n, m = _shape(A)
    if n != m:
        raise NotSquare(f"inverse of a {n}x{m} matrix")
    aug = [list(row) + [1 if i == j else 0 for j in range(n)] for i, row in enumerate(A)]
    R, piv = rref(ctx, aug)
    if piv[:n] != list(range(n)):
        raise Singular("matrix is singular")
    return [row[n:] for row in R]


def matmul(ctx: FieldContext, A: Sequence[Sequence[int]], B: Sequence[Sequence[int]]) -> Matrix:
    p = ctx.p
    Bt = list(zip(*B)) if B else []
    return [[sum(a * b for a, b in zip(row, col)) % p for col in Bt] for row in A]


def matvec(ctx: FieldContext, A: Sequence[Sequence[int]], x: Sequence[int]) -> list[int]:
    p = ctx.p
    return [sum(a * b for a, b in zip(row, x)) % p for row in A]


def identity(n: int) -> Matrix:
    return [[1 if i == j else 0 for j in range(n)] for i in range(n)]


def vandermonde(ctx: FieldContext, nodes: Sequence[int], width: int) -> Matrix:
    p = ctx.p
    return [[pow(x, e, p) for e in range(width)] for x in nodes]


def matmul_mod(A: np.ndarray, B: np.ndarray, p: int) -> np.ndarray:
    """(A @ B) mod p for int arrays with entries already in [0, p).

    Uses int64 when the accumulated sum provably fits, otherwise splits B
    into 16-bit limbs so every partial product stays in range.
    """
    A = np.asarray(A, dtype=np.int64)
    B = np.asarray(B, dtype=np.int64)
    inner = A.shape[-1]
    if inner == 0:
        return np.zeros(A.shape[:-1] + B.shape[1:], dtype=np.int64)
    if (p - 1) ** 2 * inner < 2**63:
        return (A @ B) % p
    lo = B & 0xFFFF
    hi = B >> 16
    if (p - 1) * 0xFFFF * inner >= 2**63:
        raise OverflowError("inner dimension too large for limb split")
    return ((A @ lo) % p + ((A @ hi) % p) * (65536 % p)) % p
