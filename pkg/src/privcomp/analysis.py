"""Closed-form rates and capacities, and measured-versus-theory reports.

Scheme rates are exact rationals.  Entropy-based formulas take float inputs
in bits and compare with a 1e-12 tolerance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from math import comb
from typing import Iterable, Sequence

from .errors import InvalidArgument, InvalidProfile

TOL = 1e-12


def _geometric(N: int, terms: int) -> Fraction:
    return sum((Fraction(1, N**k) for k in range(terms)), Fraction(0))


def pc_capacity(N: int, K: int) -> Fraction:
    """(1 + 1/N + ... + 1/N^(K-1))^-1."""
    if N < 1 or K < 1:
        raise InvalidArgument("pc_capacity needs N >= 1 and K >= 1")
    return 1 / _geometric(N, K)


def pir1_rate(N: int, M: int) -> Fraction:
    """Rate when the M messages are treated as independent."""
    if N < 2 or M < 1:
        raise InvalidArgument("pir1_rate needs N >= 2 and M >= 1")
    return 1 / _geometric(N, M)


def asymptotic_capacity(N: int) -> Fraction:
    if N < 1:
        raise InvalidArgument("N must be at least 1")
    return 1 - Fraction(1, N)


def download_sum(N: int, M: int, K: int) -> int:
    return N * sum((N - 1) ** (m - 1) * (comb(M, m) - comb(M - K, m)) for m in range(1, M + 1))


def download_closed_form(N: int, M: int, K: int) -> Fraction:
    """N/(N-1) * (N^M - N^(M-K)); requires N >= 2."""
    if N < 2:
        raise InvalidArgument("the closed form divides by N - 1")
    return Fraction(N, N - 1) * (N**M - N ** (M - K))


# --- entropy formulas --------------------------------------------------------------


@dataclass(frozen=True)
class EntropyProfile:
    """Per-symbol entropies in bits; ``joint`` is H(w_1, w_2) when known."""

    marginals: tuple[float, ...]
    joint: float | None = None

    def __post_init__(self):
        if any(h < -TOL for h in self.marginals) or (self.joint is not None and self.joint < -TOL):
            raise InvalidProfile("entropies must be non-negative")
        if self.joint is not None and len(self.marginals) == 2:
            h1, h2 = self.marginals
            if self.joint < max(h1, h2) - TOL:
                raise InvalidProfile(f"joint entropy {self.joint} below the larger marginal {max(h1, h2)}")
            if self.joint > h1 + h2 + TOL:
                raise InvalidProfile(f"joint entropy {self.joint} exceeds the sum of marginals {h1 + h2}")


def two_message_capacity(profile: EntropyProfile, N: int) -> float:
    """N H(w_2) / (H(w_1,w_2) + (N-1) H(w_1)) with the roles ordered so H(w_1) >= H(w_2)."""
    if len(profile.marginals) != 2 or profile.joint is None:
        raise InvalidProfile("two-message capacity needs two marginals and their joint entropy")
    h1, h2 = sorted(profile.marginals, reverse=True)
    denom = profile.joint + (N - 1) * h1
    if denom <= TOL:
        raise InvalidProfile("all entropies are zero")
    return N * h2 / denom


def general_achievable_rate(profile: EntropyProfile, N: int) -> float:
    """(H_min / H_max) * (1 - 1/N)."""
    hs = profile.marginals
    if not hs or min(hs) <= TOL:
        raise InvalidProfile("every message entropy must be positive")
    return min(hs) / max(hs) * (1 - 1 / N)


# --- reports -----------------------------------------------------------------------


@dataclass(frozen=True)
class RateReport:
    N: int
    K: int
    M: int
    p: int
    L: int
    D_total: int
    rate: Fraction
    pc_capacity: Fraction
    pir1_rate: Fraction | None
    compressed: bool
    decode_ok: bool | None = None

    @property
    def match(self) -> bool:
        return self.rate == self.pc_capacity

    @property
    def gap(self) -> Fraction:
        return self.pc_capacity - self.rate

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rate", "pc_capacity", "pir1_rate"):
            d[k] = None if d[k] is None else str(d[k])
        d.update(match=self.match, gap=str(self.gap), rate_float=float(self.rate), capacity_float=float(self.pc_capacity))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return render_table([self])


def report(transcript, *, decode_ok: bool | None = None) -> RateReport:
    """Compare a finished retrieval's rate with the capacity, exactly."""
    N, K, M = transcript.N, transcript.K, transcript.M
    return RateReport(
        N=N,
        K=K,
        M=M,
        p=transcript.p,
        L=transcript.L,
        D_total=transcript.D_total,
        rate=transcript.rate,
        pc_capacity=pc_capacity(N, K),
        pir1_rate=pir1_rate(N, M) if N >= 2 else None,
        compressed=transcript.compress,
        decode_ok=decode_ok,
    )


COLUMNS = ("N", "K", "M", "L", "D", "rate", "capacity", "PIR1", "match", "decode")


def _row(r: RateReport) -> list[str]:
    return [
        str(r.N),
        str(r.K),
        str(r.M),
        str(r.L),
        str(r.D_total),
        str(r.rate),
        str(r.pc_capacity),
        "-" if r.pir1_rate is None else str(r.pir1_rate),
        "yes" if r.match else f"no (gap {r.gap})",
        {True: "ok", False: "MISMATCH", None: "-"}[r.decode_ok],
    ]


def render_table(reports: Iterable[RateReport]) -> str:
    rows = [list(COLUMNS)] + [_row(r) for r in reports]
    widths = [max(len(row[c]) for row in rows) for c in range(len(COLUMNS))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def default_grid(Ns: Sequence[int] = (2, 3), Ks: Sequence[int] = (1, 2, 3), extra: int = 3) -> list[tuple[int, int, int]]:
    """(N, K, M) triples with M running from K to K + extra."""
    return [(N, K, M) for N in Ns for K in Ks for M in range(K, K + extra + 1)]
