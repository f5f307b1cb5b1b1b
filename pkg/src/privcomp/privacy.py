"""Privacy audits: a server's view must not depend on which message is retrieved.

The audits lean on one factorization.  A server sees its queries after a
uniform private relabeling of positions and signs, so two plans give the
same view distribution exactly when their *canonical views* agree.  The
canonical view relabels positions by first appearance and flips each
position's signs so that its first occurrence is positive.
"""

from __future__ import annotations

import hashlib
import itertools
from collections import Counter
from dataclasses import dataclass, field, replace
from math import factorial, sqrt
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from . import planner, wire
from .errors import BudgetExceeded, InvalidArgument, SignConflict
from .model import CombinationMatrix, generate_datasets, random_combination_matrix
from .planner import QueryPlan, Randomizer, Term
from .redundancy import compression_spec
from .serverengine import ServerEngine

FIVE_SIGMA = 2.866515718791939e-07  # one-sided normal tail at 5 standard deviations

WireView = Sequence[Sequence[Term]]
CanonicalView = tuple[tuple[Term, ...], ...]


# --- reports -----------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class AuditReport:
    audit: str
    params: dict
    checks: list[Check] = field(default_factory=list)
    inconclusive: bool = False
    stats: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.inconclusive and all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def first_failure(self) -> Check | None:
        return next((c for c in self.checks if not c.passed), None)

    def to_text(self) -> str:
        status = "INCONCLUSIVE" if self.inconclusive else ("PASS" if self.passed else "FAIL")
        params = " ".join(f"{k}={v}" for k, v in self.params.items())
        lines = [f"[{status}] {self.audit} {params}"]
        for c in self.checks:
            lines.append(f"  {'ok  ' if c.passed else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else ""))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "audit": self.audit,
            "params": self.params,
            "passed": self.passed,
            "inconclusive": self.inconclusive,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "stats": self.stats,
        }


# --- canonical form ----------------------------------------------------------------


def canonicalize(queries: WireView) -> CanonicalView:
    """Relabel positions by first appearance and make each first occurrence positive."""
    label: dict[int, int] = {}
    flip: dict[int, int] = {}
    out = []
    for q in queries:
        terms = []
        for m, pos, s in q:
            if pos not in label:
                label[pos] = len(label) + 1
                flip[pos] = s
            terms.append((m, label[pos], s * flip[pos]))
        out.append(tuple(terms))
    return tuple(out)


def first_difference(a: CanonicalView, b: CanonicalView, M: int | None = None) -> str:
    if len(a) != len(b):
        return f"{len(a)} queries vs {len(b)}"
    for k, (x, y) in enumerate(zip(a, b)):
        if x != y:
            if M is not None:
                return f"query #{k}: {planner.format_query(x, M)}  vs  {planner.format_query(y, M)}"
            return f"query #{k}: {x} vs {y}"
    return ""


def compare_views(views: Mapping[int, Mapping[int, WireView]], M: int, report: AuditReport) -> AuditReport:
    """``views[theta][server]``; every theta is compared with the smallest one."""
    thetas = sorted(views)
    ref = thetas[0]
    for n in sorted(views[ref]):
        base = canonicalize(views[ref][n])
        for t in thetas[1:]:
            other = canonicalize(views[t][n])
            report.add(f"server {n}: theta={t} vs theta={ref}", other == base, first_difference(other, base, M))
    return report


def _plan(theta: int, N: int, M: int, p: int, randomizer: Randomizer | None = None, seed=None) -> QueryPlan:
    base = planner.make_plan(theta, N, M, p)
    if randomizer is not None:
        return replace(base, randomizer=randomizer)
    return planner.randomize(base, seed, identity=seed is None)


def canonical_key(layout: planner.ServerLayout) -> bytes:
    """Byte form of :func:`canonicalize` computed on a server's wire arrays."""
    msgs = np.concatenate([b.messages.ravel() for b in layout.blocks])
    pos = np.concatenate([b.index.ravel() for b in layout.blocks])
    sgn = np.concatenate([b.signs.ravel() for b in layout.blocks])
    uniq, first, inverse = np.unique(pos, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(1, len(uniq) + 1)
    labels = rank[inverse]
    signs = sgn * sgn[first][inverse]
    shape = np.array([b.messages.shape for b in layout.blocks], dtype=np.int64).ravel()
    return b"".join(a.astype(np.int64).tobytes() for a in (shape, msgs, labels, signs))


def structural_audit(N: int, K: int, M: int, p: int = 65537, *, leak_theta: bool = False) -> AuditReport:
    """Canonical views equal for every theta, server by server."""
    report = AuditReport("structural", {"N": N, "K": K, "M": M, "p": p})
    plans = {t: _plan(t, N, M, p) for t in range(1, M + 1)}
    keys = {t: {n: canonical_key(lay) for n, lay in planner.wire_layout(pl, leak_theta=leak_theta).items()} for t, pl in plans.items()}
    for n in range(1, N + 1):
        for t in range(2, M + 1):
            same = keys[t][n] == keys[1][n]
            detail = ""
            if not same:
                a = canonicalize(planner.to_wire(plans[t], leak_theta=leak_theta)[n])
                b = canonicalize(planner.to_wire(plans[1], leak_theta=leak_theta)[n])
                detail = first_difference(a, b, M)
            report.add(f"server {n}: theta={t} vs theta=1", same, detail)
    return report


# --- enumeration -------------------------------------------------------------------


def _request_bytes(plan: QueryPlan, K: int, p: int, *, leak_theta: bool = False) -> dict[int, bytes]:
    layout = planner.wire_layout(plan, leak_theta=leak_theta)
    out = {}
    for n, lay in layout.items():
        blocks = [wire.WireBlock(b.block, b.messages, b.index, b.signs) for b in lay.blocks]
        header = wire.RequestHeader(p, plan.N, K, plan.M, plan.L, sum(b.count for b in blocks))
        out[n] = wire.encode_request(header, blocks)
    return out


def enumeration_views(N: int, M: int, p: int) -> int:
    L = N**M
    return factorial(L) * (1 if p == 2 else 2**L)


def enumeration_audit(N: int, K: int, M: int, p: int = 65537, *, budget: int = 100_000, leak_theta: bool = False) -> AuditReport:
    """Exact multiset of request bytes over every (pi, sigma), compared across theta."""
    total = enumeration_views(N, M, p)
    if total > budget:
        raise BudgetExceeded(f"{total} views per theta exceed the budget of {budget}")
    L = N**M
    report = AuditReport("enumeration", {"N": N, "K": K, "M": M, "p": p, "views": total})
    sigmas = [(1,) * L] if p == 2 else list(itertools.product((1, -1), repeat=L))
    counts: dict[int, dict[int, Counter]] = {}
    for t in range(1, M + 1):
        base = planner.make_plan(t, N, M, p)
        per_server: dict[int, Counter] = {n: Counter() for n in range(1, N + 1)}
        for pi in itertools.permutations(range(1, L + 1)):
            for sg in sigmas:
                plan = replace(base, randomizer=Randomizer(pi, sg))
                for n, data in _request_bytes(plan, K, p, leak_theta=leak_theta).items():
                    per_server[n][data] += 1
        counts[t] = per_server
    for n in range(1, N + 1):
        for t in range(2, M + 1):
            a, b = counts[1][n], counts[t][n]
            diff = sum(((a - b) + (b - a)).values())
            report.add(f"server {n}: theta={t} vs theta=1", a == b, f"{diff} views differ" if a != b else f"{len(a)} distinct views")
    return report


# --- sampling ----------------------------------------------------------------------


def _sign_profile(data: bytes, N: int, M: int, width: int = 6) -> int:
    """Sign bits of the first ``width`` transmitted terms, as an integer."""
    bits = 0
    offset = wire.HEADER_SIZE
    got = 0
    for B, c in enumerate(wire.block_counts(N, M), 1):
        dt = wire._block_dtype(B)
        arr = np.frombuffer(data, dtype=dt, count=c, offset=offset)
        offset += c * dt.itemsize
        for s in arr["terms"]["s"].ravel():
            bits = (bits << 1) | int(s)
            got += 1
            if got == width:
                return bits
    return bits


DIGESTS: dict[str, Callable[[bytes, int, int], int]] = {
    "hash": lambda data, N, M: hashlib.sha256(data).digest()[0] % 16,
    "signs": _sign_profile,
}


def two_sample_chi2(a: Counter, b: Counter) -> tuple[float, int, float, float, float]:
    """(statistic, dof, p-value, total variation, max per-bucket gap) for equal-size samples."""
    na, nb = sum(a.values()), sum(b.values())
    keys = sorted(set(a) | set(b))
    stat = 0.0
    for k in keys:
        x, y = a.get(k, 0), b.get(k, 0)
        if x + y:
            # equal-n form generalized with the usual scaling factors
            stat += (x * sqrt(nb / na) - y * sqrt(na / nb)) ** 2 / (x + y)
    dof = max(len(keys) - 1, 1)
    gaps = [abs(a.get(k, 0) / na - b.get(k, 0) / nb) for k in keys]
    return stat, dof, float(chi2.sf(stat, dof)), 0.5 * sum(gaps), max(gaps, default=0.0)


def sampled_audit(
    N: int,
    K: int,
    M: int,
    p: int = 65537,
    samples: int = 10_000,
    *,
    seed: int = 0,
    leak_theta: bool = False,
    alpha: float = FIVE_SIGMA,
) -> AuditReport:
    """Two-sample tests on view digests, theta=1 against every other theta."""
    report = AuditReport("sampled", {"N": N, "K": K, "M": M, "p": p, "samples": samples})
    if samples < 1000:
        report.inconclusive = True
        report.add("sample size", False, f"{samples} samples; at least 1000 are needed")
        return report
    digests: dict[int, dict[tuple[int, str], Counter]] = {}
    for t in range(1, M + 1):
        base = planner.make_plan(t, N, M, p)
        cnt: dict[tuple[int, str], Counter] = {(n, d): Counter() for n in range(1, N + 1) for d in DIGESTS}
        for k in range(samples):
            plan = planner.randomize(base, f"{seed}:{t}:{k}")
            for n, data in _request_bytes(plan, K, p, leak_theta=leak_theta).items():
                for d, fn in DIGESTS.items():
                    cnt[(n, d)][fn(data, N, M)] += 1
        digests[t] = cnt
    bound = 3 / sqrt(samples)
    for t in range(2, M + 1):
        for (n, d), ref in digests[1].items():
            stat, dof, pval, tv, gap = two_sample_chi2(ref, digests[t][(n, d)])
            report.stats[f"server{n}/{d}/theta{t}"] = {"chi2": stat, "dof": dof, "p": pval, "tv": tv, "max_gap": gap}
            ok = pval >= alpha and gap < bound
            report.add(
                f"server {n} {d} digest: theta={t} vs theta=1",
                ok,
                f"chi2={stat:.1f} dof={dof} p={pval:.3g} tv={tv:.4f} max gap={gap:.4f} (bound {bound:.4f})",
            )
    return report


# --- answers -----------------------------------------------------------------------


def answer_obliviousness_audit(N: int, K: int, M: int, p: int = 65537, *, seed: int = 0, V: CombinationMatrix | None = None) -> AuditReport:
    """Answer lengths and the compression description never depend on theta."""
    from .gfmath import field_context

    report = AuditReport("answers", {"N": N, "K": K, "M": M, "p": p})
    rng = np.random.default_rng(seed)
    V = V or random_combination_matrix(field_context(p), M, K, rng)
    L = N**M
    store = generate_datasets(seed, K, L, p)
    other = generate_datasets(seed + 1, K, L, p)
    engine, engine2 = ServerEngine(store, V), ServerEngine(other, V)
    spec_text = {t: compression_spec(N, M, K, p, V).to_text() for t in range(1, M + 1)}
    report.add("compression description identical for all theta", len(set(spec_text.values())) == 1)
    lengths: dict[int, tuple[int, ...]] = {}
    deterministic = data_sensitive = True
    for t in range(1, M + 1):
        reqs = _request_bytes(planner.randomize(planner.make_plan(t, N, M, p), f"{seed}:{t}"), K, p)
        lens = []
        for n in sorted(reqs):
            r1 = engine.handle_bytes(reqs[n])
            deterministic &= r1 == engine.handle_bytes(reqs[n])
            r2 = engine2.handle_bytes(reqs[n])
            data_sensitive &= len(r2) == len(r1)
            lens.append(len(wire.decode_response(r1)))
        lengths[t] = tuple(lens)
    schedule = set(lengths.values())
    report.add("answer lengths identical for all theta", len(schedule) == 1, f"per-server symbols {sorted(schedule)}")
    report.add("answers are deterministic in (query, data)", deterministic)
    report.add("other data changes values only, never lengths", data_sensitive)
    report.stats["per_server_symbols"] = list(next(iter(schedule)))
    return report


# --- bijection witnesses -----------------------------------------------------------


@dataclass(frozen=True)
class Witness:
    """Relabeling x -> mapping[x] plus sign flips on ``flips`` (source labels)."""

    mapping: dict[int, int]
    flips: frozenset[int]

    def apply(self, queries: WireView) -> list[tuple[Term, ...]]:
        return [
            tuple((m, self.mapping.get(i, i), -s if i in self.flips else s) for m, i, s in q) for q in queries
        ]

    def moved(self) -> dict[int, int]:
        return {a: b for a, b in self.mapping.items() if a != b}

    @classmethod
    def from_tuples(cls, source: Sequence[int], target: Sequence[int], flips: Sequence[int] = ()) -> "Witness":
        if sorted(source) != sorted(target):
            raise InvalidArgument("witness tuples must list the same labels")
        return cls(dict(zip(source, target)), frozenset(flips))


def derive_witness(source: WireView, target: WireView) -> Witness:
    """Term-by-term relabeling that turns ``source`` into ``target``.

    Raises SignConflict if some label would need two different signs and
    InvalidArgument if the two views are not structurally aligned.
    """
    if len(source) != len(target):
        raise InvalidArgument("views differ in length")
    mapping: dict[int, int] = {}
    flip: dict[int, int] = {}
    for qs, qt in zip(source, target):
        if [t[0] for t in qs] != [t[0] for t in qt]:
            raise InvalidArgument(f"message pattern differs: {qs} vs {qt}")
        for (m, i, s), (_, j, u) in zip(qs, qt):
            if mapping.setdefault(i, j) != j:
                raise InvalidArgument(f"label {i} maps to both {mapping[i]} and {j}")
            if flip.setdefault(i, s * u) != s * u:
                raise SignConflict(f"label {i} needs both signs")
    if len(set(mapping.values())) != len(mapping):
        raise InvalidArgument("relabeling is not injective")
    return Witness(mapping, frozenset(i for i, f in flip.items() if f < 0))


def server_view(theta: int, N: int, M: int, server: int, p: int = 65537) -> list[tuple[Term, ...]]:
    """Identity-randomized view: virtual indices as the server would see them."""
    return planner.to_wire(_plan(theta, N, M, p))[server]
