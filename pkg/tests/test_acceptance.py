"""End-to-end acceptance checks, one marked group per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints a
PASS/FAIL line for each criterion.
"""

import random
import time
from fractions import Fraction
from math import comb
from pathlib import Path

import numpy as np
import pytest

from privcomp import analysis, clientengine, gfmath, model, planner, privacy, wire
from privcomp import redundancy as R
from privcomp.serverengine import ServerEngine, serve

P = 65537
F = gfmath.field_context(P)
GOLDEN = Path(__file__).parent / "golden"

GRID = [(N, K, M) for N in (2, 3, 4) for K in (1, 2, 3, 4) for M in range(K, K + 5)]
SEEDS = 50

criterion = pytest.mark.criterion


def _clear_caches():
    planner.make_plan.cache_clear()
    clientengine._structure_cached.cache_clear()
    clientengine._level_systems.cache_clear()
    R.compression_spec.cache_clear()


def _random_V(M, K, seed):
    return model.random_combination_matrix(F, M, K, np.random.default_rng(seed))


def _world(N, K, M, seed):
    V = _random_V(M, K, seed)
    store = model.generate_datasets(seed, K, N**M, P)
    return V, store


# --- 1 ---------------------------------------------------------------------------------


@criterion(1, "golden query tables for N=2 (theta=1..4) and the N=3 index tree")
def test_c1_golden_tables():
    _clear_caches()
    start = time.perf_counter()
    for theta in range(1, 5):
        plan = planner.randomize(planner.make_plan(theta, 2, 4, P), identity=True)
        assert planner.render_table(plan) == (GOLDEN / f"signed_n2_m4_theta{theta}.txt").read_text()
    plan = planner.randomize(planner.make_plan(1, 3, 4, P), identity=True)
    assert planner.render_tree(plan) == (GOLDEN / "tree_n3_m4_theta1.txt").read_text()
    assert time.perf_counter() - start < 1.0


# --- 2, 3 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def grid_runs():
    _clear_caches()
    start = time.perf_counter()
    runs = {}
    for N, K, M in GRID:
        V, store = _world(N, K, M, 1000 + N * 100 + K * 10 + M)
        tr = clientengine.retrieve(1, clientengine.local_endpoints(store, V, N), clientengine.RetrievalConfig(N, V), seed=7)
        assert np.array_equal(tr.decoded, model.MessageView(store, V).message(1))
        runs[(N, K, M)] = tr
    return runs, time.perf_counter() - start


@criterion(2, "measured rate equals the capacity on the full grid in under 30 s")
def test_c2_capacity_grid(grid_runs):
    runs, elapsed = grid_runs
    assert len(runs) == 60
    for (N, K, M), tr in runs.items():
        assert tr.rate == analysis.pc_capacity(N, K), (N, K, M)
    assert runs[(2, 2, 4)].L == 16 and runs[(2, 2, 4)].D_total == 24
    assert runs[(2, 2, 4)].rate == Fraction(2, 3)
    assert elapsed < 30, f"grid took {elapsed:.1f}s"


@criterion(3, "download counts: 12 per server at (2,4,2); totals match both formulas")
def test_c3_download_counts(grid_runs):
    runs, _ = grid_runs
    assert R.compression_spec(2, 4, 2, P).per_server_download() == 12
    resp = runs[(2, 2, 4)].responses[0]
    assert [len(wire.decode_response(resp[n])) for n in (1, 2)] == [12, 12]
    for (N, K, M), tr in runs.items():
        assert tr.D_total == analysis.download_sum(N, M, K) == R.download_count(N, M, K)
        assert tr.D_total == analysis.download_closed_form(N, M, K)


# --- 4 ---------------------------------------------------------------------------------


@criterion(4, "zero-error decoding for 50 seeds per grid point, every theta")
@pytest.mark.parametrize("N", [2, 3, 4])
def test_c4_zero_error(N):
    for _, K, M in (g for g in GRID if g[0] == N):
        for seed in range(SEEDS):
            V, store = _world(N, K, M, seed)
            W = model.MessageView(store, V).messages()
            eps = clientengine.local_endpoints(store, V, N)
            cfg = clientengine.RetrievalConfig(N, V)
            for theta in range(1, M + 1):
                tr = clientengine.retrieve(theta, eps, cfg, seed=seed * 31 + theta)
                assert np.array_equal(tr.decoded, W[theta - 1]), (N, K, M, seed, theta)


# --- 5 ---------------------------------------------------------------------------------


@criterion(5, "closed-form relations equal the elimination oracle on every vertex")
@pytest.mark.parametrize("N", [2, 3, 4])
def test_c5_closed_form_vs_oracle(N):
    for _, K, M in (g for g in GRID if g[0] == N):
        V = _random_V(M, K, 77 + M)
        for theta in range(1, M + 1):
            basis = R.select_basis(theta, V)
            plan = planner.make_plan(theta, N, M, P)
            for vs in plan.vertices.values():
                for v in vs:
                    if comb(M - K, v.level) == 0:
                        continue
                    assert R.relations_closed_form(v, theta, basis) == R.relations_oracle(v, theta, basis), (N, K, M, theta, v.chain)


def _det2(a, b, c, d):
    return (a * d - b * c) % P


@criterion(5, "closed-form relations equal the elimination oracle on every vertex")
def test_c5_printed_identities():
    rng = random.Random(2024)
    for draw in range(100):
        v3, w3, v4, w4 = (rng.randrange(1, P) for _ in range(4))
        V = model.CombinationMatrix.from_rows([[1, 0], [0, 1], [v3, w3], [v4, w4]], P)
        # theta = 1: c_5 - d_4 = w3 (b_5 - d_3) - w4 (b_4 - c_3) - (v3 w4 - v4 w3) a_3 - v4 a_4 + v3 a_5
        (rel,) = R.relations_closed_form(planner.make_plan(1, 2, 4, P).vertex((1, 2)), 1, R.select_basis(1, V))
        assert rel.target == (3, 4)
        assert rel.coeffs == {(2, 4): w3, (2, 3): -w4 % P}
        assert rel.affine == {3: -_det2(v3, w3, v4, w4) % P, 4: -v4 % P, 5: v3}
        # theta = 3: w3 (b_5 - d_4) = (v3 w4 - v4 w3)(a_4 - b_3) - v3 (a_5 - d_3) - v4 c_3 - w4 c_4 + c_5
        (rel,) = R.relations_closed_form(planner.make_plan(3, 2, 4, P).vertex((1, 2)), 3, R.select_basis(3, V))
        k = F.inv(w3)
        assert rel.target == (2, 4)
        assert rel.coeffs == {(1, 2): _det2(v3, w3, v4, w4) * k % P, (1, 4): -v3 * k % P}
        assert rel.affine == {3: -v4 * k % P, 4: -w4 * k % P, 5: k}
        # the identities hold on actual symbol values too
        u = gfmath.matmul_mod(V.as_array(), np.random.default_rng(draw).integers(0, P, size=(2, 16)), P)
        for theta in (1, 3):
            plan = planner.make_plan(theta, 2, 4, P)
            for r in R.relations_closed_form(plan.vertex((1, 2)), theta, R.select_basis(theta, V)):
                assert r.residual(plan.vertex((1, 2)), u, theta, P) == 0

        # Example 1: M=6, K=3, theta=1, u_{4,5,6} in terms of the b/c sums
        V6 = _random_V(6, 3, draw)
        v = lambda m, j: V6.row(m)[j - 1]
        (rel,) = R.relations_closed_form(planner.make_plan(1, 2, 6, P).vertex((1, 2, 1)), 1, R.select_basis(1, V6))
        expected = {
            (2, 3, 4): -_det2(v(5, 2), v(6, 2), v(5, 3), v(6, 3)),
            (2, 3, 5): _det2(v(4, 2), v(6, 2), v(4, 3), v(6, 3)),
            (2, 3, 6): -_det2(v(4, 2), v(5, 2), v(4, 3), v(5, 3)),
            (2, 4, 5): v(6, 2),
            (2, 4, 6): -v(5, 2),
            (2, 5, 6): v(4, 2),
            (3, 4, 5): v(6, 3),
            (3, 4, 6): -v(5, 3),
            (3, 5, 6): v(4, 3),
        }
        assert rel.target == (4, 5, 6)
        assert rel.coeffs == {key: x % P for key, x in expected.items() if x % P}


# --- 6 ---------------------------------------------------------------------------------

WITNESSES = {
    2: [
        ((3, 2, 7, 9, 10, 8, 15, 14), (2, 3, 9, 7, 8, 10, 14, 15), (6, 12, 13)),
        ((6, 1, 12, 4, 13, 5, 16, 11), (1, 6, 4, 12, 5, 13, 11, 16), (3, 9, 10)),
    ],
    3: [
        ((3, 4, 2, 7, 6, 9, 10, 11, 8, 14, 13, 15), (2, 3, 4, 9, 7, 6, 8, 10, 11, 15, 14, 13), (8, 12)),
        ((7, 6, 1, 4, 3, 12, 14, 13, 5, 11, 10, 16), (6, 1, 7, 12, 4, 3, 13, 5, 14, 16, 11, 10), (5, 9)),
    ],
    4: [
        ((3, 4, 5, 2, 6, 7, 8, 9, 10, 11, 14, 13, 12, 15), (2, 3, 4, 5, 8, 10, 11, 6, 7, 9, 15, 14, 13, 12), ()),
        ((6, 7, 8, 1, 3, 4, 5, 12, 13, 14, 11, 10, 9, 16), (1, 6, 7, 8, 5, 13, 14, 3, 4, 12, 16, 11, 10, 9), ()),
    ],
}


@criterion(6, "exact privacy: structural audit on the grid, full enumeration, printed witnesses")
@pytest.mark.parametrize("N", [2, 3, 4])
def test_c6_structural_grid(N):
    for _, K, M in (g for g in GRID if g[0] == N):
        rep = privacy.structural_audit(N, K, M, P)
        assert rep.passed, rep.to_text()


@criterion(6, "exact privacy: structural audit on the grid, full enumeration, printed witnesses")
def test_c6_enumeration():
    rep = privacy.enumeration_audit(2, 2, 2, P)
    assert rep.passed and rep.params["views"] == 384, rep.to_text()


@criterion(6, "exact privacy: structural audit on the grid, full enumeration, printed witnesses")
def test_c6_witnesses():
    for theta, per_server in WITNESSES.items():
        for n, (src, dst, flips) in enumerate(per_server, 1):
            view = privacy.server_view(theta, 2, 4, n)
            target = privacy.server_view(1, 2, 4, n)
            assert privacy.Witness.from_tuples(src, dst, flips).apply(view) == target
            derived = privacy.derive_witness(view, target)
            assert derived.moved() == dict(zip(src, dst)) and derived.flips == frozenset(flips)


# --- 7 ---------------------------------------------------------------------------------


@criterion(7, "statistical privacy: honest build accepted, leaking mutant rejected at 5 sigma")
def test_c7_sampled():
    honest = privacy.sampled_audit(2, 2, 4, P, samples=10_000, seed=0)
    assert honest.passed, honest.to_text()
    mutant = privacy.sampled_audit(2, 2, 4, P, samples=10_000, seed=0, leak_theta=True)
    assert not mutant.passed
    assert min(s["p"] for s in mutant.stats.values()) < privacy.FIVE_SIGMA


# --- 8 ---------------------------------------------------------------------------------


@criterion(8, "independent-message baseline gives 8/15 < 2/3 at (2,.,4)")
def test_c8_baseline_gap():
    V, store = _world(2, 2, 4, 5)
    cfg = clientengine.RetrievalConfig(2, V, compress=False)
    tr = clientengine.retrieve(2, clientengine.local_endpoints(store, V, 2, compress=False), cfg, seed=1)
    assert np.array_equal(tr.decoded, model.MessageView(store, V).message(2))
    rep = analysis.report(tr)
    assert tr.rate == Fraction(8, 15) == analysis.pir1_rate(2, 4)
    assert tr.rate < analysis.pc_capacity(2, 2) == Fraction(2, 3)
    assert not rep.match and rep.gap == Fraction(2, 15)


# --- 9 ---------------------------------------------------------------------------------


@criterion(9, "closed-form rate and capacity formulas on their special cases")
def test_c9_formulas():
    assert analysis.pc_capacity(2, 2) == Fraction(2, 3)
    assert all(analysis.pc_capacity(N, 1) == 1 for N in range(1, 6))
    assert all(analysis.pc_capacity(1, K) == Fraction(1, K) for K in range(1, 6))
    assert analysis.pir1_rate(2, 4) == Fraction(8, 15)
    assert all(analysis.pir1_rate(N, K) == analysis.pc_capacity(N, K) for N in range(2, 5) for K in range(1, 5))
    assert analysis.asymptotic_capacity(2) == Fraction(1, 2) and analysis.asymptotic_capacity(4) == Fraction(3, 4)
    h = 2.5
    for N in range(2, 6):
        same = analysis.EntropyProfile((h, h), h)
        indep = analysis.EntropyProfile((h, h), 2 * h)
        assert analysis.two_message_capacity(same, N) == pytest.approx(1.0, abs=1e-12)
        assert analysis.two_message_capacity(indep, N) == pytest.approx(N / (N + 1), abs=1e-12)
        assert analysis.two_message_capacity(indep, N) == pytest.approx(float(analysis.pc_capacity(N, 2)), abs=1e-12)
        assert analysis.two_message_capacity(analysis.EntropyProfile((h, 0.0), h), N) == 0
        assert analysis.general_achievable_rate(analysis.EntropyProfile((h, h, h)), N) == pytest.approx(1 - 1 / N, abs=1e-12)
        assert analysis.general_achievable_rate(analysis.EntropyProfile((h, h / 3)), N) <= float(analysis.asymptotic_capacity(N))
    assert analysis.general_achievable_rate(analysis.EntropyProfile((2.0, 1.0)), 2) == pytest.approx(0.25, abs=1e-12)


# --- 10 --------------------------------------------------------------------------------


@criterion(10, "socket answers are byte-identical to in-process answers")
def test_c10_transport_conformance():
    rng = random.Random(10)
    for _ in range(10):
        N, K = rng.randint(2, 3), rng.randint(1, 3)
        M, seed = rng.randint(K, K + 2), rng.randrange(10**6)
        theta = rng.randint(1, M)
        V, store = _world(N, K, M, seed)
        cfg = clientengine.RetrievalConfig(N, V)
        servers = [serve(ServerEngine(store, V)) for _ in range(N)]
        try:
            sock = clientengine.retrieve(theta, [clientengine.SocketEndpoint(*s.server_address[:2]) for s in servers], cfg, seed)
        finally:
            for s in servers:
                s.shutdown()
                s.server_close()
        local = clientengine.retrieve(theta, clientengine.local_endpoints(store, V, N), cfg, seed)
        assert sock.requests == local.requests
        assert sock.responses == local.responses
        assert np.array_equal(sock.decoded, local.decoded)
