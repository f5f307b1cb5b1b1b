import json
from fractions import Fraction

import numpy as np
import pytest

from privcomp import clientengine as ce
from privcomp import gfmath, planner, wire
from privcomp.errors import DecodeError, IncompleteAnswers, InvalidArgument, TransportError
from privcomp.model import DatasetStore, MessageView, generate_datasets, random_combination_matrix
from privcomp.redundancy import compression_spec
from privcomp.serverengine import ServerEngine, serve

P = 65537


def _world(N, K, M, seed, p=P, length=None):
    V = random_combination_matrix(gfmath.field_context(p), M, K, np.random.default_rng(seed))
    store = generate_datasets(seed, K, length or N**M, p)
    return V, store, MessageView(store, V).messages()


def _raw_answers(plan, V, store):
    engine = ServerEngine(store, V, compress=False)
    reqs = ce.build_requests(plan, ce.RetrievalConfig(plan.N, V, compress=False))
    return {n: wire.decode_response(engine.handle_bytes(r)) for n, r in reqs.items()}


def _compressed_answers(plan, V, store):
    engine = ServerEngine(store, V)
    reqs = ce.build_requests(plan, ce.RetrievalConfig(plan.N, V))
    return {n: wire.decode_response(engine.handle_bytes(r)) for n, r in reqs.items()}


@pytest.mark.parametrize("N,K,M", [(2, 2, 4), (3, 2, 4), (2, 1, 3), (2, 3, 3), (3, 2, 3)])
def test_decode_matches_ground_truth_many_seeds(N, K, M):
    for seed in range(50):
        V, store, W = _world(N, K, M, seed)
        eps = ce.local_endpoints(store, V, N)
        for theta in range(1, M + 1):
            tr = ce.retrieve(theta, eps, ce.RetrievalConfig(N, V), seed=1000 + seed)
            assert np.array_equal(tr.decoded, W[theta - 1]), (seed, theta)


def test_all_zero_data_decodes_to_zero():
    V, _, _ = _world(2, 2, 4, 0)
    store = DatasetStore(np.zeros((2, 16), dtype=np.int64), P)
    tr = ce.retrieve(2, ce.local_endpoints(store, V, 2), ce.RetrievalConfig(2, V), seed=4)
    assert not tr.decoded.any()


@pytest.mark.parametrize("N,K,M", [(2, 2, 4), (3, 2, 4), (2, 1, 1), (3, 3, 4), (2, 2, 5)])
def test_uncompressed_oracle_agrees(N, K, M):
    V, store, W = _world(N, K, M, 8)
    for theta in range(1, M + 1):
        plan = planner.randomize(planner.make_plan(theta, N, M, P), theta)
        oracle = ce.decode_uncompressed_oracle(plan, _raw_answers(plan, V, store), P)
        spec = compression_spec(N, M, K, P, V)
        fast = ce.decode(plan, _compressed_answers(plan, V, store), V=V, spec=spec)
        assert np.array_equal(oracle, W[theta - 1])
        assert np.array_equal(fast, oracle)


def test_single_message_oracle_reads_singletons():
    V, store, W = _world(3, 1, 1, 2)
    plan = planner.randomize(planner.make_plan(1, 3, 1, P), identity=True)
    raw = _raw_answers(plan, V, store)
    assert [raw[n].tolist() for n in (1, 2, 3)] == [[W[0][0]], [W[0][1]], [W[0][2]]]
    assert ce.decode_uncompressed_oracle(plan, raw, P).tolist() == W[0].tolist()


def test_desired_symbol_count_per_level():
    plan = planner.make_plan(1, 2, 4, P)
    counts = [st.theta_index.size for st in ce.build_structure(plan)]
    assert counts == [2, 6, 6, 2] and sum(counts) == 16


def test_decode_vertex_example_a_block_two():
    V, store, W = _world(2, 2, 4, 1)
    plan = planner.randomize(planner.make_plan(1, 2, 4, P), identity=True)
    spec = compression_spec(2, 4, 2, P, V)
    answers = _compressed_answers(plan, V, store)
    ledger = ce.SideInfoLedger()
    ce.decode(plan, answers, V=V, spec=spec, ledger=ledger)
    vertex = plan.vertex((1, 2))
    level_rows = ce._split_answers(plan, answers, spec, ce.plan_structure(plan))[1]
    row = ce.plan_structure(plan)[1].chains.index((1, 2))
    desired, i_vals = ce.decode_vertex(plan, vertex, level_rows[row], V, spec, ledger)
    assert len(level_rows[row]) == 5
    assert desired == {i: int(W[0][i - 1]) for i in (3, 4, 5)}
    assert len(i_vals) == 3


def test_ledger_is_filled_in_order():
    ledger = ce.SideInfoLedger()
    with pytest.raises(DecodeError):
        ledger.level(1)
    assert ledger.missing_reads == 1
    V, store, _ = _world(3, 2, 4, 0)
    plan = planner.randomize(planner.make_plan(2, 3, 4, P), 0)
    ledger = ce.SideInfoLedger()
    ce.decode(plan, _compressed_answers(plan, V, store), V=V, spec=compression_spec(3, 4, 2, P, V), ledger=ledger)
    assert ledger.missing_reads == 0
    assert (1, 2) in ledger and (3, 2, 1) in ledger and (9,) not in ledger
    with pytest.raises(DecodeError):
        ledger.get((9, 9))


def test_incomplete_answers():
    V, store, _ = _world(2, 2, 4, 0)
    plan = planner.randomize(planner.make_plan(1, 2, 4, P), 0)
    spec = compression_spec(2, 4, 2, P, V)
    answers = _compressed_answers(plan, V, store)
    with pytest.raises(IncompleteAnswers):
        ce.decode(plan, {1: answers[1]}, V=V, spec=spec)
    with pytest.raises(IncompleteAnswers):
        ce.decode(plan, {1: answers[1], 2: answers[2][:-1]}, V=V, spec=spec)
    with pytest.raises(IncompleteAnswers):
        ce.decode(plan, {1: answers[1], 2: np.append(answers[2], 0)}, V=V, spec=spec)


class _ShortEndpoint(ce.InProcessEndpoint):
    def receive(self):
        vals = wire.decode_response(super().receive())
        return wire.encode_response(vals[:-1])


def test_short_answer_is_a_decode_error():
    V, store, _ = _world(2, 2, 4, 0)
    engine = ServerEngine(store, V)
    with pytest.raises(DecodeError):
        ce.retrieve(1, [ce.InProcessEndpoint(engine), _ShortEndpoint(engine)], ce.RetrievalConfig(2, V), seed=1)


@pytest.mark.parametrize(
    "N,K,M,compress,rate",
    [
        (2, 2, 4, True, Fraction(2, 3)),
        (3, 2, 4, True, Fraction(3, 4)),
        (2, 2, 4, False, Fraction(8, 15)),
        (2, 1, 3, True, Fraction(1)),
    ],
)
def test_rates(N, K, M, compress, rate):
    V, store, W = _world(N, K, M, 1)
    tr = ce.retrieve(1, ce.local_endpoints(store, V, N, compress=compress), ce.RetrievalConfig(N, V, compress=compress), seed=2)
    assert tr.rate == rate
    assert np.array_equal(tr.decoded, W[0])


def test_download_total_per_round():
    V, store, _ = _world(2, 2, 4, 1)
    tr = ce.retrieve(3, ce.local_endpoints(store, V, 2), ce.RetrievalConfig(2, V), seed=2)
    assert (tr.L, tr.D_total) == (16, 24)


def test_multi_round():
    V, store, W = _world(2, 2, 3, 5, length=24)
    cfg = ce.RetrievalConfig(2, V, store_length=24)
    tr = ce.retrieve(2, ce.local_endpoints(store, V, 2), cfg, seed=9)
    assert tr.rounds == 3 and tr.L == 24
    assert np.array_equal(tr.decoded, W[1])
    assert tr.rate == Fraction(2, 3)
    with pytest.raises(InvalidArgument):
        ce.RetrievalConfig(2, V, store_length=20).rounds


def test_transcript_json_redacts_theta():
    V, store, _ = _world(2, 2, 4, 1)
    tr = ce.retrieve(4, ce.local_endpoints(store, V, 2), ce.RetrievalConfig(2, V), seed=3)
    public = json.loads(tr.to_json())
    assert "theta" not in public
    assert public["rate"] == "2/3" and public["D_total"] == 24 and public["match"] is True
    assert json.loads(tr.to_json(redact=False))["theta"] == 4


def test_retrieve_is_deterministic_given_seed():
    V, store, _ = _world(2, 2, 4, 1)
    run = lambda s: ce.retrieve(2, ce.local_endpoints(store, V, 2), ce.RetrievalConfig(2, V), seed=s)
    assert run(5).digest() == run(5).digest()
    assert run(5).digest() != run(6).digest()


def test_socket_transcript_equals_in_process():
    V, store, _ = _world(3, 2, 4, 4)
    servers = [serve(ServerEngine(store, V)) for _ in range(3)]
    try:
        sockets = [ce.SocketEndpoint(*s.server_address[:2]) for s in servers]
        cfg = ce.RetrievalConfig(3, V)
        a = ce.retrieve(2, sockets, cfg, seed=7)
        b = ce.retrieve(2, ce.local_endpoints(store, V, 3), cfg, seed=7)
        assert a.requests == b.requests and a.responses == b.responses
        assert a.digest() == b.digest()
    finally:
        for s in servers:
            s.shutdown()
            s.server_close()


def test_transport_failures():
    V, store, _ = _world(2, 2, 4, 0)
    with pytest.raises(TransportError):
        ce.SocketEndpoint("127.0.0.1", 1, timeout=2).send(b"x")
    with pytest.raises(TransportError):
        ce.InProcessEndpoint(ServerEngine(store, V)).receive()
    with pytest.raises(InvalidArgument):
        ce.retrieve(1, ce.local_endpoints(store, V, 3), ce.RetrievalConfig(2, V))
    with pytest.raises(InvalidArgument):
        ce.retrieve(5, ce.local_endpoints(store, V, 2), ce.RetrievalConfig(2, V))


def test_parse_endpoints():
    assert ce.parse_endpoints("a:1, 127.0.0.1:80") == [("a", 1), ("127.0.0.1", 80)]
    with pytest.raises(InvalidArgument):
        ce.parse_endpoints("nohost")
