"""Command line entry point: ``privcomp {demo,serve,retrieve,audit,table}``.

Every option can also come from a JSON file passed with ``--config``; keys
use the long option names with dashes turned into underscores.  Options
given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import clientengine, gfmath, planner, privacy
from .analysis import RateReport, default_grid, pir1_rate, render_table, report
from .errors import BudgetExceeded, ConfigError, DecodeError, FileError, PrivCompError, TransportError
from .model import CombinationMatrix, DatasetStore, MessageView, generate_datasets, random_combination_matrix, read_datasets, read_matrix
from .serverengine import ServerEngine, serve

log = logging.getLogger("privcomp")

DEFAULTS = {
    "n": 2,
    "k": 2,
    "m": 4,
    "p": gfmath.DEFAULT_P,
    "theta": None,
    "seed": 0,
    "transport": "inprocess",
    "endpoints": None,
    "data": None,
    "matrix": None,
    "length": None,
    "out": None,
    "grid": False,
    "identity_randomizer": False,
    "no_compress": False,
    "host": "127.0.0.1",
    "port": 0,
    "samples": 10_000,
    "budget": 100_000,
    "mutant": False,
    "layout": None,
}


@dataclass
class RunConfig:
    command: str
    n: int
    k: int
    m: int
    p: int
    theta: int | None
    seed: int
    transport: str
    endpoints: str | None
    data: str | None
    matrix: str | None
    length: int | None
    out: str | None
    grid: bool
    identity_randomizer: bool
    no_compress: bool
    host: str
    port: int
    samples: int
    budget: int
    mutant: bool
    layout: str | None

    def validate(self) -> "RunConfig":
        if self.n < 1 or self.k < 1 or self.m < 1:
            raise ConfigError("N, K and M must be positive")
        if self.m < self.k:
            raise ConfigError(f"need M >= K, got M={self.m}, K={self.k}")
        if self.theta is not None and not 1 <= self.theta <= self.m:
            raise ConfigError(f"theta={self.theta} outside [1:{self.m}]")
        if self.transport not in ("inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        try:
            gfmath.field_context(self.p)
        except PrivCompError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FileError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in raw.items()}
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def resolve(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_config(args.config)
    values = {}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        values[key] = flag if flag not in (None, False) else file_cfg.get(key, default)
    return RunConfig(command=args.command, **values).validate()


# --- shared setup ------------------------------------------------------------------


def _matrix(cfg: RunConfig) -> CombinationMatrix:
    if cfg.matrix:
        V = CombinationMatrix.from_rows(read_matrix(cfg.matrix), cfg.p)
        if (V.M, V.K) != (cfg.m, cfg.k):
            raise ConfigError(f"matrix file is {V.M} x {V.K}, expected {cfg.m} x {cfg.k}")
        return V
    return random_combination_matrix(gfmath.field_context(cfg.p), cfg.m, cfg.k, np.random.default_rng(cfg.seed))


def _store(cfg: RunConfig) -> DatasetStore:
    if cfg.data:
        store = read_datasets(cfg.data)
        if store.K != cfg.k or store.p != cfg.p:
            raise ConfigError(f"dataset file holds K={store.K}, p={store.p}; expected K={cfg.k}, p={cfg.p}")
        return store
    return generate_datasets(cfg.seed, cfg.k, cfg.length or cfg.n**cfg.m, cfg.p)


def _retrieval_config(cfg: RunConfig, V: CombinationMatrix, length: int | None) -> clientengine.RetrievalConfig:
    try:
        rc = clientengine.RetrievalConfig(cfg.n, V, length, not cfg.no_compress, cfg.identity_randomizer)
        rc.rounds
    except PrivCompError as exc:
        raise ConfigError(str(exc)) from exc
    return rc


@contextmanager
def local_servers(store: DatasetStore, V: CombinationMatrix, N: int, *, compress: bool = True) -> Iterator[list[clientengine.SocketEndpoint]]:
    """N loopback servers on free ports, shut down on exit."""
    servers = [serve(ServerEngine(store, V, compress=compress)) for _ in range(N)]
    try:
        yield [clientengine.SocketEndpoint(*s.server_address[:2]) for s in servers]
    finally:
        for s in servers:
            s.shutdown()
            s.server_close()


def run_retrieval(
    N: int,
    K: int,
    M: int,
    *,
    theta: int = 1,
    p: int = gfmath.DEFAULT_P,
    seed: int = 0,
    transport: str = "inprocess",
    compress: bool = True,
    identity_randomizer: bool = False,
    length: int | None = None,
) -> tuple[clientengine.Transcript, RateReport]:
    """Generate data, retrieve ``theta`` and check the result against the messages."""
    V = random_combination_matrix(gfmath.field_context(p), M, K, np.random.default_rng(seed))
    store = generate_datasets(seed, K, length or N**M, p)
    rc = clientengine.RetrievalConfig(N, V, length, compress, identity_randomizer)
    if transport == "socket":
        with local_servers(store, V, N, compress=compress) as eps:
            tr = clientengine.retrieve(theta, eps, rc, seed)
    else:
        tr = clientengine.retrieve(theta, clientengine.local_endpoints(store, V, N, compress=compress), rc, seed)
    ok = bool(np.array_equal(tr.decoded, MessageView(store, V).message(theta)))
    return tr, report(tr, decode_ok=ok)


def _expected_rate(r: RateReport):
    return r.pc_capacity if r.compressed else (pir1_rate(r.N, r.M) if r.N >= 2 else r.rate)


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# --- commands ----------------------------------------------------------------------


def cmd_demo(cfg: RunConfig) -> int:
    if cfg.grid:
        return _demo_grid(cfg)
    theta = cfg.theta or 1
    tr, rep = run_retrieval(
        cfg.n,
        cfg.k,
        cfg.m,
        theta=theta,
        p=cfg.p,
        seed=cfg.seed,
        transport=cfg.transport,
        compress=not cfg.no_compress,
        identity_randomizer=cfg.identity_randomizer,
        length=cfg.length,
    )
    print(tr.to_json())
    print(render_table([rep]))
    ok = rep.decode_ok and rep.rate == _expected_rate(rep)
    print(f"decode {'OK' if rep.decode_ok else 'MISMATCH'}, rate {rep.rate}")
    if cfg.out:
        _write(cfg.out, json.dumps({"transcript": tr.summary(), "report": rep.to_dict()}, indent=2))
    return 0 if ok else 1


def _demo_grid(cfg: RunConfig) -> int:
    from .plots import plot_rates

    reports = []
    for N, K, M in default_grid():
        decode_ok = True
        rep = None
        for theta in range(1, M + 1):
            _, r = run_retrieval(N, K, M, theta=theta, p=cfg.p, seed=cfg.seed, transport=cfg.transport, compress=not cfg.no_compress)
            decode_ok &= bool(r.decode_ok)
            rep = rep or r
        reports.append(RateReport(**{**rep.__dict__, "decode_ok": decode_ok}))
    print(render_table(reports))
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [r.to_dict() for r in reports]
        with open(out / "rates.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        (out / "rates.json").write_text(json.dumps(rows, indent=2))
        plot_rates(reports, out / "rates.png")
        print(f"wrote {out / 'rates.csv'}, {out / 'rates.json'}, {out / 'rates.png'}")
    return 0 if all(r.decode_ok and r.rate == _expected_rate(r) for r in reports) else 1


def cmd_serve(cfg: RunConfig, stop: threading.Event | None = None) -> int:
    store, V = _store(cfg), _matrix(cfg)
    engine = ServerEngine(store, V, compress=not cfg.no_compress)
    server = serve(engine, cfg.host, cfg.port)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    stop = stop or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        server.shutdown()
        server.server_close()
    return 0


def cmd_retrieve(cfg: RunConfig) -> int:
    if not cfg.endpoints:
        raise ConfigError("retrieve needs --endpoints host:port,...")
    try:
        addrs = clientengine.parse_endpoints(cfg.endpoints)
    except PrivCompError as exc:
        raise ConfigError(str(exc)) from exc
    if len(addrs) != cfg.n:
        raise ConfigError(f"{len(addrs)} endpoints given for N={cfg.n}")
    V = _matrix(cfg)
    store = read_datasets(cfg.data) if cfg.data else None
    length = cfg.length or (store.L if store else None)
    rc = _retrieval_config(cfg, V, length)
    theta = cfg.theta or 1
    tr = clientengine.retrieve(theta, [clientengine.SocketEndpoint(h, p) for h, p in addrs], rc, cfg.seed)
    summary = tr.summary()
    rep = report(tr)
    ok = True
    if store is not None:
        ok = bool(np.array_equal(tr.decoded, MessageView(store, V).message(theta)))
        summary["decode_matches_data"] = ok
        rep = report(tr, decode_ok=ok)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(render_table([rep]))
    if cfg.out:
        _write(cfg.out, json.dumps({"transcript": summary, "report": rep.to_dict(), "decoded": tr.decoded.tolist()}, indent=2))
    return 0 if ok else 1


def cmd_audit(cfg: RunConfig) -> int:
    N, K, M, p = cfg.n, cfg.k, cfg.m, cfg.p
    reports = [privacy.structural_audit(N, K, M, p, leak_theta=cfg.mutant)]
    try:
        reports.append(privacy.enumeration_audit(N, K, M, p, budget=cfg.budget, leak_theta=cfg.mutant))
    except BudgetExceeded as exc:
        print(f"[SKIP] enumeration: {exc}")
    reports.append(privacy.sampled_audit(N, K, M, p, cfg.samples, seed=cfg.seed, leak_theta=cfg.mutant))
    reports.append(privacy.answer_obliviousness_audit(N, K, M, p, seed=cfg.seed))
    text = "\n".join(r.to_text() for r in reports)
    print(text)
    _write(cfg.out, text + "\n")
    return 0 if all(r.passed for r in reports) else 1


def cmd_table(cfg: RunConfig) -> int:
    if not cfg.identity_randomizer:
        raise ConfigError("tables show virtual indices; pass --identity-randomizer")
    layout = cfg.layout or ("table" if cfg.n == 2 else "tree")
    if layout not in ("table", "tree"):
        raise ConfigError(f"unknown layout {layout!r}")
    thetas = [cfg.theta] if cfg.theta else list(range(1, cfg.m + 1))
    chunks = []
    for theta in thetas:
        plan = planner.randomize(planner.make_plan(theta, cfg.n, cfg.m, cfg.p), identity=True)
        body = planner.render_table(plan) if layout == "table" else planner.render_tree(plan)
        chunks.append(body if len(thetas) == 1 else f"# theta={theta}\n{body}")
    text = "\n".join(chunks)
    sys.stdout.write(text)
    _write(cfg.out, text)
    return 0


COMMANDS = {"demo": cmd_demo, "serve": cmd_serve, "retrieve": cmd_retrieve, "audit": cmd_audit, "table": cmd_table}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=int, help="number of servers (default 2)")
    common.add_argument("--k", type=int, help="number of datasets (default 2)")
    common.add_argument("--m", type=int, help="number of messages (default 4)")
    common.add_argument("--p", type=int, help="prime field size (default 65537)")
    common.add_argument("--theta", type=int, help="desired message, 1-based (default 1)")
    common.add_argument("--seed", type=int, help="seed for data, matrix and query randomness (default 0)")
    common.add_argument("--transport", choices=["inprocess", "socket"], help="how the client reaches servers")
    common.add_argument("--endpoints", help="comma separated host:port list, one per server")
    common.add_argument("--data", help="dataset file (K L p header, one row per dataset)")
    common.add_argument("--matrix", help="M x K combination matrix file")
    common.add_argument("--length", type=int, help="symbols per dataset; a multiple of N^M")
    common.add_argument("--out", help="output file, or directory with --grid")
    common.add_argument("--config", help="JSON file with default option values")
    common.add_argument("--identity-randomizer", action="store_true", default=None, help="skip the private permutation and signs")
    common.add_argument("--no-compress", action="store_true", default=None, help="download raw answers (independent-message baseline)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="privcomp", description="Private computation of linear functions over replicated servers.")
    sub = parser.add_subparsers(dest="command", required=True)
    demo = sub.add_parser("demo", parents=[common], help="simulate a retrieval and check it")
    demo.add_argument("--grid", action="store_true", default=None, help="sweep N in {2,3}, K in 1..3, M in K..K+3")
    srv = sub.add_parser("serve", parents=[common], help="answer queries over TCP")
    srv.add_argument("--host", help="bind address (default 127.0.0.1)")
    srv.add_argument("--port", type=int, help="bind port (default: any free port)")
    sub.add_parser("retrieve", parents=[common], help="retrieve from running servers")
    aud = sub.add_parser("audit", parents=[common], help="run the privacy audits")
    aud.add_argument("--samples", type=int, help="samples per theta for the statistical audit (default 10000)")
    aud.add_argument("--budget", type=int, help="largest view count to enumerate (default 100000)")
    aud.add_argument("--mutant", action="store_true", default=None, help="audit a build that leaks theta (negative control)")
    tab = sub.add_parser("table", parents=[common], help="print the query plan")
    tab.add_argument("--layout", choices=["table", "tree"], help="table (N=2 default) or tree")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, FileError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (TransportError, DecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except PrivCompError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
