"""One SLSH node: a dataset slice whose outer tables are split across ``p`` workers.

Worker 0 is the master. On a query the master hands the vector to the other
workers, resolves its own share of tables, gathers the partial top-K lists
and reduces them. Each worker scans its own deduplicated candidate set, so
per-worker comparison counts are what the speedup metric uses.
"""
from __future__ import annotations

import logging
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .lsh_hash import HashSpec, InvalidParameter, specs_digest
from .points import KnnEntry, PointSet, read_dataset
from .slsh_index import (
    OuterTable,
    QueryStats,
    SlshConfig,
    TableGroup,
    build_inner_layers,
    build_outer_tables,
    merge_topk,
    scan_candidates,
)
from .wire_protocol import (
    Envelope,
    MessageType,
    ProtocolError,
    UnknownType,
    decode,
    encode,
    knn_to_wire,
    read_frame,
)

log = logging.getLogger(__name__)


class NodeError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def assign_tables(L_out: int, p: int) -> list[range]:
    """Contiguous table ranges per worker; sizes differ by at most one."""
    if p < 1:
        raise InvalidParameter("need at least one worker")
    if p >= L_out:
        log.warning("p=%d workers for L_out=%d tables; %d worker(s) idle", p, L_out, max(0, p - L_out))
    base, extra = divmod(L_out, p)
    ranges = []
    start = 0
    for w in range(p):
        size = base + (1 if w < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


@dataclass
class WorkerResult:
    entries: list[KnnEntry]
    comparisons: int
    rows: np.ndarray
    inner_hits: int


class Worker:
    def __init__(self, tables: list[OuterTable]):
        self.tables = tables
        self.group = TableGroup(tables)

    def query(self, query: np.ndarray, K: int, points: PointSet, metric: str) -> WorkerResult:
        rows, hits = self.group.candidates(query)
        entries, comparisons = scan_candidates(query, rows, points, K, metric)
        return WorkerResult(entries, comparisons, rows, hits)


def _build_worker(points: PointSet, cfg: SlshConfig, specs: Sequence[HashSpec], span: range) -> Worker:
    hashes = [specs[t].build() for t in span]
    tables = build_outer_tables(points, hashes, first_index=span.start)
    tables = [build_inner_layers(t, points.features, cfg, len(points)) for t in tables]
    return Worker(tables)


class NodeRuntime:
    """In-process node state; :class:`NodeServer` puts it on the wire."""

    def __init__(self, p: int = 1, node_id: str = "node"):
        if p < 1:
            raise InvalidParameter("p must be >= 1")
        self.p = p
        self.node_id = node_id
        self.points: PointSet | None = None
        self.cfg: SlshConfig | None = None
        self.workers: list[Worker] = []
        self._pool: ThreadPoolExecutor | None = None
        self._lock = threading.Lock()

    @property
    def built(self) -> bool:
        return self.cfg is not None

    def build(self, points: PointSet, specs: Sequence[HashSpec], cfg: SlshConfig) -> dict[str, Any]:
        t0 = time.perf_counter()
        if len(specs) != cfg.L_out:
            raise NodeError("bad_build", f"expected {cfg.L_out} hash specs, got {len(specs)}")
        for s in specs:
            if s.d != cfg.d or s.m != cfg.m_out:
                raise NodeError("bad_build", "hash spec disagrees with config (m_out/d)")
        if len(points) and points.d != cfg.d:
            raise NodeError("bad_dimension", f"slice has dimension {points.d}, config says {cfg.d}")
        with self._lock:
            self.close()
            spans = assign_tables(cfg.L_out, self.p)
            self._pool = ThreadPoolExecutor(max_workers=self.p, thread_name_prefix=f"{self.node_id}-w")
            futures = [self._pool.submit(_build_worker, points, cfg, specs, span) for span in spans]
            self.workers = [f.result() for f in futures]
            self.points, self.cfg = points, cfg
        tables = [t for w in self.workers for t in w.tables]
        return {
            "node_id": self.node_id,
            "workers": self.p,
            "points": len(points),
            "tables": len(tables),
            "buckets": sum(len(t.buckets) for t in tables),
            "inner_layers": sum(len(t.inner) for t in tables),
            "elapsed_s": time.perf_counter() - t0,
            "spec_digest": specs_digest(specs),
        }

    def query(self, query: np.ndarray, K: int) -> tuple[list[KnnEntry], QueryStats]:
        if not self.built:
            raise NodeError("not_built", "query received before build")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.cfg.d,):
            raise NodeError("bad_dimension", f"query has dimension {query.shape[-1]}, expected {self.cfg.d}")
        if K < 1:
            raise NodeError("bad_request", "k must be >= 1")
        with self._lock:
            metric = self.cfg.rank_metric
            helpers = [
                self._pool.submit(w.query, query, K, self.points, metric) for w in self.workers[1:]
            ]
            results = [self.workers[0].query(query, K, self.points, metric)]
            results += [f.result() for f in helpers]
        entries = merge_topk((r.entries for r in results), K)
        rows = [r.rows for r in results if len(r.rows)]
        unique = len(np.unique(np.concatenate(rows))) if rows else 0
        stats = QueryStats(
            [r.comparisons for r in results],
            unique,
            sum(r.inner_hits for r in results),
        )
        return entries, stats

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None


class NodeServer:
    """Message handler for one node; transport-agnostic."""

    def __init__(self, runtime: NodeRuntime):
        self.runtime = runtime
        self.stopping = threading.Event()

    def handle(self, msg: Envelope) -> Envelope:
        try:
            if msg.type is MessageType.BUILD_REQUEST:
                return self._build(msg)
            if msg.type is MessageType.QUERY_REQUEST:
                entries, stats = self.runtime.query(np.array(msg.payload["vector"], dtype=np.float64), msg.payload["k"])
                return msg.reply(
                    MessageType.QUERY_RESPONSE,
                    {
                        "neighbors": knn_to_wire(entries),
                        "comparisons": stats.comparisons_per_processor,
                        "candidates_unique": stats.candidates_unique,
                        "inner_layer_hits": stats.inner_layer_hits,
                    },
                )
            if msg.type is MessageType.SHUTDOWN:
                self.stopping.set()
                return msg.reply(MessageType.SHUTDOWN, {})
            return msg.error("unexpected_type", f"nodes do not accept {msg.type.value}")
        except NodeError as exc:
            return msg.error(exc.code, str(exc))
        except (InvalidParameter, ValueError, TypeError, OSError) as exc:
            return msg.error("bad_request", str(exc))

    def _build(self, msg: Envelope) -> Envelope:
        payload = msg.payload
        cfg = SlshConfig.from_json(payload["config"])
        specs = [HashSpec.from_json(s) for s in payload["hash_specs"]]
        start, stop = payload["start"], payload["stop"]
        if stop < start:
            raise NodeError("bad_build", "stop before start")
        dataset = read_dataset(payload["dataset"])
        if stop > len(dataset):
            raise NodeError("bad_build", f"slice [{start}, {stop}) beyond {len(dataset)} rows")
        if "node_id" in payload:
            self.runtime.node_id = payload["node_id"]
        report = self.runtime.build(dataset.slice(start, stop), specs, cfg)
        return msg.reply(MessageType.BUILD_ACK, report)

    def handle_frame(self, frame: bytes) -> bytes:
        """Decode, dispatch, encode. Raises :class:`ProtocolError` on a bad frame."""
        return encode(self.handle(decode(frame)))


class _Handler(socketserver.StreamRequestHandler):
    server: "_TcpServer"

    def handle(self) -> None:
        node: NodeServer = self.server.node
        while not node.stopping.is_set():
            try:
                frame = read_frame(self.rfile)
                if frame is None:
                    return
                try:
                    msg = decode(frame)
                except ProtocolError as exc:
                    code = "unknown_type" if isinstance(exc, UnknownType) else "protocol"
                    reply = Envelope(MessageType.ERROR, exc.request_id, {"code": code, "message": str(exc)})
                    self.wfile.write(encode(reply))
                    self.wfile.flush()
                    if isinstance(exc, UnknownType):
                        continue
                    return  # bad frame: close the connection
                self.wfile.write(encode(node.handle(msg)))
                self.wfile.flush()
            except (ConnectionError, ProtocolError):
                return
        threading.Thread(target=self.server.shutdown, daemon=True).start()


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], node: NodeServer):
        self.node = node
        super().__init__(address, _Handler)


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


def make_tcp_server(listen: str, workers: int, node_id: str | None = None) -> _TcpServer:
    runtime = NodeRuntime(workers, node_id or listen)
    return _TcpServer(parse_endpoint(listen), NodeServer(runtime))


def serve(listen: str, workers: int) -> None:
    """Run a node until a shutdown message arrives."""
    server = make_tcp_server(listen, workers)
    log.info("node listening on %s:%d with %d workers", *server.server_address[:2], workers)
    try:
        server.serve_forever()
    finally:
        server.node.runtime.close()
        server.server_close()
