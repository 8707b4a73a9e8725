"""Cluster coordinator: Root, Forwarder and Reducer stages over ``nu`` nodes.

Root owns builds and predictions, Forwarder broadcasts each query to every
node concurrently, Reducer merges the local K-NN lists into the global top-K.
The three stages are threads joined by queues; one query is in flight at a
time.
"""
from __future__ import annotations

import itertools
import json
import logging
import queue
import socket
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .lsh_hash import InvalidParameter
from .node_runtime import NodeServer, parse_endpoint
from .points import KnnEntry, read_dataset
from .slsh_index import QueryStats, SlshConfig, merge_topk
from .wire_protocol import (
    Envelope,
    MessageType,
    ProtocolError,
    UnknownType,
    decode,
    encode,
    knn_from_wire,
    knn_to_wire,
    read_frame,
)

log = logging.getLogger(__name__)

TIE_RULES = ("negative", "positive", "nearest")
TIMEOUT_POLICIES = ("fail", "partial")


class ClusterError(RuntimeError):
    """A node failed, timed out or disagreed; ``node_status`` maps endpoint to outcome."""

    def __init__(self, message: str, node_status: dict[str, str] | None = None):
        super().__init__(message)
        self.node_status = node_status or {}


@dataclass(frozen=True)
class VotingConfig:
    K: int = 10
    epsilon: float = 1e-9
    tie_rule: str = "negative"

    def __post_init__(self) -> None:
        if self.K < 1:
            raise InvalidParameter("K must be >= 1")
        if not self.epsilon > 0:
            raise InvalidParameter("epsilon must be positive")
        if self.tie_rule not in TIE_RULES:
            raise InvalidParameter(f"tie_rule must be one of {TIE_RULES}")


def weighted_vote(neighbors: Sequence[KnnEntry], vcfg: VotingConfig = VotingConfig()) -> int:
    """Inverse-distance vote: positive iff the positive weight strictly exceeds the negative."""
    score = [0.0, 0.0]
    for e in neighbors[: vcfg.K]:
        score[1 if e.label else 0] += 1.0 / (e.distance + vcfg.epsilon)
    if score[1] > score[0]:
        return 1
    if score[0] > score[1]:
        return 0
    if vcfg.tie_rule == "positive":
        return 1
    if vcfg.tie_rule == "nearest" and neighbors:
        return int(neighbors[0].label)
    return 0


def partition_dataset(n: int, nu: int) -> list[range]:
    """Contiguous id ranges, one per node; earlier nodes take the remainder."""
    if nu < 1:
        raise InvalidParameter("need at least one node")
    if nu > n:
        log.warning("%d nodes for %d points; some slices are empty", nu, n)
    base, extra = divmod(n, nu)
    out = []
    start = 0
    for i in range(nu):
        size = base + (1 if i < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple[str, ...]
    slsh: SlshConfig
    voting: VotingConfig = VotingConfig()
    timeout_s: float = 30.0
    timeout_policy: str = "fail"
    listen: str = "127.0.0.1:7600"
    dataset: str | None = None

    def __post_init__(self) -> None:
        if not self.nodes:
            raise InvalidParameter("need at least one node endpoint")
        if self.timeout_policy not in TIMEOUT_POLICIES:
            raise InvalidParameter(f"timeout_policy must be one of {TIMEOUT_POLICIES}")

    _SLSH_KEYS = ("m_out", "L_out", "m_in", "L_in", "alpha", "inner_enabled", "d", "K", "master_seed", "rank_metric")

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ClusterConfig":
        known = set(cls._SLSH_KEYS) | {"nodes", "epsilon", "tie_rule", "timeout_s", "timeout_policy", "listen", "dataset"}
        unknown = set(obj) - known
        if unknown:
            raise InvalidParameter(f"unknown cluster config fields: {sorted(unknown)}")
        slsh = SlshConfig(**{k: obj[k] for k in cls._SLSH_KEYS if k in obj})
        voting = VotingConfig(slsh.K, obj.get("epsilon", 1e-9), obj.get("tie_rule", "negative"))
        return cls(
            tuple(obj["nodes"]),
            slsh,
            voting,
            float(obj.get("timeout_s", 30.0)),
            obj.get("timeout_policy", "fail"),
            obj.get("listen", "127.0.0.1:7600"),
            obj.get("dataset"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ClusterConfig":
        cfg = cls.from_json(json.loads(Path(path).read_text()))
        if cfg.dataset is not None and not Path(cfg.dataset).is_absolute():
            cfg = ClusterConfig(
                cfg.nodes, cfg.slsh, cfg.voting, cfg.timeout_s, cfg.timeout_policy, cfg.listen,
                str(Path(path).parent / cfg.dataset),
            )
        return cfg


# --------------------------------------------------------------- transports


class Transport(Protocol):
    endpoint: str

    def request(self, frame: bytes) -> bytes: ...

    def close(self) -> None: ...


class LoopbackTransport:
    """Frames handed straight to an in-process :class:`NodeServer`."""

    def __init__(self, server: NodeServer, endpoint: str):
        self.server = server
        self.endpoint = endpoint

    def request(self, frame: bytes) -> bytes:
        return self.server.handle_frame(frame)

    def close(self) -> None:
        self.server.runtime.close()


class TcpTransport:
    """One persistent connection per node; reconnects after a failure."""

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._reader: Any = None

    def _connect(self) -> None:
        host, port = parse_endpoint(self.endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=self.timeout_s)
        except OSError as exc:
            raise ClusterError(f"node {self.endpoint} unreachable: {exc}", {self.endpoint: "unreachable"}) from exc
        self._reader = self._sock.makefile("rb")

    def request(self, frame: bytes) -> bytes:
        if self._sock is None:
            self._connect()
        try:
            self._sock.sendall(frame)
            reply = read_frame(self._reader)
        except (OSError, ProtocolError) as exc:
            self.close()
            raise ClusterError(f"node {self.endpoint} failed: {exc}", {self.endpoint: "failed"}) from exc
        if reply is None:
            self.close()
            raise ClusterError(f"node {self.endpoint} closed the connection", {self.endpoint: "closed"})
        return reply

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._reader.close()
                self._sock.close()
            finally:
                self._sock = None
                self._reader = None


# ------------------------------------------------------------------ stages


@dataclass
class QueryResult:
    neighbors: list[KnnEntry]
    prediction: int
    stats: QueryStats
    latency_s: float = 0.0


@dataclass
class _Job:
    request_id: int
    vector: list[float]
    k: int
    replies: dict[str, Envelope | BaseException] = field(default_factory=dict)
    neighbors: list[KnnEntry] = field(default_factory=list)
    stats: QueryStats | None = None
    error: BaseException | None = None


_STOP = object()


class _Stage(threading.Thread):
    def __init__(self, name: str, inbox: queue.Queue, outbox: queue.Queue, fn: Callable[[_Job], None]):
        super().__init__(name=name, daemon=True)
        self.inbox, self.outbox, self.fn = inbox, outbox, fn

    def run(self) -> None:
        while True:
            job = self.inbox.get()
            if job is _STOP:
                self.outbox.put(_STOP)
                return
            if job.error is None:
                try:
                    self.fn(job)
                except BaseException as exc:  # handed to Root, which re-raises
                    job.error = exc
            self.outbox.put(job)


class Orchestrator:
    """Coordinates ``nu`` nodes reachable through ``transports``."""

    def __init__(
        self,
        transports: Sequence[Transport],
        slsh: SlshConfig,
        voting: VotingConfig | None = None,
        timeout_s: float = 30.0,
        timeout_policy: str = "fail",
    ):
        if not transports:
            raise InvalidParameter("need at least one node")
        self.transports = list(transports)
        self.slsh = slsh
        self.voting = voting or VotingConfig(slsh.K)
        self.timeout_s = timeout_s
        self.timeout_policy = timeout_policy
        self.digest: str | None = None
        self._ids = itertools.count(1)
        self._send_pool = ThreadPoolExecutor(max_workers=len(self.transports), thread_name_prefix="forward")
        self._to_forwarder: queue.Queue = queue.Queue()
        self._to_reducer: queue.Queue = queue.Queue()
        self._to_root: queue.Queue = queue.Queue()
        self._stages = [
            _Stage("forwarder", self._to_forwarder, self._to_reducer, self._forward),
            _Stage("reducer", self._to_reducer, self._to_root, self._reduce),
        ]
        for stage in self._stages:
            stage.start()
        self._query_lock = threading.Lock()

    @classmethod
    def from_config(cls, cfg: ClusterConfig) -> "Orchestrator":
        transports = [TcpTransport(ep, cfg.timeout_s) for ep in cfg.nodes]
        return cls(transports, cfg.slsh, cfg.voting, cfg.timeout_s, cfg.timeout_policy)

    @property
    def nu(self) -> int:
        return len(self.transports)

    def _fan_out(self, frames: Sequence[bytes]) -> dict[str, Envelope | BaseException]:
        """Send one frame per node concurrently; collect replies or failures within the timeout."""
        futures = {
            self._send_pool.submit(t.request, frame): t.endpoint for t, frame in zip(self.transports, frames)
        }
        done, pending = wait(futures, timeout=self.timeout_s)
        out: dict[str, Envelope | BaseException] = {}
        for fut, endpoint in futures.items():
            if fut in pending:
                fut.cancel()
                out[endpoint] = TimeoutError(f"node {endpoint} timed out after {self.timeout_s} s")
                continue
            try:
                out[endpoint] = decode(fut.result())
            except BaseException as exc:
                out[endpoint] = exc
        return out

    # Root ---------------------------------------------------------------

    def build(self, dataset: str | Path) -> dict[str, Any]:
        """Assign each node a contiguous slice and broadcast the shared outer hash specs."""
        dataset = str(Path(dataset).resolve())
        n = len(read_dataset(dataset))
        specs = [s.to_json() for s in self.slsh.outer_specs()]
        frames = []
        for t, rows in zip(self.transports, partition_dataset(n, self.nu)):
            msg = Envelope(
                MessageType.BUILD_REQUEST,
                next(self._ids),
                {
                    "dataset": dataset,
                    "start": rows.start,
                    "stop": rows.stop,
                    "hash_specs": specs,
                    "config": self.slsh.to_json(),
                    "node_id": t.endpoint,
                },
            )
            frames.append(encode(msg))
        with self._query_lock:
            replies = self._fan_out(frames)
        status: dict[str, str] = {}
        reports = {}
        for endpoint, reply in replies.items():
            if isinstance(reply, BaseException):
                status[endpoint] = f"failed: {reply}"
            elif reply.type is MessageType.ERROR:
                status[endpoint] = f"error {reply.payload['code']}: {reply.payload['message']}"
            elif reply.type is not MessageType.BUILD_ACK:
                status[endpoint] = f"unexpected reply {reply.type.value}"
            else:
                status[endpoint] = "ok"
                reports[endpoint] = reply.payload
        failed = [ep for ep, s in status.items() if s != "ok"]
        if failed:
            raise ClusterError(f"build aborted; failing node(s): {', '.join(failed)}", status)
        digests = {r["spec_digest"] for r in reports.values()}
        if len(digests) != 1:
            raise ClusterError("nodes report different hash-spec digests", status)
        self.digest = digests.pop()
        return {"n": n, "nu": self.nu, "spec_digest": self.digest, "nodes": reports}

    def query(self, vector: Sequence[float] | np.ndarray, k: int | None = None) -> QueryResult:
        """Resolve one query through Forwarder and Reducer, then vote at Root."""
        k = k or self.voting.K
        vector = [float(v) for v in np.asarray(vector, dtype=np.float64).ravel()]
        if len(vector) != self.slsh.d:
            raise InvalidParameter(f"query has dimension {len(vector)}, expected {self.slsh.d}")
        with self._query_lock:
            t0 = time.perf_counter()
            self._to_forwarder.put(_Job(next(self._ids), vector, k))
            job = self._to_root.get()
            latency = time.perf_counter() - t0
        if job.error is not None:
            raise job.error
        prediction = weighted_vote(job.neighbors, self.voting)
        return QueryResult(job.neighbors, prediction, job.stats, latency)

    # Forwarder ----------------------------------------------------------

    def _forward(self, job: _Job) -> None:
        frame = encode(Envelope(MessageType.QUERY_REQUEST, job.request_id, {"vector": job.vector, "k": job.k}))
        job.replies = self._fan_out([frame] * self.nu)

    # Reducer ------------------------------------------------------------

    def _reduce(self, job: _Job) -> None:
        partials = []
        stats = []
        status: dict[str, str] = {}
        for endpoint, reply in job.replies.items():
            if isinstance(reply, BaseException):
                status[endpoint] = str(reply)
                continue
            if reply.type is MessageType.ERROR:
                status[endpoint] = f"error {reply.payload['code']}: {reply.payload['message']}"
                continue
            if reply.type is not MessageType.QUERY_RESPONSE or reply.request_id != job.request_id:
                status[endpoint] = "mismatched reply"
                continue
            p = reply.payload
            partials.append(knn_from_wire(p["neighbors"]))
            stats.append(QueryStats(list(p["comparisons"]), p["candidates_unique"], p["inner_layer_hits"]))
        timed_out = all(isinstance(job.replies[ep], TimeoutError) for ep in status)
        if status and not (timed_out and self.timeout_policy == "partial" and partials):
            raise ClusterError(f"query {job.request_id} failed on node(s): {', '.join(status)}", status)
        job.neighbors = merge_topk(partials, job.k)
        job.stats = QueryStats.combine(stats)

    def close(self) -> None:
        self._to_forwarder.put(_STOP)
        self._to_root.get()  # reducer forwards the sentinel once both stages stop
        self._send_pool.shutdown(wait=False)
        for t in self.transports:
            t.close()

    def __enter__(self) -> "Orchestrator":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def in_process_cluster(
    nu: int, p: int, slsh: SlshConfig, voting: VotingConfig | None = None, timeout_s: float = 30.0
) -> Orchestrator:
    """``nu`` in-process nodes with ``p`` workers each, wired by loopback frames."""
    from .node_runtime import NodeRuntime

    transports = [
        LoopbackTransport(NodeServer(NodeRuntime(p, f"local-{i}")), f"local-{i}") for i in range(nu)
    ]
    return Orchestrator(transports, slsh, voting, timeout_s)


# ------------------------------------------------------- query service


class _ClientHandler(socketserver.StreamRequestHandler):
    server: "OrchestratorServer"

    def handle(self) -> None:
        orch = self.server.orchestrator
        while True:
            try:
                frame = read_frame(self.rfile)
            except ProtocolError:
                return
            if frame is None:
                return
            try:
                msg = decode(frame)
            except ProtocolError as exc:
                code = "unknown_type" if isinstance(exc, UnknownType) else "protocol"
                self.wfile.write(encode(Envelope(MessageType.ERROR, exc.request_id, {"code": code, "message": str(exc)})))
                self.wfile.flush()
                if isinstance(exc, UnknownType):
                    continue
                return
            self.wfile.write(encode(self._dispatch(orch, msg)))
            self.wfile.flush()
            if msg.type is MessageType.SHUTDOWN:
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return

    @staticmethod
    def _dispatch(orch: Orchestrator, msg: Envelope) -> Envelope:
        if msg.type is MessageType.SHUTDOWN:
            return msg.reply(MessageType.SHUTDOWN, {})
        if msg.type is not MessageType.QUERY_REQUEST:
            return msg.error("unexpected_type", f"orchestrator does not accept {msg.type.value}")
        try:
            res = orch.query(msg.payload["vector"], msg.payload["k"])
        except (InvalidParameter, ClusterError) as exc:
            return msg.error("query_failed", str(exc))
        return msg.reply(
            MessageType.QUERY_RESPONSE,
            {
                "neighbors": knn_to_wire(res.neighbors),
                "comparisons": res.stats.comparisons_per_processor,
                "candidates_unique": res.stats.candidates_unique,
                "inner_layer_hits": res.stats.inner_layer_hits,
                "prediction": res.prediction,
                "latency_s": res.latency_s,
            },
        )


class OrchestratorServer(socketserver.ThreadingTCPServer):
    """Accepts ``query_request`` frames from clients and answers with predictions."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, listen: str, orchestrator: Orchestrator):
        self.orchestrator = orchestrator
        super().__init__(parse_endpoint(listen), _ClientHandler)


def send_query(endpoint: str, vector: Sequence[float], k: int, timeout_s: float = 60.0) -> Envelope:
    """Client side of the query service."""
    t = TcpTransport(endpoint, timeout_s)
    try:
        frame = encode(Envelope(MessageType.QUERY_REQUEST, 1, {"vector": [float(v) for v in vector], "k": k}))
        return decode(t.request(frame))
    finally:
        t.close()


def send_shutdown(endpoint: str, timeout_s: float = 10.0) -> Envelope:
    t = TcpTransport(endpoint, timeout_s)
    try:
        return decode(t.request(encode(Envelope(MessageType.SHUTDOWN, 1, {}))))
    finally:
        t.close()

