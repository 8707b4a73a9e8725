"""Newline-delimited JSON envelopes exchanged between orchestrator and nodes.

A frame is one UTF-8 JSON object terminated by ``\\n``::

    {"v":1,"type":"query_request","request_id":7,"payload":{"vector":[...],"k":10}}

Neighbor lists travel as ``[[id, distance, label], ...]``. Floats use
Python's shortest round-trip ``repr``, so decoding reproduces them exactly.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

from .points import KnnEntry

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024


class ProtocolError(Exception):
    """Malformed frame or schema violation; the connection should be closed.

    ``request_id`` is the id parsed from the frame, or 0 if it never got that far.
    """

    def __init__(self, message: str, request_id: int = 0):
        super().__init__(message)
        self.request_id = request_id


class UnknownType(ProtocolError):
    """Well-formed envelope with an unrecognised ``type``; answer and keep going."""


class EncodeError(ValueError):
    pass


class MessageType(str, enum.Enum):
    BUILD_REQUEST = "build_request"
    BUILD_ACK = "build_ack"
    QUERY_REQUEST = "query_request"
    QUERY_RESPONSE = "query_response"
    SHUTDOWN = "shutdown"
    ERROR = "error"


@dataclass
class Envelope:
    type: MessageType
    request_id: int
    payload: dict[str, Any] = field(default_factory=dict)

    def reply(self, type: MessageType, payload: dict[str, Any]) -> "Envelope":
        return Envelope(type, self.request_id, payload)

    def error(self, code: str, message: str) -> "Envelope":
        return Envelope(MessageType.ERROR, self.request_id, {"code": code, "message": message})


# ------------------------------------------------------------------ schemas

Check = Callable[[Any], bool]


def _int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _nonneg_int(v: Any) -> bool:
    return _int(v) and v >= 0


def _num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _str(v: Any) -> bool:
    return isinstance(v, str)


def _bool(v: Any) -> bool:
    return isinstance(v, bool)


def _list_of(check: Check) -> Check:
    return lambda v: isinstance(v, list) and all(check(x) for x in v)


def _dict(v: Any) -> bool:
    return isinstance(v, dict)


def _knn_row(v: Any) -> bool:
    return (
        isinstance(v, list)
        and len(v) == 3
        and _int(v[0])
        and _num(v[1])
        and v[1] >= 0
        and v[2] in (0, 1)
        and not isinstance(v[2], bool)
    )


def _hash_spec(v: Any) -> bool:
    return isinstance(v, dict) and set(v) == {"family", "seed", "m", "d", "C"}


# type -> (required fields, optional fields)
SCHEMAS: dict[MessageType, tuple[dict[str, Check], dict[str, Check]]] = {
    MessageType.BUILD_REQUEST: (
        {
            "dataset": _str,
            "start": _nonneg_int,
            "stop": _nonneg_int,
            "hash_specs": _list_of(_hash_spec),
            "config": _dict,
        },
        {"node_id": _str},
    ),
    MessageType.BUILD_ACK: (
        {
            "points": _nonneg_int,
            "tables": _nonneg_int,
            "buckets": _nonneg_int,
            "inner_layers": _nonneg_int,
            "elapsed_s": _num,
            "spec_digest": _str,
        },
        {"node_id": _str, "workers": _nonneg_int},
    ),
    MessageType.QUERY_REQUEST: (
        {"vector": _list_of(_num), "k": lambda v: _int(v) and v >= 1},
        {},
    ),
    MessageType.QUERY_RESPONSE: (
        {
            "neighbors": _list_of(_knn_row),
            "comparisons": _list_of(_nonneg_int),
            "candidates_unique": _nonneg_int,
            "inner_layer_hits": _nonneg_int,
        },
        {"prediction": lambda v: v in (0, 1) and not isinstance(v, bool), "latency_s": _num},
    ),
    MessageType.SHUTDOWN: ({}, {}),
    MessageType.ERROR: ({"code": _str, "message": _str}, {}),
}


def validate(msg: Envelope) -> None:
    required, optional = SCHEMAS[msg.type]
    payload = msg.payload
    if not isinstance(payload, dict):
        raise ProtocolError("payload must be an object")
    missing = set(required) - set(payload)
    if missing:
        raise ProtocolError(f"{msg.type.value}: missing fields {sorted(missing)}")
    extra = set(payload) - set(required) - set(optional)
    if extra:
        raise ProtocolError(f"{msg.type.value}: unexpected fields {sorted(extra)}")
    for name, value in payload.items():
        check = required.get(name) or optional[name]
        if not check(value):
            raise ProtocolError(f"{msg.type.value}: bad value for {name!r}")


# ------------------------------------------------------------- framing


def _reject_constant(name: str) -> Any:
    raise ProtocolError(f"non-finite number {name} in frame")


def encode(msg: Envelope) -> bytes:
    try:
        mtype = MessageType(msg.type)
    except ValueError:
        raise EncodeError(f"unknown message type {msg.type!r}") from None
    if not _int(msg.request_id) or not 0 <= msg.request_id < 2**64:
        raise EncodeError("request_id must be a 64-bit unsigned integer")
    try:
        validate(Envelope(mtype, msg.request_id, msg.payload))
    except ProtocolError as exc:
        raise EncodeError(str(exc)) from None
    obj = {"v": PROTOCOL_VERSION, "type": mtype.value, "request_id": msg.request_id, "payload": msg.payload}
    try:
        text = json.dumps(obj, allow_nan=False, separators=(",", ":"))
    except ValueError as exc:
        raise EncodeError(f"cannot encode payload: {exc}") from None
    return text.encode("utf-8") + b"\n"


def decode(frame: bytes) -> Envelope:
    if len(frame) > MAX_FRAME_BYTES:
        raise ProtocolError("frame exceeds 64 MiB")
    if not frame.endswith(b"\n"):
        raise ProtocolError("truncated frame (no terminating newline)")
    body = frame[:-1]
    if b"\n" in body:
        raise ProtocolError("frame contains more than one line")
    try:
        obj = json.loads(body.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"v", "type", "request_id", "payload"}:
        raise ProtocolError("envelope must have exactly v, type, request_id, payload")
    if obj["v"] != PROTOCOL_VERSION or isinstance(obj["v"], bool):
        raise ProtocolError(f"protocol version mismatch: {obj['v']!r}")
    request_id = obj["request_id"]
    if not _int(request_id) or not 0 <= request_id < 2**64:
        raise ProtocolError("request_id must be a 64-bit unsigned integer")
    try:
        mtype = MessageType(obj["type"])
    except ValueError:
        raise UnknownType(f"unknown message type {obj['type']!r}", request_id) from None
    msg = Envelope(mtype, request_id, obj["payload"])
    try:
        validate(msg)
    except ProtocolError as exc:
        raise ProtocolError(str(exc), request_id) from None
    return msg


def read_frame(stream: Any) -> bytes | None:
    """Read one frame from a binary file-like object; ``None`` on clean EOF."""
    line = stream.readline(MAX_FRAME_BYTES + 1)
    if not line:
        return None
    if len(line) > MAX_FRAME_BYTES:
        raise ProtocolError("frame exceeds 64 MiB")
    return line


# -------------------------------------------------------- payload helpers


def knn_to_wire(entries: list[KnnEntry]) -> list[list[Any]]:
    out = []
    for e in entries:
        if not math.isfinite(e.distance):
            raise EncodeError("non-finite distance")
        out.append([int(e.point_id), float(e.distance), int(e.label)])
    return out


def knn_from_wire(rows: list[list[Any]]) -> list[KnnEntry]:
    return [KnnEntry(int(i), float(d), int(lab)) for i, d, lab in rows]
