"""Manager/worker wire format.

A frame is a 4-byte big-endian length followed by a UTF-8 body of
``key=value`` lines. ``kind`` and ``version`` come first; every value is a
JSON literal so strings with newlines survive. Example::

    kind="task_request"
    version=1
    worker_id="node-3"
"""

from __future__ import annotations

import json
import socket
import struct
import uuid
from dataclasses import asdict, dataclass, field
from typing import Optional

from .actions import Invocation
from .exceptions import ProtocolError

PROTOCOL_VERSION = 1
KINDS = ("hello", "task_request", "task", "result", "heartbeat", "shutdown", "error")
MAX_FRAME = 256 * 1024 * 1024


@dataclass(frozen=True)
class Message:
    kind: str
    payload: dict = field(default_factory=dict)
    version: int = PROTOCOL_VERSION


def encode(msg: Message) -> bytes:
    if msg.kind not in KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    lines = [f"kind={json.dumps(msg.kind)}", f"version={json.dumps(msg.version)}"]
    for k, v in msg.payload.items():
        if "=" in k or "\n" in k or k in ("kind", "version"):
            raise ProtocolError(f"invalid payload key {k!r}")
        lines.append(f"{k}={json.dumps(v, ensure_ascii=False)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode(data: bytes) -> Message:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError("frame is not UTF-8") from e
    fields_ = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ProtocolError(f"malformed line {line[:60]!r}")
        try:
            fields_[key] = json.loads(value)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"bad value for {key!r}") from e
    kind = fields_.pop("kind", None)
    version = fields_.pop("version", None)
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    if not isinstance(version, int):
        raise ProtocolError("missing protocol version")
    return Message(kind, fields_, version)


def send(sock: socket.socket, msg: Message) -> None:
    body = encode(msg)
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_exact(sock, n) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def recv(sock: socket.socket) -> Optional[Message]:
    """Next message, or None when the peer closed the connection."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n)
    if body is None:
        return None
    return decode(body)


# --- task payloads ------------------------------------------------------

@dataclass
class Task:
    task_id: str
    kind: str  # transition | baseline
    program_id: str = ""
    state: str = ""  # fingerprint of the state being expanded
    action: int = -1
    ir_id: str = ""
    invocation: Optional[dict] = None  # {"passes": [...], "flags": [[p, k, v], ...]}
    policy: Optional[dict] = None
    source: Optional[str] = None  # baseline tasks only
    attempts: int = 0

    @staticmethod
    def new_id() -> str:
        return uuid.uuid4().hex

    def get_invocation(self) -> Invocation:
        inv = self.invocation or {}
        return Invocation(tuple(inv.get("passes", ())),
                          tuple(tuple(f) for f in inv.get("flags", ())))

    @staticmethod
    def pack_invocation(inv: Invocation) -> dict:
        return {"passes": list(inv.passes), "flags": [list(f) for f in inv.flags]}

    def to_payload(self, ir_body: Optional[str] = None) -> dict:
        d = asdict(self)
        d.pop("attempts")
        if ir_body is not None:
            d["ir_body"] = ir_body
        return d

    @classmethod
    def from_payload(cls, d: dict) -> "Task":
        d = {k: v for k, v in d.items() if k != "ir_body"}
        return cls(**d)


@dataclass
class TaskResult:
    task_id: str
    status: str  # ok | fault | retry | failed
    worker_id: str = ""
    ir_body: Optional[str] = None
    runtime: Optional[float] = None
    stderr: str = ""
    # baseline tasks
    base_body: Optional[str] = None
    base_runtime: Optional[float] = None
    o3_body: Optional[str] = None
    o3_runtime: Optional[float] = None

    def to_payload(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_payload(cls, d: dict) -> "TaskResult":
        return cls(**d)
