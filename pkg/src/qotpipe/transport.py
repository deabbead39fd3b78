"""Framed, ordered duplex transport with a role/version/params handshake."""
from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass

from .errors import ProtocolAbort

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

LANE_OT, LANE_QKD, LANE_MPC = 0, 1, 2

_HEADER = struct.Struct(">IB8sQ")  # length, lane, type tag, session id
_AFTER_LENGTH = _HEADER.size - 4

FRAME_TYPES = frozenset(t.ljust(8, b"\x00") for t in (
    b"HELLO", b"PARAMS", b"AUTH_TAG", b"AUTH_RES", b"ABORT", b"RAW_REQ",
    b"PUBSTR", b"COMMIT", b"TESTSET", b"OPEN", b"VERDICT", b"BASES", b"SPLIT",
    b"CASC_SD", b"CASC_PAR", b"CASC_RES", b"CASC_VFY", b"CASC_ACK",
    b"PA_SEED", b"QKD_BAS", b"QKD_SMP", b"QKD_KEY",
    b"MPC_MSG", b"DONE",
))


class TransportError(Exception):
    pass


class HandshakeError(TransportError):
    pass


def type_tag(name: str | bytes) -> bytes:
    raw = name.encode() if isinstance(name, str) else name
    if len(raw) > 8:
        raise ValueError(f"type tag {raw!r} longer than 8 bytes")
    return raw.ljust(8, b"\x00")


@dataclass(frozen=True)
class Frame:
    lane: int
    type: str
    session_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise TransportError(f"payload of {len(self.payload)} bytes exceeds the 16 MiB limit")
        tag = type_tag(self.type)
        if tag not in FRAME_TYPES:
            raise TransportError(f"unknown frame type {self.type!r}")
        return _HEADER.pack(_AFTER_LENGTH + len(self.payload), self.lane, tag, self.session_id) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        if len(data) < _HEADER.size:
            raise TransportError("truncated frame header")
        length, lane, tag, sid = _HEADER.unpack_from(data)
        if length < _AFTER_LENGTH or length - _AFTER_LENGTH > MAX_PAYLOAD:
            raise TransportError(f"bad frame length {length}")
        if len(data) != 4 + length:
            raise TransportError("frame length does not match the buffer")
        if tag not in FRAME_TYPES:
            raise ProtocolAbort("protocol_violation", f"unknown frame type {tag!r}")
        return cls(lane, tag.rstrip(b"\x00").decode(), sid, bytes(data[_HEADER.size:]))


class Transport:
    """Base class: subclasses move encoded frames."""

    timeout: float = DEFAULT_TIMEOUT

    def send(self, frame: Frame) -> None:
        self._send_bytes(frame.encode())

    def recv(self, timeout: float | None = None) -> Frame:
        return Frame.decode(self._recv_bytes(self.timeout if timeout is None else timeout))

    def close(self) -> None:
        pass

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, timeout: float) -> bytes:
        raise NotImplementedError


class LoopbackTransport(Transport):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = DEFAULT_TIMEOUT):
        self.inbox, self.outbox, self.timeout = inbox, outbox, timeout
        self.sent_frames = 0
        self.sent_bytes = 0

    def _send_bytes(self, data: bytes) -> None:
        self.sent_frames += 1
        self.sent_bytes += len(data)
        self.outbox.put(data)

    def _recv_bytes(self, timeout: float) -> bytes:
        try:
            data = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolAbort("timeout", f"no frame within {timeout} s") from None
        if data is None:
            raise TransportError("peer closed the connection")
        return data

    def close(self) -> None:
        self.outbox.put(None)


def loopback_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[LoopbackTransport, LoopbackTransport]:
    a, b = queue.Queue(), queue.Queue()
    return LoopbackTransport(a, b, timeout), LoopbackTransport(b, a, timeout)


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        self.sock = sock
        self.timeout = timeout
        self._lock = threading.Lock()
        self.sent_frames = 0
        self.sent_bytes = 0
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_bytes(self, data: bytes) -> None:
        with self._lock:
            self.sock.sendall(data)
            self.sent_frames += 1
            self.sent_bytes += len(data)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise ProtocolAbort("timeout", "socket read timed out") from None
            if not chunk:
                raise TransportError("truncated stream: peer closed mid-frame" if buf else "peer closed the connection")
            buf += chunk
        return bytes(buf)

    def _recv_bytes(self, timeout: float) -> bytes:
        self.sock.settimeout(timeout)
        head = self._read_exact(4)
        (length,) = struct.unpack(">I", head)
        if length < _AFTER_LENGTH or length - _AFTER_LENGTH > MAX_PAYLOAD:
            raise TransportError(f"bad frame length {length}")
        return head + self._read_exact(length)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def listen(endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> SocketTransport:
    host, port = parse_endpoint(endpoint)
    with socket.create_server((host, port), reuse_port=False) as srv:
        srv.settimeout(timeout)
        try:
            conn, _ = srv.accept()
        except socket.timeout:
            raise ProtocolAbort("timeout", f"no peer connected to {endpoint}") from None
    return SocketTransport(conn, timeout)


def dial(endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = 50) -> SocketTransport:
    import time
    host, port = parse_endpoint(endpoint)
    last = None
    for _ in range(retries):
        try:
            return SocketTransport(socket.create_connection((host, port), timeout=timeout), timeout)
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    raise TransportError(f"cannot reach {endpoint}: {last}")


_HELLO = struct.Struct(">HB32s")
ROLE_CODES = {"sender": 0, "receiver": 1}


def handshake(t: Transport, role: str, params_digest: bytes, session_id: int = 0) -> None:
    """Exchange version, role and parameter digest; raises on any disagreement."""
    t.send(Frame(LANE_OT, "HELLO", session_id, _HELLO.pack(PROTOCOL_VERSION, ROLE_CODES[role], params_digest)))
    reply = t.recv()
    if reply.type != "HELLO" or len(reply.payload) != _HELLO.size:
        raise HandshakeError("peer did not answer with a HELLO frame")
    version, peer_role, digest = _HELLO.unpack(reply.payload)
    if version != PROTOCOL_VERSION:
        raise HandshakeError(f"version mismatch: local {PROTOCOL_VERSION}, peer {version}")
    if peer_role == ROLE_CODES[role]:
        raise HandshakeError(f"role conflict: both ends are {role}")
    if digest != params_digest:
        raise ProtocolAbort("params_mismatch", "parameter digests differ")


def connect(role: str, endpoint: str | None, params_digest: bytes, listen_side: bool | None = None,
            timeout: float = DEFAULT_TIMEOUT) -> SocketTransport:
    """Open a socket session; by default the sender listens and the receiver dials."""
    if listen_side is None:
        listen_side = role == "sender"
    t = listen(endpoint, timeout) if listen_side else dial(endpoint, timeout)
    handshake(t, role, params_digest)
    return t
