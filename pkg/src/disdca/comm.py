"""Reduce step transports: in-process and a TCP coordinator/worker star.

Frames are little-endian::

    magic "DDCA" | version u8 = 1 | msg_type u8 | round u32 | payload_len u64 | payload

CONTRIBUTE/RESULT carry float64 vectors, HELLO carries (worker_id u32, dim u32),
ERROR carries UTF-8 text and DONE is empty.  The coordinator always returns
the element-wise sum taken in ascending worker-id order; averaging is done by
the caller, so every transport produces bit-identical results.
"""
import logging
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, TransportError

log = logging.getLogger(__name__)

MAGIC = b"DDCA"
VERSION = 1
HELLO, CONTRIBUTE, RESULT, DONE, ERROR = range(5)
MSG_NAMES = {HELLO: "HELLO", CONTRIBUTE: "CONTRIBUTE", RESULT: "RESULT", DONE: "DONE", ERROR: "ERROR"}
HEADER = struct.Struct("<4sBBIQ")
HELLO_BODY = struct.Struct("<II")
MAX_ERROR_LEN = 1 << 16
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    round: int = 0
    payload: bytes = b""

    @classmethod
    def hello(cls, worker_id, dim):
        return cls(HELLO, 0, HELLO_BODY.pack(worker_id, dim))

    @classmethod
    def vector(cls, msg_type, round_, vec):
        return cls(msg_type, round_, np.asarray(vec, dtype="<f8").tobytes())

    @classmethod
    def error(cls, text, round_=0):
        return cls(ERROR, round_, text.encode("utf-8")[:MAX_ERROR_LEN])

    def encode(self):
        return HEADER.pack(MAGIC, VERSION, self.msg_type, self.round, len(self.payload)) + self.payload

    def as_vector(self):
        return np.frombuffer(self.payload, dtype="<f8").astype(np.float64)

    def as_hello(self):
        return HELLO_BODY.unpack(self.payload)

    def as_text(self):
        return self.payload.decode("utf-8", errors="replace")


def parse_header(raw, max_vector_dim=None):
    """Validate an 18-byte header; returns (msg_type, round, payload_len)."""
    if len(raw) != HEADER.size:
        raise ProtocolError(f"truncated header ({len(raw)} bytes)")
    magic, version, msg_type, round_, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if msg_type not in MSG_NAMES:
        raise ProtocolError(f"unknown message type {msg_type}")
    if msg_type == HELLO and length != HELLO_BODY.size:
        raise ProtocolError(f"HELLO payload must be {HELLO_BODY.size} bytes, got {length}")
    if msg_type == DONE and length != 0:
        raise ProtocolError("DONE carries no payload")
    if msg_type == ERROR and length > MAX_ERROR_LEN:
        raise ProtocolError("ERROR payload too long")
    if msg_type in (CONTRIBUTE, RESULT):
        if length % 8:
            raise ProtocolError(f"vector payload length {length} is not a multiple of 8")
        if max_vector_dim is not None and length != 8 * max_vector_dim:
            raise ProtocolError(f"vector has {length // 8} entries, expected {max_vector_dim}")
    return msg_type, round_, length


def decode(buf, dim=None):
    """Decode one complete frame from bytes (used by tests and fuzzing)."""
    msg_type, round_, length = parse_header(bytes(buf[: HEADER.size]), dim)
    payload = bytes(buf[HEADER.size :])
    if len(payload) != length:
        raise ProtocolError(f"payload is {len(payload)} bytes, header says {length}")
    return WireMessage(msg_type, round_, payload)


def _recv_exact(sock, size):
    chunks, got = [], 0
    while got < size:
        try:
            chunk = sock.recv(min(size - got, 1 << 20))
        except socket.timeout:
            raise TransportError("timed out waiting for peer") from None
        except OSError as exc:
            raise TransportError(f"connection failed: {exc}") from None
        if not chunk:
            raise TransportError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_message(sock, dim=None):
    msg_type, round_, length = parse_header(_recv_exact(sock, HEADER.size), dim)
    payload = _recv_exact(sock, length) if length else b""
    return WireMessage(msg_type, round_, payload)


def send_message(sock, msg):
    try:
        sock.sendall(msg.encode())
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from None


def fixed_order_sum(vectors):
    """Element-wise sum accumulated in list order."""
    acc = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        acc += v
    return acc


def finish(total, K, op):
    if op == "sum":
        return total
    if op == "average":
        return total / K
    raise ValueError(f"unknown reduce op {op!r}")


def reduce_vectors(vectors, op="average"):
    return finish(fixed_order_sum(vectors), len(vectors), op)


class InProcessGroup:
    """K threads meet at a barrier; all receive the same reduced vector."""

    def __init__(self, K, timeout=DEFAULT_TIMEOUT):
        self.K = K
        self.timeout = timeout
        self._slots = [None] * K
        self._result = None
        self._barrier = threading.Barrier(K, action=self._combine)
        self._release = threading.Barrier(K)
        self._round = 0

    def _combine(self):
        self._result = fixed_order_sum(self._slots)
        self._slots = [None] * self.K
        self._round += 1

    def channel(self, worker_id):
        return InProcessChannel(self, worker_id)


class InProcessChannel:
    def __init__(self, group, worker_id):
        self.group = group
        self.worker_id = worker_id
        self.K = group.K
        self.round = 0

    def allreduce_sum(self, local):
        g = self.group
        g._slots[self.worker_id] = np.asarray(local, dtype=np.float64)
        try:
            g._barrier.wait(g.timeout)
            result = g._result.copy()
            # second barrier so nobody overwrites slots before all have read
            g._release.wait(g.timeout)
        except threading.BrokenBarrierError:
            raise TransportError(f"in-process reduce failed at round {self.round}") from None
        self.round += 1
        return result

    def reduce(self, local, op="average"):
        return finish(self.allreduce_sum(local), self.K, op)

    def close(self):
        pass


class TcpChannel:
    """Worker side of the star allreduce."""

    def __init__(self, address, worker_id, dim, K, timeout=DEFAULT_TIMEOUT):
        self.worker_id = worker_id
        self.dim = dim
        self.K = K
        self.round = 0
        host, port = address
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"worker {worker_id}: cannot connect to {host}:{port}: {exc}") from None
        self.sock.settimeout(timeout)
        send_message(self.sock, WireMessage.hello(worker_id, dim))

    def allreduce_sum(self, local):
        local = np.asarray(local, dtype=np.float64)
        if local.shape != (self.dim,):
            raise ProtocolError(f"vector has shape {local.shape}, channel dim is {self.dim}")
        send_message(self.sock, WireMessage.vector(CONTRIBUTE, self.round, local))
        try:
            msg = recv_message(self.sock, self.dim)
        except TransportError as exc:
            raise type(exc)(f"round {self.round}: {exc}") from None
        if msg.msg_type == ERROR:
            raise ProtocolError(f"round {self.round}: coordinator error: {msg.as_text()}")
        if msg.msg_type != RESULT or msg.round != self.round:
            raise ProtocolError(
                f"expected RESULT for round {self.round}, got {MSG_NAMES[msg.msg_type]} round {msg.round}"
            )
        self.round += 1
        return msg.as_vector()

    def reduce(self, local, op="average"):
        return finish(self.allreduce_sum(local), self.K, op)

    def close(self):
        try:
            send_message(self.sock, WireMessage(DONE, self.round))
        finally:
            self.sock.close()


def parse_address(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class Coordinator:
    """Collects K contributions per round and broadcasts their fixed-order sum.

    Accepts exactly K HELLOs with distinct ids 0..K-1.  Bad handshakes get an
    ERROR and are dropped without disturbing the session; once rounds start,
    any protocol violation aborts the session and is raised.
    """

    def __init__(self, listen, K, dim, timeout=DEFAULT_TIMEOUT, handshake_timeout=5.0):
        self.K = K
        self.dim = dim
        self.timeout = timeout
        self.handshake_timeout = handshake_timeout
        host, port = listen
        self.server = socket.create_server((host, port))
        self.address = self.server.getsockname()[:2]
        self.rounds_completed = 0
        self.rejected = 0

    def _reject(self, conn, text):
        self.rejected += 1
        try:
            send_message(conn, WireMessage.error(text))
        except TransportError:
            pass
        conn.close()

    def _handshake(self):
        peers = {}
        self.server.settimeout(self.timeout)
        while len(peers) < self.K:
            try:
                conn, _ = self.server.accept()
            except socket.timeout:
                raise TransportError(f"only {len(peers)} of {self.K} workers connected") from None
            conn.settimeout(self.handshake_timeout)
            try:
                msg = recv_message(conn)
                if msg.msg_type != HELLO:
                    raise ProtocolError(f"expected HELLO, got {MSG_NAMES[msg.msg_type]}")
                wid, dim = msg.as_hello()
                if wid >= self.K:
                    raise ProtocolError(f"worker id {wid} out of range for K={self.K}")
                if wid in peers:
                    raise ProtocolError(f"duplicate worker id {wid}")
                if dim != self.dim:
                    raise ProtocolError(f"worker {wid} declared dim {dim}, coordinator expects {self.dim}")
            except TransportError as exc:
                log.warning("rejected connection: %s", exc)
                self._reject(conn, str(exc))
                continue
            conn.settimeout(self.timeout)
            peers[wid] = conn
        return [peers[k] for k in range(self.K)]

    def _abort(self, conns, text):
        for c in conns:
            try:
                send_message(c, WireMessage.error(text, self.rounds_completed))
            except TransportError:
                pass

    def serve(self):
        conns = []
        try:
            conns = self._handshake()
            while True:
                r = self.rounds_completed
                vectors, done = [], 0
                for wid, conn in enumerate(conns):
                    try:
                        msg = recv_message(conn, self.dim)
                    except TransportError as exc:
                        text = f"worker {wid}: {exc}"
                        self._abort(conns, text)
                        raise type(exc)(text) from None
                    if msg.msg_type == DONE:
                        done += 1
                        continue
                    if msg.msg_type != CONTRIBUTE:
                        text = f"worker {wid}: unexpected {MSG_NAMES[msg.msg_type]} in round {r}"
                    elif msg.round != r:
                        text = f"worker {wid}: sent round {msg.round} while coordinator is at round {r}"
                    else:
                        vectors.append(msg.as_vector())
                        continue
                    self._abort(conns, text)
                    raise ProtocolError(text)
                if done == self.K:
                    return self.rounds_completed
                if done:
                    text = f"{done} worker(s) finished while others contributed to round {r}"
                    self._abort(conns, text)
                    raise ProtocolError(text)
                result = WireMessage.vector(RESULT, r, fixed_order_sum(vectors))
                for conn in conns:
                    send_message(conn, result)
                self.rounds_completed += 1
        finally:
            for c in conns:
                c.close()
            self.server.close()


def coordinator_serve(listen_addr, K, dim, timeout=DEFAULT_TIMEOUT):
    return Coordinator(listen_addr, K, dim, timeout).serve()
