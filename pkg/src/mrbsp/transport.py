"""Node-to-node message delivery.

Two implementations share one contract: ``send`` splits a payload into
chunks of at most ``max_chunk_bytes``, the receiving node reassembles them
and enqueues the message exactly once on its ``(node, channel)`` queue.
Delivery order is FIFO per ``(src, dst, channel)``.

Tcp frame layout (all integers big-endian)::

    u32 frame_len | u32 src | u32 dst | u16 channel | u8 has_phase
    [u64 phase] | u64 seq | u32 chunk_index | u32 chunk_total | payload
"""

import logging
import math
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .errors import (AddressError, ClosedError, DecodeError, RecvTimeout,
                     TransportError)

log = logging.getLogger(__name__)

DEFAULT_MAX_CHUNK = 60000
DEFAULT_REASSEMBLY_CAP = 256 * 1024 * 1024

_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">IIHB")
_PHASE = struct.Struct(">Q")
_TAIL = struct.Struct(">QII")


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    channel: int
    phase: Optional[int]
    seq: int
    chunk_index: int
    chunk_total: int
    payload: bytes = b""

    def __post_init__(self):
        if self.chunk_total < 1 or not 0 <= self.chunk_index < self.chunk_total:
            raise ValueError("chunk %d/%d out of range"
                             % (self.chunk_index, self.chunk_total))


@dataclass(frozen=True)
class TransportConfig:
    max_chunk_bytes: int = DEFAULT_MAX_CHUNK
    connect_timeout: float = 5.0
    endpoints: tuple = ()
    reassembly_cap: int = DEFAULT_REASSEMBLY_CAP

    def __post_init__(self):
        if self.max_chunk_bytes < 1:
            raise ValueError("max_chunk_bytes must be >= 1")


class Message(NamedTuple):
    src: int
    dst: int
    channel: int
    phase: Optional[int]
    seq: int
    payload: bytes


def wire_encode(env):
    has_phase = env.phase is not None
    parts = [_HEAD.pack(env.src, env.dst, env.channel, 1 if has_phase else 0)]
    if has_phase:
        parts.append(_PHASE.pack(env.phase))
    parts.append(_TAIL.pack(env.seq, env.chunk_index, env.chunk_total))
    parts.append(env.payload)
    body = b"".join(parts)
    return _LEN.pack(len(body)) + body


def wire_decode(data):
    """Decode exactly one frame (length prefix included)."""
    data = memoryview(data)
    if len(data) < _LEN.size:
        raise DecodeError("truncated frame: %d bytes" % len(data))
    (length,) = _LEN.unpack_from(data)
    if len(data) - _LEN.size != length:
        raise DecodeError("frame length %d but %d bytes follow"
                          % (length, len(data) - _LEN.size))
    return _decode_body(data[_LEN.size:])


def _decode_body(body):
    body = memoryview(body)
    if len(body) < _HEAD.size:
        raise DecodeError("truncated header")
    src, dst, channel, has_phase = _HEAD.unpack_from(body)
    pos = _HEAD.size
    if has_phase not in (0, 1):
        raise DecodeError("bad phase flag %d" % has_phase)
    phase = None
    if has_phase:
        if len(body) < pos + _PHASE.size:
            raise DecodeError("truncated phase field")
        (phase,) = _PHASE.unpack_from(body, pos)
        pos += _PHASE.size
    if len(body) < pos + _TAIL.size:
        raise DecodeError("truncated header")
    seq, index, total = _TAIL.unpack_from(body, pos)
    pos += _TAIL.size
    if total < 1 or index >= total:
        raise DecodeError("chunk_index %d >= chunk_total %d" % (index, total))
    return Envelope(src, dst, channel, phase, seq, index, total,
                    bytes(body[pos:]))


def chunk_count(payload_len, max_chunk_bytes):
    return max(1, math.ceil(payload_len / max_chunk_bytes))


def split_payload(payload, max_chunk_bytes):
    if not payload:
        return [b""]
    view = memoryview(payload)
    return [bytes(view[i:i + max_chunk_bytes])
            for i in range(0, len(payload), max_chunk_bytes)]


class Reassembler:
    """Collects chunks per ``(src, channel, seq)`` for one destination node."""

    def __init__(self, cap=DEFAULT_REASSEMBLY_CAP):
        self.cap = cap
        self.buffered = 0
        self._partial = {}

    def add(self, env):
        """Return the complete Message once its last chunk arrives, else None."""
        if env.chunk_total == 1:
            return Message(env.src, env.dst, env.channel, env.phase, env.seq,
                           env.payload)
        key = (env.src, env.channel, env.seq)
        entry = self._partial.get(key)
        if entry is None:
            entry = self._partial[key] = [env.chunk_total, {}]
        elif entry[0] != env.chunk_total:
            raise DecodeError("chunk_total changed within message %r" % (key,))
        parts = entry[1]
        if env.chunk_index in parts:
            raise DecodeError("duplicate chunk %d of %r" % (env.chunk_index, key))
        parts[env.chunk_index] = env.payload
        self.buffered += len(env.payload)
        if self.buffered > self.cap:
            raise TransportError("reassembly buffer exceeded %d bytes" % self.cap)
        if len(parts) < env.chunk_total:
            return None
        del self._partial[key]
        payload = b"".join(parts[i] for i in range(env.chunk_total))
        self.buffered -= len(payload)
        return Message(env.src, env.dst, env.channel, env.phase, env.seq, payload)

    def pending(self):
        return len(self._partial)


_CLOSED = object()


class Transport:
    """Shared queueing and sequencing; subclasses move the envelopes."""

    def __init__(self, n_nodes, config=None):
        if n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        self.n_nodes = n_nodes
        self.config = config or TransportConfig()
        self._lock = threading.Lock()
        self._queues = {}
        self._seq = {}
        self._pair_locks = {}
        self._reassemblers = [Reassembler(self.config.reassembly_cap)
                              for _ in range(n_nodes)]
        self._rlocks = [threading.Lock() for _ in range(n_nodes)]
        self._closed = False
        self._failure = None
        self.chunks_sent = 0

    def start(self):
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def _queue(self, node, channel):
        key = (node, channel)
        q = self._queues.get(key)
        if q is None:
            with self._lock:
                q = self._queues.get(key)
                if q is None:
                    q = self._queues[key] = queue.Queue()
                    if self._closed or self._failure is not None:
                        q.put(_CLOSED)
        return q

    def _pair_lock(self, key):
        lock = self._pair_locks.get(key)
        if lock is None:
            with self._lock:
                lock = self._pair_locks.setdefault(key, threading.Lock())
        return lock

    def _check_node(self, node):
        if not isinstance(node, int) or not 0 <= node < self.n_nodes:
            raise AddressError("unknown node %r (cluster has %d)"
                               % (node, self.n_nodes))

    def _check_open(self):
        if self._failure is not None:
            raise self._failure
        if self._closed:
            raise ClosedError("transport closed")

    def _envelopes(self, src, dst, channel, phase, payload):
        # caller holds the pair lock
        key = (src, dst, channel)
        seq = self._seq.get(key, 0)
        self._seq[key] = seq + 1
        chunks = split_payload(payload, self.config.max_chunk_bytes)
        total = len(chunks)
        return seq, [Envelope(src, dst, channel, phase, seq, i, total, c)
                     for i, c in enumerate(chunks)]

    def _arrive(self, env):
        with self._rlocks[env.dst]:
            msg = self._reassemblers[env.dst].add(env)
            if msg is not None:
                self._queue(env.dst, env.channel).put(msg)

    def send(self, src, dst, channel, payload, phase=None):
        """Queue ``payload`` for ``dst``; returns the message sequence number."""
        raise NotImplementedError

    def recv(self, node, channel, timeout=None):
        self._check_node(node)
        if self._failure is not None:
            raise self._failure
        q = self._queue(node, channel)
        try:
            item = q.get(timeout=timeout)
        except queue.Empty:
            raise RecvTimeout("no message for n%d on channel %d within %ss"
                              % (node, channel, timeout)) from None
        if item is _CLOSED:
            q.put(_CLOSED)
            if self._failure is not None:
                raise self._failure
            raise ClosedError("transport closed")
        return item

    def _fail(self, exc):
        if self._failure is None:
            log.error("transport failure: %s", exc)
            self._failure = exc
        self._wake_all()

    def _wake_all(self):
        with self._lock:
            queues = list(self._queues.values())
        for q in queues:
            q.put(_CLOSED)

    @property
    def failure(self):
        return self._failure

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._wake_all()


class InProcessTransport(Transport):
    """Chunked delivery between nodes hosted in one process."""

    def send(self, src, dst, channel, payload, phase=None):
        self._check_node(src)
        self._check_node(dst)
        self._check_open()
        with self._pair_lock((src, dst, channel)):
            seq, envs = self._envelopes(src, dst, channel, phase, payload)
            try:
                for env in envs:
                    self._arrive(env)
            except TransportError as exc:
                self._fail(exc)
                raise
            self.chunks_sent += len(envs)
        return seq


def _recv_exact(sock, size):
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            if buf:
                raise DecodeError("connection closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock):
    """Read one length-prefixed frame body; None on clean EOF."""
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    body = _recv_exact(sock, length)
    if body is None:
        raise DecodeError("connection closed after frame header")
    return body


def _split_endpoint(text):
    host, _, port = text.rpartition(":")
    if not host:
        raise ValueError("endpoint %r is not ip:port" % text)
    return host, int(port)


class TcpTransport(Transport):
    """Every node listens on its own ``ip:port``; one connection per node pair.

    With no endpoints configured each node binds an ephemeral loopback port.
    """

    def __init__(self, n_nodes, config=None):
        super().__init__(n_nodes, config)
        eps = tuple(self.config.endpoints)
        if eps and len(eps) != n_nodes:
            raise ValueError("%d endpoints for %d nodes" % (len(eps), n_nodes))
        self._wanted = [_split_endpoint(e) for e in eps] or \
            [("127.0.0.1", 0)] * n_nodes
        self.endpoints = []
        self._listeners = []
        self._conns = {}
        self._accepted = []
        self._threads = []

    def start(self):
        for node, addr in enumerate(self._wanted):
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind(addr)
            srv.listen(self.n_nodes + 4)
            host, port = srv.getsockname()[:2]
            self.endpoints.append("%s:%d" % (host, port))
            self._listeners.append(srv)
            self._spawn(self._accept_loop, srv, node, "accept-n%d" % node)
        return self

    def _spawn(self, target, *args):
        name = args[-1]
        t = threading.Thread(target=target, args=args[:-1], name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, srv, node):
        while not self._closed:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._accepted.append(conn)
            self._spawn(self._read_loop, conn, node, "read-n%d" % node)

    def _read_loop(self, conn, node):
        try:
            while True:
                body = read_frame(conn)
                if body is None:
                    break
                env = _decode_body(body)
                if env.dst != node:
                    raise DecodeError("frame for n%d arrived at n%d"
                                      % (env.dst, node))
                self._arrive(env)
        except (OSError, TransportError) as exc:
            if not self._closed:
                self._fail(exc if isinstance(exc, TransportError)
                           else TransportError("connection to n%d lost: %s"
                                               % (node, exc)))
            return
        if not self._closed:
            self._fail(TransportError("peer closed connection to n%d" % node))

    def _connection(self, src, dst):
        # caller holds the (src, dst) lock
        conn = self._conns.get((src, dst))
        if conn is None:
            host, port = _split_endpoint(self.endpoints[dst])
            try:
                conn = socket.create_connection(
                    (host, port), timeout=self.config.connect_timeout)
            except OSError as exc:
                raise TransportError("cannot reach n%d at %s: %s"
                                     % (dst, self.endpoints[dst], exc)) from exc
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns[(src, dst)] = conn
        return conn

    def send(self, src, dst, channel, payload, phase=None):
        self._check_node(src)
        self._check_node(dst)
        self._check_open()
        with self._pair_lock((src, dst)):
            seq, envs = self._envelopes(src, dst, channel, phase, payload)
            frames = b"".join(wire_encode(e) for e in envs)
            try:
                self._connection(src, dst).sendall(frames)
            except OSError as exc:
                err = TransportError("send n%d->n%d failed: %s" % (src, dst, exc))
                self._fail(err)
                raise err from exc
            self.chunks_sent += len(envs)
        return seq

    def sever(self, src, dst):
        """Drop the src->dst connection abruptly (fault injection)."""
        with self._pair_lock((src, dst)):
            conn = self._conns.pop((src, dst), None)
        if conn is not None:
            conn.shutdown(socket.SHUT_RDWR)
            conn.close()

    def close(self):
        if self._closed:
            return
        super().close()
        for s in list(self._listeners) + list(self._conns.values()) + self._accepted:
            try:
                s.close()
            except OSError:
                pass


def make_transport(kind, n_nodes, config=None):
    from .core import TransportKind
    cls = TcpTransport if kind is TransportKind.TCP else InProcessTransport
    return cls(n_nodes, config).start()
