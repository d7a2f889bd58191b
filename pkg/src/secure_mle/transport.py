"""Message transports: a deterministic in-process bus and TCP sockets.

Both transports move only encoded bytes between nodes; every message is
serialized and parsed again on the in-process bus as well, so anything
that works there also survives the wire.

TCP frame: 4-byte big-endian payload length followed by the message's
binary encoding. A connection opens with a handshake frame carrying a
version byte, a role byte (0 central, 1 data node) and the sender name;
the server answers with a single status byte.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

from .errors import ConfigError, ProtocolAborted, TransportTimeout
from .mvn import ParameterSet
from .nodes import CENTRAL, CentralNode, DataNode
from .protocol.messages import WIRE_VERSION, Abort, ProtocolMessage, Transcript, root_eval_id

log = logging.getLogger(__name__)

ROLE_CENTRAL, ROLE_DATA = 0, 1
HANDSHAKE_OK, HANDSHAKE_REJECT = 0, 1
ABORT_ROUND = 999


@dataclass
class TransportConfig:
    kind: str = "in_process"
    endpoints: dict[str, tuple[str, int]] = field(default_factory=dict)
    timeout_ms: int = 30_000
    max_frame: int = 256 * 1024 * 1024
    max_messages: int = 1_000_000

    def __post_init__(self):
        if self.kind not in ("in_process", "tcp"):
            raise ConfigError(f"unknown transport kind {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ConfigError("transport timeout must be positive")
        if self.max_frame <= 0:
            raise ConfigError("max_frame must be positive")
        self.endpoints = {k: (str(h), int(p)) for k, (h, p) in self.endpoints.items()}
        fixed = [ep for ep in self.endpoints.values() if ep[1] != 0]
        if len(set(fixed)) != len(fixed):
            raise ConfigError("transport endpoints must be unique")

    @property
    def timeout(self) -> float:
        return self.timeout_ms / 1000.0


def _abort_messages(root: str, sender: str, receivers, code: int = 1) -> list[ProtocolMessage]:
    return [ProtocolMessage.build(root, ABORT_ROUND, sender, r, Abort(float(code))) for r in receivers]


class InProcessTransport:
    """Single-threaded FIFO scheduler; the transcript uses a logical clock."""

    kind = "in_process"

    def __init__(self, central: CentralNode, nodes: Mapping[str, DataNode], config: TransportConfig | None = None):
        self.central = central
        self.nodes = dict(nodes)
        self.config = config or TransportConfig()
        self.clock = 0

    def _node(self, name: str):
        return self.central if name == CENTRAL else self.nodes[name]

    def evaluate(self, params: ParameterSet, eval_id: str, mode: str | None = None,
                 transcript: Transcript | None = None) -> float:
        pending = deque(self.central.start(params, eval_id, mode))
        delivered = 0
        while pending:
            msg = pending.popleft()
            wire = ProtocolMessage.from_bytes(msg.to_bytes())
            self.clock += 1
            if transcript is not None:
                transcript.record(wire, float(self.clock))
            delivered += 1
            if delivered > self.config.max_messages:
                self._abort(eval_id)
                raise ProtocolAborted(f"evaluation {eval_id} exceeded {self.config.max_messages} messages")
            try:
                receiver = self._node(wire.receiver)
            except KeyError:
                self._abort(eval_id)
                raise ProtocolAborted(f"message {wire.msg_id} addressed to unknown node {wire.receiver!r}") from None
            try:
                pending.extend(receiver.handle(wire))
            except Exception as exc:
                self._abort(eval_id)
                raise ProtocolAborted(
                    f"{wire.receiver} failed on {wire.kind} in {wire.eval_id} round {wire.round}: {exc}"
                ) from exc
        return self.central.pop_result(eval_id)

    def _abort(self, eval_id: str) -> None:
        root = root_eval_id(eval_id)
        self.central.drop(root)
        for node in self.nodes.values():
            node.drop(root)

    def close(self) -> None:
        pass


# -- TCP ---------------------------------------------------------------------


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    while size:
        chunk = sock.recv(min(size, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, body: bytes, max_frame: int) -> None:
    if len(body) > max_frame:
        raise ValueError(f"frame of {len(body)} bytes exceeds max_frame={max_frame}")
    sock.sendall(struct.pack(">I", len(body)) + body)


def recv_frame(sock: socket.socket, max_frame: int) -> bytes:
    (size,) = struct.unpack(">I", _recv_exact(sock, 4))
    if size > max_frame:
        raise ValueError(f"incoming frame of {size} bytes exceeds max_frame={max_frame}")
    return _recv_exact(sock, size)


def handshake_frame(role: int, name: str) -> bytes:
    return struct.pack("<BB", WIRE_VERSION, role) + name.encode("utf-8")


def parse_handshake(body: bytes) -> tuple[int, int, str]:
    if len(body) < 3:
        raise ValueError("handshake too short")
    version, role = struct.unpack_from("<BB", body)
    return version, role, body[2:].decode("utf-8")


class TcpHost:
    """Runs one node behind a listening socket.

    Reader threads (one per inbound peer connection) decode frames into a
    single inbox; one worker thread feeds the node, so node logic stays
    single-threaded. Outbound connections are opened lazily per peer.
    """

    def __init__(self, node, endpoint: tuple[str, int] = ("127.0.0.1", 0), config: TransportConfig | None = None):
        self.node = node
        self.name = node.name
        self.config = config or TransportConfig(kind="tcp")
        self.role = ROLE_CENTRAL if self.name == CENTRAL else ROLE_DATA
        self.endpoints: dict[str, tuple[str, int]] = {}
        self.inbox: queue.Queue = queue.Queue()
        self.transcript = Transcript()
        self._tlock = threading.Lock()
        self._out: dict[str, socket.socket] = {}
        self._olock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._server = socket.create_server(endpoint)
        self._server.settimeout(0.2)
        self.endpoint = self._server.getsockname()[:2]
        self.on_error = None    # called as on_error(root_eval_id, reason)
        self.on_handled = None  # called with the root eval id after each inbound message

    def start(self) -> "TcpHost":
        for target in (self._accept_loop, self._work_loop):
            t = threading.Thread(target=target, name=f"{self.name}-{target.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _record(self, msg: ProtocolMessage) -> None:
        with self._tlock:
            self.transcript.record(msg, time.time())

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()

    def _read_loop(self, conn: socket.socket) -> None:
        mf = self.config.max_frame
        try:
            conn.settimeout(self.config.timeout)
            version, role, peer = parse_handshake(recv_frame(conn, mf))
            if version != WIRE_VERSION or role not in (ROLE_CENTRAL, ROLE_DATA):
                conn.sendall(bytes([HANDSHAKE_REJECT]))
                return
            conn.sendall(bytes([HANDSHAKE_OK]))
            conn.settimeout(None)
            while not self._stop.is_set():
                msg = ProtocolMessage.from_bytes(recv_frame(conn, mf))
                if msg.sender != peer:
                    log.warning("%s: message %s claims sender %s on %s's connection", self.name, msg.msg_id,
                                msg.sender, peer)
                    continue
                self._record(msg)
                self.inbox.put(msg)
        except (ConnectionError, OSError, ValueError) as exc:
            if not self._stop.is_set():
                log.debug("%s: connection closed: %s", self.name, exc)
        finally:
            conn.close()

    def _connect(self, peer: str) -> socket.socket:
        with self._olock:
            sock = self._out.get(peer)
            if sock is not None:
                return sock
            if peer not in self.endpoints:
                raise ConnectionError(f"no endpoint known for {peer!r}")
            sock = socket.create_connection(self.endpoints[peer], timeout=self.config.timeout)
            send_frame(sock, handshake_frame(self.role, self.name), self.config.max_frame)
            status = _recv_exact(sock, 1)[0]
            if status != HANDSHAKE_OK:
                sock.close()
                raise ConnectionError(f"{peer} rejected the handshake")
            self._out[peer] = sock
            return sock

    def send(self, msg: ProtocolMessage) -> None:
        sock = self._connect(msg.receiver)
        if self.role == ROLE_CENTRAL:
            self._record(msg)
        send_frame(sock, msg.to_bytes(), self.config.max_frame)

    def submit(self, item) -> None:
        """Queue a local command (a callable run on the worker thread)."""
        self.inbox.put(item)

    def _work_loop(self) -> None:
        while not self._stop.is_set():
            try:
                item = self.inbox.get(timeout=0.2)
            except queue.Empty:
                continue
            if item is None:
                break
            root = None
            try:
                if callable(item):
                    out = item()
                else:
                    root = root_eval_id(item.eval_id)
                    try:
                        out = self.node.handle(item)
                    finally:
                        if self.on_handled is not None:
                            self.on_handled(root)
                for m in out:
                    root = root_eval_id(m.eval_id)
                    self.send(m)
            except Exception as exc:
                reason = f"{self.name}: {exc}"
                log.warning("node failure: %s", reason)
                if root is not None:
                    self._fail(root, reason)

    def _fail(self, root: str, reason: str) -> None:
        try:
            self.node.drop(root)
        except Exception:
            pass
        if self.on_error is not None:
            self.on_error(root, reason)
        elif self.role == ROLE_DATA:
            try:
                for m in _abort_messages(root, self.name, [CENTRAL]):
                    self.send(m)
            except (ConnectionError, OSError, ValueError):
                log.warning("%s could not report the failure to the central node", self.name)

    def stop(self) -> None:
        self._stop.set()
        self.inbox.put(None)
        try:
            self._server.close()
        except OSError:
            pass
        with self._olock:
            for sock in self._out.values():
                try:
                    sock.close()
                except OSError:
                    pass
            self._out.clear()
        for t in self._threads:
            t.join(timeout=2)


class TcpTransport:
    """Central node behind TCP; data nodes are local hosts or remote daemons.

    Pass ``nodes`` to spin up loopback hosts for local data nodes; nodes with
    fixed endpoints in ``config.endpoints`` are contacted as remote daemons.
    """

    kind = "tcp"

    def __init__(self, central: CentralNode, nodes: Mapping[str, DataNode] | None = None,
                 config: TransportConfig | None = None):
        self.config = config or TransportConfig(kind="tcp")
        self.central = central
        self._done: dict[str, threading.Event] = {}
        self._errors: dict[str, str] = {}
        self._lock = threading.Lock()
        host_ep = self.config.endpoints.get(CENTRAL, ("127.0.0.1", 0))
        self.host = TcpHost(central, host_ep, self.config)
        self.host.on_error = self._on_error
        self.host.on_handled = self._watch
        self.local: dict[str, TcpHost] = {}
        for name, node in (nodes or {}).items():
            self.local[name] = TcpHost(node, self.config.endpoints.get(name, ("127.0.0.1", 0)), self.config)
        endpoints = dict(self.config.endpoints)
        endpoints[CENTRAL] = self.host.endpoint
        for name, h in self.local.items():
            endpoints[name] = h.endpoint
        missing = [nm for nm in central.layout.names if nm not in endpoints]
        if missing:
            self.close()
            raise ConfigError(f"no endpoint for data nodes {missing}")
        self.endpoints = endpoints
        for h in [self.host, *self.local.values()]:
            h.endpoints = endpoints
            h.start()

    def _on_error(self, root: str, reason: str) -> None:
        with self._lock:
            self._errors[root] = reason
            ev = self._done.get(root)
        if ev is not None:
            ev.set()

    def _watch(self, root: str) -> None:
        if root in self.central.results or root in self.central.failures:
            with self._lock:
                ev = self._done.get(root)
            if ev is not None:
                ev.set()

    def evaluate(self, params: ParameterSet, eval_id: str, mode: str | None = None,
                 transcript: Transcript | None = None) -> float:
        done = threading.Event()
        with self._lock:
            self._done[eval_id] = done
        try:
            self.host.submit(lambda: self.central.start(params, eval_id, mode))
            finished = done.wait(self.config.timeout)
        finally:
            with self._lock:
                self._done.pop(eval_id, None)
        last = self._last_round(eval_id)
        self._collect(eval_id, transcript)
        with self._lock:
            error = self._errors.pop(eval_id, None)
        if error is not None or eval_id in self.central.failures:
            self._broadcast_abort(eval_id)
            reason = error or self.central.failures.pop(eval_id)
            self.central.drop(eval_id)
            raise ProtocolAborted(reason)
        if not finished:
            self._broadcast_abort(eval_id)
            self.central.drop(eval_id)
            raise TransportTimeout(
                f"evaluation {eval_id} timed out after {self.config.timeout:g}s (last message seen: {last})"
            )
        return self.central.pop_result(eval_id)

    def _last_round(self, eval_id: str) -> str:
        with self.host._tlock:
            entries = [e for e in self.host.transcript._entries if root_eval_id(e.message.eval_id) == eval_id]
        if not entries:
            return "none"
        return max(entries, key=lambda e: e.sent_at).message.msg_id

    def _broadcast_abort(self, eval_id: str) -> None:
        for m in _abort_messages(eval_id, CENTRAL, self.central.layout.names):
            try:
                self.host.send(m)
            except (ConnectionError, OSError, ValueError):
                pass

    def _collect(self, eval_id: str, transcript: Transcript | None) -> None:
        """Move one evaluation's records out of the host logs, deduplicated by message id."""
        seen = set()
        for h in [self.host, *self.local.values()]:
            with h._tlock:
                entries = h.transcript.entries
                mine = [e for e in entries if root_eval_id(e.message.eval_id) == eval_id]
                h.transcript = Transcript(e for e in entries if root_eval_id(e.message.eval_id) != eval_id)
            for e in mine:
                if transcript is not None and e.message.msg_id not in seen and e.message.round != ABORT_ROUND:
                    seen.add(e.message.msg_id)
                    transcript.record(e.message, e.sent_at)

    def close(self) -> None:
        for h in [getattr(self, "host", None), *getattr(self, "local", {}).values()]:
            if h is not None:
                h.stop()


def serve_node(node: DataNode, endpoints: Mapping[str, tuple[str, int]], config: TransportConfig | None = None,
               stop: threading.Event | None = None) -> None:
    """Blocking data-node daemon used by the command line ``node`` subcommand."""
    config = config or TransportConfig(kind="tcp")
    host = TcpHost(node, endpoints[node.name], config)
    host.endpoints = dict(endpoints)
    host.start()
    log.info("node %s listening on %s:%d", node.name, *host.endpoint)
    stop = stop or threading.Event()
    try:
        while not stop.wait(0.5):
            pass
    finally:
        host.stop()


def make_transport(central: CentralNode, nodes: Mapping[str, DataNode] | None,
                   config: TransportConfig | None = None):
    config = config or TransportConfig()
    if config.kind == "tcp":
        return TcpTransport(central, nodes, config)
    if nodes is None or set(nodes) != set(central.layout.names):
        raise ConfigError("the in-process transport needs every data node locally")
    return InProcessTransport(central, nodes, config)
