"""Draft server: handshake, receivers, one inference loop, one sender.

Receivers append requests to ``q_in``; the inference loop pops them FIFO,
advances the tag's session, drafts a tree and hands the encoded proposal to
``q_out``; the sender writes it to the owning connection. The inference
loop never touches a socket.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import asdict, dataclass, field

from ..core import CategoricalModel, build_draft_tree
from ..core.rng import session_rng
from .protocol import (
    MODE_MULTIPLEXED,
    MODE_PER_PORT,
    PROTOCOL_VERSION,
    REJECT_FINGERPRINT,
    REJECT_PROTOCOL,
    REJECT_UNKNOWN_TAG,
    REJECT_VERSION,
    Assign,
    Close,
    ConnectionClosed,
    FrameError,
    Hello,
    Proposal,
    Reject,
    Request,
    encode_message,
    read_message,
    send_message,
)
from .session import SessionStore, UnknownTag

logger = logging.getLogger(__name__)

POLICIES = ("fifo",)


@dataclass
class ServerConfig:
    draft: CategoricalModel
    d: int
    k: int
    seed: int = 0
    host: str = "127.0.0.1"
    port: int = 0
    mode: str = "per-port"  # or "multiplexed"
    layer_time: float = 0.0  # emulated draft time per tree level, seconds
    grace: float = 30.0  # dead sessions are released after this long
    policy: str = "fifo"
    handshake_timeout: float = 10.0

    def __post_init__(self) -> None:
        if self.mode not in ("per-port", "multiplexed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown scheduling policy {self.policy!r}")
        if not 1 <= self.d <= 255 or not 1 <= self.k <= min(255, self.draft.vocab_size):
            raise ValueError("d must be in 1..255 and k in 1..min(255, vocab)")
        if sum(self.k**j for j in range(1, self.d + 1)) >= 0xFFFF:
            raise ValueError("draft tree too large for one proposal frame")


@dataclass(frozen=True)
class RoundLog:
    tag: int
    seq: int
    new_tokens: int
    enqueue: float
    start: float
    end: float
    idle_before: float
    wait: float
    backlog_at_end: int  # requests still buffered when this round finished

    @property
    def service(self) -> float:
        return self.end - self.start


@dataclass
class _Conn:
    sock: socket.socket
    tag: int
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_seq: int = 0
    outstanding: bool = False
    closed: bool = False


class DraftServer:
    def __init__(self, config: ServerConfig) -> None:
        self.config = config
        self.store = SessionStore(config.draft)
        self.q_in: queue.Queue = queue.Queue()
        self.q_out: queue.Queue = queue.Queue()
        self.logs: list[RoundLog] = []
        self.assigned: list[tuple[int, int]] = []  # (tag, port)
        self.released: list[tuple[int, float]] = []
        self.rejected: list[int] = []
        self.errors: list[str] = []
        self._pending = 0
        self._pending_lock = threading.Lock()
        self._doomed: dict[int, float] = {}  # tag -> release deadline
        self._doomed_lock = threading.Lock()
        self._conns: list[_Conn] = []
        self._running = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener: socket.socket | None = None
        self.fingerprint = config.draft.fingerprint()
        self.started_at = 0.0

    # lifecycle

    @property
    def port(self) -> int:
        assert self._listener is not None
        return self._listener.getsockname()[1]

    def start(self) -> "DraftServer":
        lst = socket.create_server((self.config.host, self.config.port))
        lst.settimeout(0.2)
        self._listener = lst
        self._running.set()
        self.started_at = time.monotonic()
        for name, target in (
            ("acceptor", self._accept_loop),
            ("inference", self._inference_loop),
            ("sender", self._send_loop),
            ("reaper", self._reap_loop),
        ):
            t = threading.Thread(target=target, name=f"draft-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        if not self._running.is_set():
            return
        self._running.clear()
        self.q_in.put(None)
        self.q_out.put(None)
        for t in self._threads:
            t.join(timeout=5)
        if self._listener is not None:
            self._listener.close()
        for conn in list(self._conns):
            self._close(conn)

    def __enter__(self) -> "DraftServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # handshake

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while self._running.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                self._handshake(sock)
            except (OSError, FrameError, ConnectionClosed) as exc:
                logger.info("handshake failed: %s", exc)
                sock.close()

    def _handshake(self, sock: socket.socket) -> None:
        sock.settimeout(self.config.handshake_timeout)
        try:
            hello = read_message(sock)
        except FrameError:
            self._reject(sock, REJECT_PROTOCOL)
            return
        if not isinstance(hello, Hello):
            self._reject(sock, REJECT_PROTOCOL)
            return
        if hello.version != PROTOCOL_VERSION:
            self._reject(sock, REJECT_VERSION)
            return
        if hello.fingerprint != self.fingerprint:
            self._reject(sock, REJECT_FINGERPRINT)
            return
        tag = self.store.next_tag()
        # the session exists before the client can send its first request
        self.q_in.put(("init", tag))
        private = None
        if self.config.mode == "per-port":
            try:
                private = socket.create_server((self.config.host, 0))
            except OSError as exc:
                logger.warning("private listener refused (%s); multiplexing tag %d", exc, tag)
        if private is None:
            send_message(sock, Assign(tag, self.port, MODE_MULTIPLEXED))
            self.assigned.append((tag, self.port))
            self._start_receiver(sock, tag)
            return
        port = private.getsockname()[1]
        send_message(sock, Assign(tag, port, MODE_PER_PORT))
        self.assigned.append((tag, port))
        sock.close()
        t = threading.Thread(target=self._accept_private, args=(private, tag), name=f"draft-port-{tag}", daemon=True)
        t.start()

    def _accept_private(self, private: socket.socket, tag: int) -> None:
        private.settimeout(self.config.handshake_timeout)
        try:
            sock, _ = private.accept()
        except OSError:
            logger.warning("tag %d never connected to its port", tag)
            self._doom(tag)
            return
        finally:
            private.close()
        self._start_receiver(sock, tag)

    def _reject(self, sock: socket.socket, reason: int) -> None:
        self.rejected.append(reason)
        try:
            send_message(sock, Reject(reason))
        finally:
            sock.close()

    # receivers

    def _start_receiver(self, sock: socket.socket, tag: int) -> None:
        sock.settimeout(None)
        conn = _Conn(sock, tag)
        self._conns.append(conn)
        threading.Thread(target=self._receive_loop, args=(conn,), name=f"draft-recv-{tag}", daemon=True).start()

    def _receive_loop(self, conn: _Conn) -> None:
        while self._running.is_set():
            try:
                msg = read_message(conn.sock)
            except FrameError as exc:
                self._protocol_error(conn, f"malformed frame: {exc}")
                return
            except (ConnectionClosed, OSError):
                if not conn.closed:
                    self._doom(conn.tag)
                    conn.closed = True
                return
            if isinstance(msg, Request):
                if msg.tag != conn.tag:
                    self.q_out.put((conn, encode_message(Reject(REJECT_UNKNOWN_TAG)), False, False))
                    continue
                with conn.lock:
                    bad = msg.seq <= conn.last_seq or conn.outstanding
                    if not bad:
                        conn.last_seq = msg.seq
                        conn.outstanding = True
                if bad:
                    self._protocol_error(conn, f"tag {conn.tag}: request seq {msg.seq} out of turn")
                    return
                self.q_in.put(("req", conn, msg, time.monotonic()))
                with self._pending_lock:
                    self._pending += 1
            elif isinstance(msg, Close):
                if msg.tag != conn.tag:
                    self.q_out.put((conn, encode_message(Reject(REJECT_UNKNOWN_TAG)), False, False))
                    continue
                conn.closed = True
                self.q_in.put(("release", conn.tag))
            else:
                self._protocol_error(conn, f"unexpected {type(msg).__name__} on session channel")
                return

    def _protocol_error(self, conn: _Conn, why: str) -> None:
        logger.info("tag %d: %s", conn.tag, why)
        self.errors.append(why)
        self._doom(conn.tag)
        self.q_out.put((conn, encode_message(Reject(REJECT_PROTOCOL)), True, False))

    def _doom(self, tag: int) -> None:
        with self._doomed_lock:
            self._doomed.setdefault(tag, time.monotonic() + self.config.grace)

    def _reap_loop(self) -> None:
        while self._running.is_set():
            now = time.monotonic()
            with self._doomed_lock:
                due = [t for t, deadline in self._doomed.items() if deadline <= now]
                for t in due:
                    del self._doomed[t]
            for t in due:
                self.q_in.put(("release", t))
            time.sleep(min(0.05, max(self.config.grace / 4, 0.001)))

    # inference

    def _inference_loop(self) -> None:
        cfg = self.config
        last_end: float | None = None
        blocked = False
        while True:
            try:
                item = self.q_in.get_nowait()
            except queue.Empty:
                blocked = True
                item = self.q_in.get()
            if item is None:
                break
            kind = item[0]
            if kind == "init":
                self.store.init(item[1], rng=session_rng(cfg.seed, item[1], "draft"))
                continue
            if kind == "release":
                if item[1] in self.store:
                    self.store.release(item[1])
                    self.released.append((item[1], time.monotonic()))
                continue
            _, conn, req, enqueued = item
            with self._pending_lock:
                self._pending -= 1
            start = time.monotonic()
            idle = start - last_end if blocked and last_end is not None else 0.0
            blocked = False
            try:
                state = self.store.lookup(req.tag)
            except UnknownTag:
                self.q_out.put((conn, encode_message(Reject(REJECT_UNKNOWN_TAG)), False, True))
                continue
            self.store.update(req.tag, req.tokens)
            state.last_seq = req.seq
            if cfg.layer_time:
                time.sleep(cfg.layer_time * cfg.d)
            tree = build_draft_tree(cfg.draft, state.cursor, cfg.d, cfg.k, state.rng)
            frame = encode_message(Proposal.from_tree(req.tag, req.seq, tree))
            end = time.monotonic()
            with self._pending_lock:
                backlog = max(self._pending, 0)
            self.logs.append(RoundLog(req.tag, req.seq, len(req.tokens), enqueued, start, end, idle, start - enqueued, backlog))
            last_end = end
            self.q_out.put((conn, frame, False, True))

    # sender

    def _send_loop(self) -> None:
        while True:
            item = self.q_out.get()
            if item is None:
                break
            conn, data, close_after, answers_request = item
            if answers_request:
                # cleared before the write so the client's next request is never early
                with conn.lock:
                    conn.outstanding = False
            try:
                conn.sock.sendall(data)
            except OSError:
                self._doom(conn.tag)
                close_after = True
            if close_after:
                self._close(conn)

    def _close(self, conn: _Conn) -> None:
        conn.closed = True
        try:
            conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        conn.sock.close()

    # reporting

    def work_conservation_violations(self) -> list[str]:
        out = []
        for prev, cur in zip(self.logs, self.logs[1:]):
            if cur.idle_before > 0 and prev.backlog_at_end > 0:
                out.append(f"tag {cur.tag} seq {cur.seq}: idle {cur.idle_before} after backlog {prev.backlog_at_end}")
        return out

    def metrics(self) -> dict:
        return {
            "rounds": len(self.logs),
            "assigned": [list(a) for a in self.assigned],
            "released": [t for t, _ in self.released],
            "rejected": list(self.rejected),
            "errors": list(self.errors),
            "logs": [asdict(r) for r in self.logs],
            "work_conservation_violations": self.work_conservation_violations(),
        }
