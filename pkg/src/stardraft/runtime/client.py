"""Target client: handshake, then request / verify rounds until done."""

from __future__ import annotations

import socket
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

from ..core import CategoricalModel, DecodeSession
from ..core.rng import session_rng
from .protocol import (
    MODE_PER_PORT,
    PROTOCOL_VERSION,
    Assign,
    Close,
    ConnectionClosed,
    Hello,
    Proposal,
    Reject,
    Request,
    read_message,
    send_message,
)


class ClientError(RuntimeError):
    pass


class Rejected(ClientError):
    def __init__(self, reason: int) -> None:
        super().__init__(f"server rejected with reason 0x{reason:02X}")
        self.reason = reason


class ProtocolError(ClientError):
    pass


@dataclass
class ClientConfig:
    target: CategoricalModel
    draft: CategoricalModel  # read-only copy; must match the server's fingerprint
    prompt: Sequence[int]
    d: int
    k: int
    max_tokens: int
    seed: int = 0
    host: str = "127.0.0.1"
    port: int = 0
    greedy: bool = False
    timeout: float = 30.0
    verify_time: float = 0.0  # emulated target compute per round, seconds
    request_delay: float = 0.0  # extra pause before every request after the first
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class ClientRound:
    seq: int
    sent: float
    received: float
    verified: float
    accept_len: int
    appended: int


@dataclass
class ClientResult:
    tag: int
    mode: int
    tokens: list[int]
    prompt_len: int
    accept_lengths: list[int]
    rounds: list[ClientRound] = field(default_factory=list)

    @property
    def generated(self) -> list[int]:
        return self.tokens[self.prompt_len :]

    @property
    def accepted_tokens(self) -> int:
        return sum(self.accept_lengths)

    @property
    def window(self) -> tuple[float, float]:
        """Monotonic span from the first request to the last verification."""
        return self.rounds[0].sent, self.rounds[-1].verified

    def to_dict(self) -> dict:
        out = asdict(self)
        out["generated"] = self.generated
        out["accepted_tokens"] = self.accepted_tokens
        return out


def handshake(host: str, port: int, fingerprint: int, timeout: float = 30.0,
              version: int = PROTOCOL_VERSION) -> tuple[Assign, socket.socket]:
    """Return the assignment and the socket to use for the session."""
    sock = socket.create_connection((host, port), timeout=timeout)
    try:
        send_message(sock, Hello(fingerprint, version))
        reply = read_message(sock)
    except BaseException:
        sock.close()
        raise
    if isinstance(reply, Reject):
        sock.close()
        raise Rejected(reply.reason)
    if not isinstance(reply, Assign):
        sock.close()
        raise ProtocolError(f"expected ASSIGN, got {type(reply).__name__}")
    if reply.mode == MODE_PER_PORT:
        sock.close()
        sock = socket.create_connection((host, reply.port), timeout=timeout)
    return reply, sock


def run_target(config: ClientConfig) -> ClientResult:
    assign, sock = handshake(config.host, config.port, config.draft.fingerprint(), config.timeout, config.version)
    tag = assign.tag
    session = DecodeSession(
        config.target, config.draft, config.prompt, config.d, config.k, config.max_tokens,
        session_rng(config.seed, tag, "target"), greedy=config.greedy,
    )
    result = ClientResult(tag, assign.mode, [], len(session.prompt), [])
    pending = list(session.prompt)
    seq = 1
    try:
        while not session.done:
            if config.request_delay and seq > 1:
                time.sleep(config.request_delay)
            sent = time.monotonic()
            send_message(sock, Request(tag, seq, tuple(pending)))
            try:
                reply = read_message(sock)
            except socket.timeout as exc:
                raise ClientError(f"tag {tag}: no proposal for seq {seq} within {config.timeout}s") from exc
            except ConnectionClosed as exc:
                raise ClientError(f"tag {tag}: server closed the session at seq {seq}") from exc
            received = time.monotonic()
            if isinstance(reply, Reject):
                raise Rejected(reply.reason)
            if not isinstance(reply, Proposal):
                raise ProtocolError(f"expected PROPOSAL, got {type(reply).__name__}")
            if reply.tag != tag or reply.seq != seq:
                raise ProtocolError(f"proposal (tag {reply.tag}, seq {reply.seq}) does not answer (tag {tag}, seq {seq})")
            if (reply.d, reply.k) != (config.d, config.k):
                raise ProtocolError(f"server drafts with d={reply.d}, k={reply.k}; client expects d={config.d}, k={config.k}")
            prefix = session.prefix
            tree = reply.to_tree(prefix[-1] if prefix else None)
            if config.verify_time:
                time.sleep(config.verify_time)
            outcome = session.verify(tree)
            pending = session.apply(outcome)
            result.rounds.append(ClientRound(seq, sent, received, time.monotonic(), outcome.accept_length, len(pending)))
            seq += 1
        send_message(sock, Close(tag))
    finally:
        sock.close()
    final = session.result()
    result.tokens = final.tokens
    result.accept_lengths = final.accept_lengths
    return result
