"""Length-prefixed binary frames between draft server and target clients.

A frame is ``[length u32][type u8][payload]`` where ``length`` counts the
type byte plus the payload. Integers are little-endian, except the 8-byte
model fingerprint, which travels as raw digest bytes (most significant
first).
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import Union

from ..core import ROOT, DraftTree, TreeNode

FRAME_CAP = 1 << 20
PROTOCOL_VERSION = 1
ROOT_PARENT = 0xFFFF

HELLO = 0x01
ASSIGN = 0x02
REQUEST = 0x03
PROPOSAL = 0x04
CLOSE = 0x05
REJECT = 0x7F

MODE_PER_PORT = 0
MODE_MULTIPLEXED = 1

REJECT_FINGERPRINT = 0x01
REJECT_VERSION = 0x02
REJECT_UNKNOWN_TAG = 0x03
REJECT_PROTOCOL = 0x04  # malformed frame, bad seq, request out of turn

_LEN = struct.Struct("<I")


class FrameError(ValueError):
    """Bytes that do not form a valid frame."""


class ConnectionClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class Hello:
    fingerprint: int
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Assign:
    tag: int
    port: int
    mode: int = MODE_PER_PORT


@dataclass(frozen=True)
class Request:
    tag: int
    seq: int
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class Proposal:
    tag: int
    seq: int
    d: int
    k: int
    nodes: tuple[tuple[int, int], ...]  # (token, parent index or 0xFFFF)

    @classmethod
    def from_tree(cls, tag: int, seq: int, tree: DraftTree) -> "Proposal":
        nodes = tuple((n.token, ROOT_PARENT if n.parent == ROOT else n.parent) for n in tree.nodes)
        return cls(tag, seq, tree.depth, tree.branching, nodes)

    def to_tree(self, root_token: int | None = None) -> DraftTree:
        built: list[TreeNode] = []
        for token, parent in self.nodes:
            if parent == ROOT_PARENT:
                built.append(TreeNode(token, ROOT, 1))
            else:
                if parent >= len(built):
                    raise FrameError(f"node parent {parent} does not precede its child")
                built.append(TreeNode(token, parent, built[parent].level + 1))
        try:
            return DraftTree(self.d, self.k, tuple(built), root_token)
        except ValueError as exc:
            raise FrameError(f"invalid proposal tree: {exc}") from exc


@dataclass(frozen=True)
class Close:
    tag: int


@dataclass(frozen=True)
class Reject:
    reason: int


Message = Union[Hello, Assign, Request, Proposal, Close, Reject]


def encode_frame(ftype: int, payload: bytes) -> bytes:
    if not 0 <= ftype <= 0xFF:
        raise FrameError(f"frame type {ftype} does not fit in a byte")
    length = 1 + len(payload)
    if length > FRAME_CAP:
        raise FrameError(f"frame of {length} bytes exceeds cap {FRAME_CAP}")
    return _LEN.pack(length) + bytes((ftype,)) + payload


def decode_frame(data: bytes) -> tuple[int, bytes, int]:
    """Parse one frame from the front of ``data``; return (type, payload, bytes used)."""
    if len(data) < 4:
        raise FrameError("truncated length field")
    (length,) = _LEN.unpack_from(data)
    if length == 0:
        raise FrameError("zero-length frame has no type byte")
    if length > FRAME_CAP:
        raise FrameError(f"frame length {length} exceeds cap {FRAME_CAP}")
    if len(data) < 4 + length:
        raise FrameError(f"truncated frame: need {length} bytes, have {len(data) - 4}")
    return data[4], bytes(data[5 : 4 + length]), 4 + length


def _check(value: int, bits: int, name: str) -> int:
    if not 0 <= value < (1 << bits):
        raise FrameError(f"{name}={value} does not fit in {bits} bits")
    return value


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        _check(msg.fingerprint, 64, "fingerprint")
        _check(msg.version, 8, "version")
        return encode_frame(HELLO, msg.fingerprint.to_bytes(8, "big") + bytes((msg.version,)))
    if isinstance(msg, Assign):
        _check(msg.tag, 32, "tag")
        _check(msg.port, 16, "port")
        _check(msg.mode, 8, "mode")
        return encode_frame(ASSIGN, struct.pack("<IHB", msg.tag, msg.port, msg.mode))
    if isinstance(msg, Request):
        _check(msg.tag, 32, "tag")
        _check(msg.seq, 32, "seq")
        _check(len(msg.tokens), 16, "count")
        for t in msg.tokens:
            _check(t, 32, "token")
        body = struct.pack(f"<IIH{len(msg.tokens)}I", msg.tag, msg.seq, len(msg.tokens), *msg.tokens)
        return encode_frame(REQUEST, body)
    if isinstance(msg, Proposal):
        _check(msg.tag, 32, "tag")
        _check(msg.seq, 32, "seq")
        _check(msg.d, 8, "d")
        _check(msg.k, 8, "k")
        _check(len(msg.nodes), 16, "node_count")
        parts = [struct.pack("<IIBBH", msg.tag, msg.seq, msg.d, msg.k, len(msg.nodes))]
        for token, parent in msg.nodes:
            parts.append(struct.pack("<IH", _check(token, 32, "token"), _check(parent, 16, "parent")))
        return encode_frame(PROPOSAL, b"".join(parts))
    if isinstance(msg, Close):
        return encode_frame(CLOSE, struct.pack("<I", _check(msg.tag, 32, "tag")))
    if isinstance(msg, Reject):
        return encode_frame(REJECT, bytes((_check(msg.reason, 8, "reason"),)))
    raise FrameError(f"cannot encode {type(msg).__name__}")


def _exact(payload: bytes, size: int, name: str) -> None:
    if len(payload) != size:
        raise FrameError(f"{name} payload must be {size} bytes, got {len(payload)}")


def parse_payload(ftype: int, payload: bytes) -> Message:
    if ftype == HELLO:
        _exact(payload, 9, "HELLO")
        return Hello(int.from_bytes(payload[:8], "big"), payload[8])
    if ftype == ASSIGN:
        _exact(payload, 7, "ASSIGN")
        tag, port, mode = struct.unpack("<IHB", payload)
        if mode not in (MODE_PER_PORT, MODE_MULTIPLEXED):
            raise FrameError(f"unknown session mode {mode}")
        return Assign(tag, port, mode)
    if ftype == REQUEST:
        if len(payload) < 10:
            raise FrameError("REQUEST header truncated")
        tag, seq, count = struct.unpack_from("<IIH", payload)
        _exact(payload, 10 + 4 * count, "REQUEST")
        return Request(tag, seq, struct.unpack_from(f"<{count}I", payload, 10))
    if ftype == PROPOSAL:
        if len(payload) < 12:
            raise FrameError("PROPOSAL header truncated")
        tag, seq, d, k, count = struct.unpack_from("<IIBBH", payload)
        _exact(payload, 12 + 6 * count, "PROPOSAL")
        nodes = tuple(struct.iter_unpack("<IH", payload[12:]))
        for i, (_, parent) in enumerate(nodes):
            if parent != ROOT_PARENT and parent >= i:
                raise FrameError(f"node {i} has parent {parent} that does not precede it")
        return Proposal(tag, seq, d, k, nodes)
    if ftype == CLOSE:
        _exact(payload, 4, "CLOSE")
        return Close(struct.unpack("<I", payload)[0])
    if ftype == REJECT:
        _exact(payload, 1, "REJECT")
        return Reject(payload[0])
    raise FrameError(f"unknown frame type 0x{ftype:02X}")


def decode_message(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    ftype, payload, used = decode_frame(data)
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return parse_payload(ftype, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionClosed("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> Message:
    """Block for one frame; FrameError leaves the stream unusable."""
    head = _recv_exact(sock, 4)
    (length,) = _LEN.unpack(head)
    if length == 0 or length > FRAME_CAP:
        raise FrameError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    return parse_payload(body[0], body[1:])


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))
