"""Socket runtime: one draft server, many target clients."""

from .client import ClientConfig, ClientError, ClientResult, ClientRound, ProtocolError, Rejected, handshake, run_target
from .protocol import (
    FRAME_CAP,
    PROTOCOL_VERSION,
    Assign,
    Close,
    FrameError,
    Hello,
    Proposal,
    Reject,
    Request,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
)
from .server import DraftServer, RoundLog, ServerConfig
from .session import SessionState, SessionStore, UnknownTag

__all__ = [
    "Assign",
    "ClientConfig",
    "ClientError",
    "ClientResult",
    "ClientRound",
    "Close",
    "DraftServer",
    "FRAME_CAP",
    "FrameError",
    "Hello",
    "PROTOCOL_VERSION",
    "Proposal",
    "ProtocolError",
    "Reject",
    "Rejected",
    "Request",
    "RoundLog",
    "ServerConfig",
    "SessionState",
    "SessionStore",
    "UnknownTag",
    "decode_frame",
    "decode_message",
    "encode_frame",
    "encode_message",
    "handshake",
    "run_target",
]
