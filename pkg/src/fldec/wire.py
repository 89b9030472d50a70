"""Length-prefixed TCP framing shared by the federation and task services.

Frame: ``[u32 BE payload length][u8 message type][payload]``.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 256 * 1024 * 1024


class MsgType(enum.IntEnum):
    HELLO = 0x01
    WELCOME = 0x02
    GLOBAL_WEIGHTS = 0x10
    CLIENT_WEIGHTS = 0x11
    DATA_SHARD = 0x20
    RELEASE = 0x30
    TASK_REQUEST = 0x40
    TASK_RESULT = 0x41
    ERROR = 0x7F


class ProtocolError(Exception):
    """Malformed frame or payload; the connection may still be usable."""


class ConnectionClosed(ConnectionError):
    """Peer went away, possibly in the middle of a frame."""


@dataclass(frozen=True)
class Frame:
    type: int
    payload: bytes

    @property
    def known(self) -> bool:
        return self.type in MsgType._value2member_map_


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds limit")
    return HEADER.pack(len(payload), int(msg_type)) + payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionClosed(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> Frame:
    length, mtype = HEADER.unpack(recv_exact(sock, HEADER.size))
    if length > MAX_PAYLOAD:
        raise ConnectionClosed(f"frame length {length} exceeds limit; stream is unrecoverable")
    return Frame(mtype, recv_exact(sock, length) if length else b"")


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> int:
    data = encode_frame(msg_type, payload)
    sock.sendall(data)
    return len(data)


def send_error(sock: socket.socket, text: str) -> None:
    try:
        send_frame(sock, MsgType.ERROR, text.encode("utf-8"))
    except OSError:
        pass


def parse_address(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def connect(addr, timeout: float | None = 30.0) -> socket.socket:
    sock = socket.create_connection(parse_address(addr), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


# ---------------------------------------------------------------- small payloads


def hello_payload(offloads: bool = False, name: str = "") -> bytes:
    """HELLO: ``[u8 flags][u8 name length][name]``; bit 0 announces a DATA_SHARD."""
    raw = name.encode("utf-8")
    if len(raw) > 255:
        raise ValueError("client name too long")
    return struct.pack(">BB", 1 if offloads else 0, len(raw)) + raw


def parse_hello(payload: bytes) -> tuple[bool, str]:
    if not payload:
        return False, ""
    if len(payload) < 2 or len(payload) != 2 + payload[1]:
        raise ProtocolError("malformed HELLO payload")
    return bool(payload[0] & 1), payload[2:].decode("utf-8")


def welcome_payload(client_id: int) -> bytes:
    return struct.pack(">I", client_id)


def parse_welcome(payload: bytes) -> int:
    if len(payload) != 4:
        raise ProtocolError("malformed WELCOME payload")
    return struct.unpack(">I", payload)[0]


def shard_payload(client_id: int, token: bytes) -> bytes:
    return struct.pack(">II", client_id, len(token)) + token


def parse_shard(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < 8:
        raise ProtocolError("DATA_SHARD payload too short")
    cid, n = struct.unpack(">II", payload[:8])
    if len(payload) != 8 + n:
        raise ProtocolError(f"DATA_SHARD declares {n} token bytes, carries {len(payload) - 8}")
    return cid, payload[8:]
