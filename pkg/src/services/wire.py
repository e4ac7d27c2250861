"""Wire codec: canonical message bodies and length-prefixed framing.

A frame is a little-endian unsigned 32-bit body length followed by the body:
UTF-8 text in bracketed key/value notation with keys sorted and every real
rendered with 17 significant digits, so 64-bit floats survive the round trip
exactly and equal messages always encode to equal bytes.
"""

import json
import logging
import math
import socket
import struct
import threading
from pathlib import Path
from typing import Any, List, Optional

from pydantic import BaseModel, TypeAdapter, ValidationError

from config.settings import settings
from src.models.schemas import HelloMessage, Message

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<I")
HEADER_SIZE = HEADER.size
PROTOCOL_VERSION = settings.PROTOCOL_VERSION

_message_adapter = TypeAdapter(Message)


class FederationError(Exception):
    """Base exception for transport and protocol failures."""
    code = "federation-error"

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class MalformedFrameError(FederationError):
    code = "malformed-frame"


class OversizeFrameError(FederationError):
    code = "oversize"


class VersionMismatchError(FederationError):
    code = "version-mismatch"


class ConnectionClosedError(FederationError):
    code = "connection-closed"


class SessionAbortedError(FederationError):
    code = "aborted"


class RoundTimeoutError(FederationError):
    code = "timeout"


class RegistrationError(FederationError):
    code = "registration"


def _render(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"Cannot encode non-finite real {value}")
        return format(value, ".17g")
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_render(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(str(k), ensure_ascii=False)}:{_render(value[k])}" for k in sorted(value)) + "}"
    raise TypeError(f"Cannot encode value of type {type(value).__name__}")


def canonical_body(msg: BaseModel) -> bytes:
    """Canonical UTF-8 body of a message (no length prefix)."""
    return _render(msg.model_dump(mode="python")).encode("utf-8")


def encode_message(msg: BaseModel, max_bytes: Optional[int] = None) -> bytes:
    """Frame a message: length prefix plus canonical body.

    Raises:
        OversizeFrameError: If the body exceeds the frame cap
    """
    max_bytes = settings.MAX_FRAME_BYTES if max_bytes is None else max_bytes
    body = canonical_body(msg)
    if len(body) > max_bytes:
        raise OversizeFrameError(f"Message body of {len(body)} bytes exceeds the {max_bytes}-byte cap")
    return HEADER.pack(len(body)) + body


def _reject_constant(name: str):
    raise ValueError(f"Non-finite constant {name} is not allowed")


def _parse_real(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"Real {text} overflows")
    return value


def decode_body(body: bytes) -> Message:
    """Strictly parse a frame body into a message.

    Raises:
        MalformedFrameError: On invalid UTF-8, syntax, unknown keys or bad values
        VersionMismatchError: On a HELLO carrying another protocol version
    """
    try:
        obj = json.loads(body.decode("utf-8"), parse_constant=_reject_constant, parse_float=_parse_real)
    except (UnicodeDecodeError, ValueError, RecursionError) as e:
        raise MalformedFrameError(f"Frame body is not a valid message: {e}")
    if not isinstance(obj, dict) or "type" not in obj:
        raise MalformedFrameError("Frame body must be a keyed record with a type")
    if obj.get("type") == "HELLO" and isinstance(obj.get("protocol_version"), int) \
            and obj["protocol_version"] != PROTOCOL_VERSION:
        raise VersionMismatchError(
            f"Peer speaks protocol version {obj['protocol_version']}, expected {PROTOCOL_VERSION}"
        )
    try:
        return _message_adapter.validate_json(body, strict=True)
    except (ValidationError, RecursionError) as e:
        raise MalformedFrameError(f"Frame body does not match any message schema: {e}")


def decode_message(data: bytes, max_bytes: Optional[int] = None) -> Message:
    """Decode exactly one complete frame.

    Raises:
        MalformedFrameError: If the frame is truncated or has trailing bytes
        OversizeFrameError: If the declared length exceeds the cap
        VersionMismatchError: See decode_body
    """
    max_bytes = settings.MAX_FRAME_BYTES if max_bytes is None else max_bytes
    if len(data) < HEADER_SIZE:
        raise MalformedFrameError(f"Frame of {len(data)} bytes is shorter than its length prefix")
    (length,) = HEADER.unpack_from(data)
    if length > max_bytes:
        raise OversizeFrameError(f"Declared body length {length} exceeds the {max_bytes}-byte cap")
    if len(data) - HEADER_SIZE != length:
        raise MalformedFrameError(f"Length prefix says {length} bytes but {len(data) - HEADER_SIZE} follow")
    return decode_body(data[HEADER_SIZE:])


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, receive complete messages."""

    def __init__(self, max_bytes: Optional[int] = None):
        self.max_bytes = settings.MAX_FRAME_BYTES if max_bytes is None else max_bytes
        self._buffer = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buffer)

    def feed(self, chunk: bytes) -> List[Message]:
        self._buffer.extend(chunk)
        messages = []
        while len(self._buffer) >= HEADER_SIZE:
            (length,) = HEADER.unpack_from(self._buffer)
            if length > self.max_bytes:
                raise OversizeFrameError(f"Declared body length {length} exceeds the {self.max_bytes}-byte cap")
            if len(self._buffer) < HEADER_SIZE + length:
                break
            body = bytes(self._buffer[HEADER_SIZE:HEADER_SIZE + length])
            del self._buffer[:HEADER_SIZE + length]
            messages.append(decode_body(body))
        return messages

    def close(self) -> None:
        """Signal end of stream; a partial frame left behind is an error."""
        if self._buffer:
            raise MalformedFrameError(f"Stream closed with {len(self._buffer)} bytes of an unfinished frame")


def _recv_exactly(sock: socket.socket, length: int) -> bytes:
    chunks = []
    got = 0
    while got < length:
        chunk = sock.recv(min(length - got, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class FrameCapture:
    """Newline-delimited transcript of every frame body sent or received."""

    def __init__(self, path: Optional[str]):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def record(self, direction: str, peer: str, msg: BaseModel) -> None:
        if self.path is None:
            return
        line = _render({"direction": direction, "peer": peer, "message": msg.model_dump(mode="python")})
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")


class Channel:
    """A connected socket speaking framed messages, with optional capture."""

    def __init__(self, sock: socket.socket, peer: str, capture: Optional[FrameCapture] = None,
                 max_bytes: Optional[int] = None):
        self.sock = sock
        self.peer = peer
        self.capture = capture or FrameCapture(None)
        self.max_bytes = settings.MAX_FRAME_BYTES if max_bytes is None else max_bytes
        self.closed = False

    def send(self, msg: BaseModel) -> None:
        try:
            self.sock.sendall(encode_message(msg, self.max_bytes))
        except OSError as e:
            raise ConnectionClosedError(f"Sending to {self.peer} failed: {e}")
        self.capture.record("send", self.peer, msg)

    def receive(self, timeout: Optional[float] = None) -> Message:
        """Read one message.

        Raises:
            RoundTimeoutError: If nothing complete arrives within timeout seconds
            ConnectionClosedError: If the peer closed at a frame boundary
            MalformedFrameError: If the peer closed mid-frame or sent garbage
        """
        self.sock.settimeout(timeout)
        try:
            header = _recv_exactly(self.sock, HEADER_SIZE)
            if not header:
                raise ConnectionClosedError(f"{self.peer} closed the connection")
            if len(header) < HEADER_SIZE:
                raise MalformedFrameError(f"{self.peer} closed inside a length prefix")
            (length,) = HEADER.unpack(header)
            if length > self.max_bytes:
                raise OversizeFrameError(f"{self.peer} announced {length} bytes, cap is {self.max_bytes}")
            body = _recv_exactly(self.sock, length)
        except socket.timeout:
            raise RoundTimeoutError(f"No message from {self.peer} within {timeout} s")
        except (ConnectionResetError, BrokenPipeError) as e:
            raise ConnectionClosedError(f"Connection to {self.peer} lost: {e}")
        if len(body) < length:
            raise MalformedFrameError(f"{self.peer} closed after {len(body)} of {length} body bytes")
        msg = decode_body(body)
        self.capture.record("recv", self.peer, msg)
        return msg

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass


def hello_for(site_id: int, n_i: int, p: int) -> HelloMessage:
    return HelloMessage(site_id=site_id, n_i=n_i, p=p, protocol_version=PROTOCOL_VERSION)
