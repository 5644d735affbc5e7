"""Binary wire protocol between the localization client and server.

Frame layout (big-endian), over any reliable byte stream::

    u32   payload length (bytes; capped at 64 MiB)
    u8    message type
    16 B  session id
    ...   payload (message-type specific)

Big integers are serialized as a u16 byte count followed by the
minimal-length big-endian magnitude (zero encodes as zero bytes).
Ciphertext fields travel as raw ring elements; they are bound to the
session's public key, and range-checked, at the protocol layer.

The frame codec is a bijection on well-formed messages and total on
arbitrary input: any malformed byte string raises a typed
:class:`FrameDecodeError` subclass, never an unstructured exception.
"""

from __future__ import annotations

import enum
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import ClassVar, Optional

PROTOCOL_VERSION = 1
DEFAULT_PORT = 7451
MAX_PAYLOAD = 64 * 1024 * 1024
SESSION_ID_BYTES = 16

_HEADER = struct.Struct(">IB16s")
HEADER_BYTES = _HEADER.size


class MessageType(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    OBSERVATION = 3
    ROUND_REQUEST = 4
    ROUND_REPLY = 5
    POSITION = 6
    MUL_REQUEST = 7
    MUL_REPLY = 8
    ERROR = 15
    BYE = 16


class ErrorCode(enum.IntEnum):
    VERSION_MISMATCH = 1
    WEAK_KEY = 2
    BAD_SESSION = 3
    OUT_OF_ORDER = 4
    COUNT_MISMATCH = 5
    COST_OVERFLOW = 6
    MALFORMED = 7
    INTERNAL = 8


class FrameDecodeError(ValueError):
    """Base of all typed decode failures."""


class TruncatedFrameError(FrameDecodeError):
    pass


class OversizeFrameError(FrameDecodeError):
    pass


class UnknownTypeError(FrameDecodeError):
    pass


class MalformedPayloadError(FrameDecodeError):
    pass


class ConnectionClosedError(ConnectionError):
    """The peer closed the stream."""


class ProtocolError(RuntimeError):
    """Session-level violation (ordering, counts, key binding)."""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(message)
        self.code = code


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v: int) -> None:
        self.buf += struct.pack(">B", v)

    def u16(self, v: int) -> None:
        self.buf += struct.pack(">H", v)

    def u32(self, v: int) -> None:
        self.buf += struct.pack(">I", v)

    def u64(self, v: int) -> None:
        self.buf += struct.pack(">Q", v)

    def f64(self, v: float) -> None:
        self.buf += struct.pack(">d", v)

    def raw(self, data: bytes) -> None:
        self.buf += data

    def bigint(self, v: int) -> None:
        if v < 0:
            raise ValueError("wire big integers are non-negative")
        length = (int(v).bit_length() + 7) // 8
        if length > 0xFFFF:
            raise ValueError("big integer too large for the wire")
        self.u16(length)
        self.buf += int(v).to_bytes(length, "big")

    def text(self, s: str) -> None:
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ValueError("text too long for the wire")
        self.u16(len(data))
        self.buf += data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def _take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedFrameError("payload ends inside a field")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def bigint(self) -> int:
        length = self.u16()
        return int.from_bytes(self._take(length), "big")

    def text(self) -> str:
        length = self.u16()
        try:
            return self._take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayloadError(f"invalid utf-8 text field: {exc}") from exc

    def done(self) -> None:
        if self.off != len(self.data):
            raise MalformedPayloadError(
                f"{len(self.data) - self.off} trailing payload bytes"
            )


@dataclass
class Hello:
    """Client key material and fixed-point parameters."""

    msg_type: ClassVar[MessageType] = MessageType.HELLO
    version: int
    key_bits: int
    n: int
    h_n: int
    measurement_scale: int
    l_cost: int
    kappa: int

    def encode_payload(self, w: _Writer) -> None:
        w.u16(self.version)
        w.u32(self.key_bits)
        w.bigint(self.n)
        w.bigint(self.h_n)
        w.u64(self.measurement_scale)
        w.u8(self.l_cost)
        w.u8(self.kappa)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "Hello":
        return cls(
            version=r.u16(),
            key_bits=r.u32(),
            n=r.bigint(),
            h_n=r.bigint(),
            measurement_scale=r.u64(),
            l_cost=r.u8(),
            kappa=r.u8(),
        )


@dataclass
class StateInfo:
    x: float
    y: float
    room: int


@dataclass
class HelloAck:
    """Model commitment plus the public state-id -> coordinate/room map."""

    msg_type: ClassVar[MessageType] = MessageType.HELLO_ACK
    model_digest: bytes
    n_states: int
    n_aps: int
    max_pred: int
    t_max: int
    states: list[StateInfo] = field(default_factory=list)

    def encode_payload(self, w: _Writer) -> None:
        if len(self.model_digest) != 32:
            raise ValueError("model digest must be 32 bytes")
        if len(self.states) != self.n_states:
            raise ValueError("state map length disagrees with n_states")
        w.raw(self.model_digest)
        w.u32(self.n_states)
        w.u16(self.n_aps)
        w.u16(self.max_pred)
        w.u32(self.t_max)
        for s in self.states:
            w.f64(s.x)
            w.f64(s.y)
            w.u32(s.room)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "HelloAck":
        digest = r.raw(32)
        n_states = r.u32()
        n_aps = r.u16()
        max_pred = r.u16()
        t_max = r.u32()
        if n_states > MAX_PAYLOAD // 20:
            raise MalformedPayloadError("implausible state count")
        states = [StateInfo(r.f64(), r.f64(), r.u32()) for _ in range(n_states)]
        return cls(digest, n_states, n_aps, max_pred, t_max, states)


@dataclass
class ObservationMsg:
    """Encrypted measurement vector: D values and their D squares."""

    msg_type: ClassVar[MessageType] = MessageType.OBSERVATION
    t: int
    values: list[int]
    squares: list[int]

    def encode_payload(self, w: _Writer) -> None:
        if len(self.values) != len(self.squares):
            raise ValueError("value/square ciphertext counts differ")
        w.u32(self.t)
        w.u16(len(self.values))
        for v in self.values:
            w.bigint(v)
        for v in self.squares:
            w.bigint(v)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "ObservationMsg":
        t = r.u32()
        count = r.u16()
        values = [r.bigint() for _ in range(count)]
        squares = [r.bigint() for _ in range(count)]
        return cls(t, values, squares)


_FLAG_HAS_INDEX = 0x01


@dataclass
class WirePair:
    has_index: bool
    combined: int


@dataclass
class RoundRequest:
    """One batched tournament round: all pairs across all tournaments."""

    msg_type: ClassVar[MessageType] = MessageType.ROUND_REQUEST
    pairs: list[WirePair]

    def encode_payload(self, w: _Writer) -> None:
        w.u16(len(self.pairs))
        for pair in self.pairs:
            w.u8(_FLAG_HAS_INDEX if pair.has_index else 0)
            w.bigint(pair.combined)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "RoundRequest":
        count = r.u16()
        pairs = []
        for _ in range(count):
            flags = r.u8()
            if flags & ~_FLAG_HAS_INDEX:
                raise MalformedPayloadError(f"unknown pair flags {flags:#x}")
            pairs.append(WirePair(bool(flags & _FLAG_HAS_INDEX), r.bigint()))
        return cls(pairs)


@dataclass
class WireReply:
    chosen_flag: int
    blinded_value: int
    blinded_index: Optional[int] = None


@dataclass
class RoundReply:
    msg_type: ClassVar[MessageType] = MessageType.ROUND_REPLY
    replies: list[WireReply]

    def encode_payload(self, w: _Writer) -> None:
        w.u16(len(self.replies))
        for rep in self.replies:
            w.u8(_FLAG_HAS_INDEX if rep.blinded_index is not None else 0)
            w.bigint(rep.chosen_flag)
            w.bigint(rep.blinded_value)
            if rep.blinded_index is not None:
                w.bigint(rep.blinded_index)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "RoundReply":
        count = r.u16()
        replies = []
        for _ in range(count):
            flags = r.u8()
            if flags & ~_FLAG_HAS_INDEX:
                raise MalformedPayloadError(f"unknown reply flags {flags:#x}")
            chosen = r.bigint()
            value = r.bigint()
            index = r.bigint() if flags & _FLAG_HAS_INDEX else None
            replies.append(WireReply(chosen, value, index))
        return cls(replies)


@dataclass
class PositionMsg:
    msg_type: ClassVar[MessageType] = MessageType.POSITION
    t: int
    state: int

    def encode_payload(self, w: _Writer) -> None:
        w.u32(self.t)
        w.bigint(self.state)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "PositionMsg":
        return cls(r.u32(), r.bigint())


@dataclass
class MulRequest:
    msg_type: ClassVar[MessageType] = MessageType.MUL_REQUEST
    pairs: list[tuple[int, int]]

    def encode_payload(self, w: _Writer) -> None:
        w.u16(len(self.pairs))
        for cx, cy in self.pairs:
            w.bigint(cx)
            w.bigint(cy)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "MulRequest":
        count = r.u16()
        return cls([(r.bigint(), r.bigint()) for _ in range(count)])


@dataclass
class MulReply:
    msg_type: ClassVar[MessageType] = MessageType.MUL_REPLY
    products: list[int]

    def encode_payload(self, w: _Writer) -> None:
        w.u16(len(self.products))
        for v in self.products:
            w.bigint(v)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "MulReply":
        count = r.u16()
        return cls([r.bigint() for _ in range(count)])


@dataclass
class ErrorMsg:
    msg_type: ClassVar[MessageType] = MessageType.ERROR
    code: int
    text: str

    def encode_payload(self, w: _Writer) -> None:
        w.u16(self.code)
        w.text(self.text)

    @classmethod
    def decode_payload(cls, r: _Reader) -> "ErrorMsg":
        return cls(r.u16(), r.text())


@dataclass
class Bye:
    msg_type: ClassVar[MessageType] = MessageType.BYE

    def encode_payload(self, w: _Writer) -> None:
        pass

    @classmethod
    def decode_payload(cls, r: _Reader) -> "Bye":
        return cls()


Message = (
    Hello
    | HelloAck
    | ObservationMsg
    | RoundRequest
    | RoundReply
    | PositionMsg
    | MulRequest
    | MulReply
    | ErrorMsg
    | Bye
)

_MESSAGE_CLASSES = {
    cls.msg_type: cls
    for cls in (
        Hello,
        HelloAck,
        ObservationMsg,
        RoundRequest,
        RoundReply,
        PositionMsg,
        MulRequest,
        MulReply,
        ErrorMsg,
        Bye,
    )
}


def encode_frame(session_id: bytes, msg: Message) -> bytes:
    if len(session_id) != SESSION_ID_BYTES:
        raise ValueError(f"session id must be {SESSION_ID_BYTES} bytes")
    w = _Writer()
    msg.encode_payload(w)
    if len(w.buf) > MAX_PAYLOAD:
        raise ValueError("payload exceeds the frame size cap")
    return _HEADER.pack(len(w.buf), int(msg.msg_type), session_id) + bytes(w.buf)


def decode_payload(msg_type: int, payload: bytes) -> Message:
    cls = _MESSAGE_CLASSES.get(msg_type)
    if cls is None:
        raise UnknownTypeError(f"unknown message type {msg_type}")
    r = _Reader(payload)
    try:
        msg = cls.decode_payload(r)
        r.done()
    except FrameDecodeError:
        raise
    except Exception as exc:  # totality: surface anything else as typed
        raise MalformedPayloadError(f"payload decode failed: {exc}") from exc
    return msg


def decode_frame(data: bytes) -> tuple[bytes, Message]:
    """Decode one complete frame; total on arbitrary byte strings."""
    if len(data) < HEADER_BYTES:
        raise TruncatedFrameError("frame shorter than the fixed header")
    length, msg_type, session_id = _HEADER.unpack_from(data)
    if length > MAX_PAYLOAD:
        raise OversizeFrameError(f"declared payload of {length} bytes")
    if len(data) != HEADER_BYTES + length:
        raise TruncatedFrameError(
            f"frame has {len(data) - HEADER_BYTES} payload bytes, header says {length}"
        )
    return session_id, decode_payload(msg_type, data[HEADER_BYTES:])


@dataclass
class TrafficStats:
    """Exact transcript measurements for one session or localization step."""

    bytes_up: int = 0
    bytes_down: int = 0
    round_trips: int = 0
    cmp_ops: int = 0
    wall_time_s: float = 0.0


def measure_transcript(session) -> TrafficStats:
    """Aggregate traffic statistics of a client or server session object."""
    return session.traffic_stats()


class Transport:
    """Framed messaging over a connected socket, with byte counters and an
    optional injected per-message latency (simulating symmetric link delay).
    """

    def __init__(self, sock: socket.socket, latency_s: float = 0.0):
        self.sock = sock
        self.latency_s = latency_s
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.frames_received = 0

    def send(self, session_id: bytes, msg: Message) -> None:
        frame = encode_frame(session_id, msg)
        if self.latency_s > 0:
            time.sleep(self.latency_s)
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)
        self.frames_sent += 1

    def _recv_exact(self, n: int, *, at_boundary: bool) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                data = self.sock.recv(n - len(chunks))
            except (ConnectionResetError, BrokenPipeError) as exc:
                raise ConnectionClosedError(str(exc)) from exc
            if not data:
                if at_boundary and not chunks:
                    raise ConnectionClosedError("peer closed the connection")
                raise TruncatedFrameError("stream ended inside a frame")
            chunks += data
        return bytes(chunks)

    def recv(self) -> tuple[bytes, Message]:
        header = self._recv_exact(HEADER_BYTES, at_boundary=True)
        length, msg_type, session_id = _HEADER.unpack_from(header)
        if length > MAX_PAYLOAD:
            raise OversizeFrameError(f"declared payload of {length} bytes")
        payload = self._recv_exact(length, at_boundary=False) if length else b""
        self.bytes_received += HEADER_BYTES + length
        self.frames_received += 1
        return session_id, decode_payload(msg_type, payload)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
