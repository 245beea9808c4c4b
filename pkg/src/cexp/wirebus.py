"""Binary envelope codec and message vocabulary for the module bus.

Every datagram is a 28-byte little-endian header followed by a typed
payload. The header layout is normative and bit-exact:

    magic        4 bytes   ASCII "CEXP"
    version      u8        1
    msg_type     u8        see the message table
    flags        u16       reserved, must be 0
    sender_id    u32
    seq          u32       monotonically increasing per sender
    timestamp_us u64       microseconds since the Unix epoch
    payload_len  u32       <= 60000

Strings inside payloads are u16-length-prefixed UTF-8. The decoder is
total: any byte blob yields either a decoded message or a categorized
error, never a crash.

Two transports are provided: an in-memory loopback hub (exactly-once,
publish-order delivery; the deterministic test substrate) and a real
UDP-multicast endpoint (best-effort, for multi-node desks).
"""

from __future__ import annotations

import socket
import struct
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Iterable, Optional, Union

MAGIC = b"CEXP"
VERSION = 1
HEADER = struct.Struct("<4sBBHIIQI")
HEADER_LEN = HEADER.size  # 28
MAX_PAYLOAD = 60_000  # one UDP datagram with margin

DEFAULT_GROUP = "239.255.77.1"
DEFAULT_PORT = 7700


class BusError(Exception):
    pass


class PayloadTooLarge(BusError):
    pass


class TransportClosed(BusError):
    pass


class SocketError(BusError):
    pass


class DecodeError(BusError):
    """Base for every decode failure category."""


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


class MsgType(IntEnum):
    SENSOR_FRAME = 0x01
    MODULE_OUTPUT = 0x02
    RESOURCE_REPORT = 0x03
    COMMAND = 0x04
    HEARTBEAT = 0x05
    RESULT_CHUNK = 0x06


class CommandKind(IntEnum):
    DEGRADE = 1
    STOP = 2


@dataclass(frozen=True)
class SensorFrame:
    frame_id: int
    ground_truth_count: int
    pixels_digest: bytes  # exactly 32 bytes

    MSG_TYPE = MsgType.SENSOR_FRAME


@dataclass(frozen=True)
class ModuleOutput:
    frame_id: int
    variant_id: str
    detected_count: int
    latency_us: int

    MSG_TYPE = MsgType.MODULE_OUTPUT


@dataclass(frozen=True)
class ResourceReport:
    variant_id: str
    cpu_pct: float
    mem_mb: float

    MSG_TYPE = MsgType.RESOURCE_REPORT


@dataclass(frozen=True)
class Command:
    target_variant_id: str
    command: CommandKind
    degrade_level: int

    MSG_TYPE = MsgType.COMMAND


@dataclass(frozen=True)
class Heartbeat:
    node_id: int
    uptime_s: int

    MSG_TYPE = MsgType.HEARTBEAT


@dataclass(frozen=True)
class ResultChunk:
    experiment_id: str
    chunk_index: int
    total_chunks: int
    data: bytes

    MSG_TYPE = MsgType.RESULT_CHUNK


Message = Union[SensorFrame, ModuleOutput, ResourceReport, Command, Heartbeat, ResultChunk]


@dataclass(frozen=True)
class Envelope:
    """Header metadata of a decoded datagram."""

    msg_type: MsgType
    sender_id: int
    seq: int
    timestamp_us: int
    payload_len: int


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise PayloadTooLarge(f"string field of {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    """Cursor over a payload; every short read is a MalformedPayload."""

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MalformedPayload(f"payload short by {self.pos + n - len(self.buf)} bytes")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def take_str(self) -> str:
        (length,) = self.unpack("<H")
        raw = self.take(length)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"invalid UTF-8 in string field: {exc}") from exc

    def rest(self) -> bytes:
        out = self.buf[self.pos :]
        self.pos = len(self.buf)
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} trailing payload bytes")


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, SensorFrame):
        if len(msg.pixels_digest) != 32:
            raise MalformedPayload("pixels_digest must be exactly 32 bytes")
        return struct.pack("<QH32s", msg.frame_id, msg.ground_truth_count, msg.pixels_digest)
    if isinstance(msg, ModuleOutput):
        return (
            struct.pack("<Q", msg.frame_id)
            + _pack_str(msg.variant_id)
            + struct.pack("<HI", msg.detected_count, msg.latency_us)
        )
    if isinstance(msg, ResourceReport):
        return _pack_str(msg.variant_id) + struct.pack("<dd", msg.cpu_pct, msg.mem_mb)
    if isinstance(msg, Command):
        return _pack_str(msg.target_variant_id) + struct.pack(
            "<BB", int(msg.command), msg.degrade_level
        )
    if isinstance(msg, Heartbeat):
        return struct.pack("<IQ", msg.node_id, msg.uptime_s)
    if isinstance(msg, ResultChunk):
        return (
            _pack_str(msg.experiment_id)
            + struct.pack("<II", msg.chunk_index, msg.total_chunks)
            + msg.data
        )
    raise TypeError(f"not a bus message: {type(msg).__name__}")


def _decode_payload(msg_type: MsgType, payload: bytes) -> Message:
    r = _Reader(payload)
    msg: Message
    if msg_type is MsgType.SENSOR_FRAME:
        frame_id, count = r.unpack("<QH")
        digest = r.take(32)
        msg = SensorFrame(frame_id=frame_id, ground_truth_count=count, pixels_digest=digest)
    elif msg_type is MsgType.MODULE_OUTPUT:
        (frame_id,) = r.unpack("<Q")
        variant_id = r.take_str()
        detected, latency = r.unpack("<HI")
        msg = ModuleOutput(
            frame_id=frame_id, variant_id=variant_id, detected_count=detected, latency_us=latency
        )
    elif msg_type is MsgType.RESOURCE_REPORT:
        variant_id = r.take_str()
        cpu, mem = r.unpack("<dd")
        msg = ResourceReport(variant_id=variant_id, cpu_pct=cpu, mem_mb=mem)
    elif msg_type is MsgType.COMMAND:
        target = r.take_str()
        kind_raw, level = r.unpack("<BB")
        try:
            kind = CommandKind(kind_raw)
        except ValueError:
            raise MalformedPayload(f"unknown command value {kind_raw}") from None
        msg = Command(target_variant_id=target, command=kind, degrade_level=level)
    elif msg_type is MsgType.HEARTBEAT:
        node_id, uptime = r.unpack("<IQ")
        msg = Heartbeat(node_id=node_id, uptime_s=uptime)
    elif msg_type is MsgType.RESULT_CHUNK:
        experiment_id = r.take_str()
        index, total = r.unpack("<II")
        msg = ResultChunk(experiment_id=experiment_id, chunk_index=index, total_chunks=total, data=r.rest())
    else:  # pragma: no cover - MsgType is closed
        raise UnknownType(f"msg_type {msg_type}")
    r.done()
    return msg


def encode(msg: Message, sender_id: int, seq: int, timestamp_us: int) -> bytes:
    """Serialize a message into one datagram. Raises ``PayloadTooLarge``."""
    payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    header = HEADER.pack(
        MAGIC, VERSION, int(msg.MSG_TYPE), 0, sender_id, seq, timestamp_us, len(payload)
    )
    return header + payload


def decode(datagram: bytes) -> tuple[Envelope, Message]:
    """Decode one datagram; total over arbitrary input.

    Raises ``Truncated``, ``BadMagic``, ``BadVersion``, ``UnknownType``, or
    ``MalformedPayload`` - never anything else.
    """
    if len(datagram) < HEADER_LEN:
        raise Truncated(f"datagram of {len(datagram)} bytes is below the {HEADER_LEN}-byte header")
    magic, version, msg_type_raw, flags, sender_id, seq, timestamp_us, payload_len = HEADER.unpack(
        datagram[:HEADER_LEN]
    )
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        msg_type = MsgType(msg_type_raw)
    except ValueError:
        raise UnknownType(f"unknown msg_type 0x{msg_type_raw:02x}") from None
    if flags != 0:
        raise MalformedPayload(f"reserved flags must be 0, got 0x{flags:04x}")
    if payload_len > MAX_PAYLOAD:
        raise MalformedPayload(f"payload_len {payload_len} exceeds {MAX_PAYLOAD}")
    body = datagram[HEADER_LEN:]
    if len(body) < payload_len:
        raise Truncated(f"payload short: header says {payload_len}, got {len(body)}")
    if len(body) > payload_len:
        raise MalformedPayload(f"{len(body) - payload_len} bytes beyond declared payload")
    message = _decode_payload(msg_type, body)
    envelope = Envelope(
        msg_type=msg_type,
        sender_id=sender_id,
        seq=seq,
        timestamp_us=timestamp_us,
        payload_len=payload_len,
    )
    return envelope, message


@dataclass(frozen=True)
class Received:
    """One delivered datagram, decoded."""

    envelope: Envelope
    message: Message


class Subscription:
    """Ordered stream of decoded datagrams, optionally filtered by msg_type.

    Messages are consumed either by ``poll()`` or, when a callback is
    attached, synchronously at publish time (the deterministic path the
    simulated runs use).
    """

    def __init__(self, types: Optional[frozenset[MsgType]], callback: Optional[Callable[[Received], None]]) -> None:
        self._types = types
        self._callback = callback
        self._queue: deque[Received] = deque()

    def _offer(self, item: Received) -> None:
        if self._types is not None and item.envelope.msg_type not in self._types:
            return
        if self._callback is not None:
            self._callback(item)
        else:
            self._queue.append(item)

    def poll(self) -> Optional[Received]:
        return self._queue.popleft() if self._queue else None

    def drain(self) -> list[Received]:
        out = list(self._queue)
        self._queue.clear()
        return out


class LoopbackBus:
    """In-memory hub: every published datagram reaches every subscription
    exactly once, in publish order. Keeps the full decoded history so tests
    can audit the complete traffic of a run."""

    def __init__(self) -> None:
        self._subs: list[Subscription] = []
        self._closed = False
        self.history: list[Received] = []

    def subscribe(
        self,
        types: Iterable[MsgType] | None = None,
        callback: Optional[Callable[[Received], None]] = None,
    ) -> Subscription:
        if self._closed:
            raise TransportClosed("bus is closed")
        sub = Subscription(frozenset(types) if types is not None else None, callback)
        self._subs.append(sub)
        return sub

    def publish(self, datagram: bytes) -> None:
        if self._closed:
            raise TransportClosed("bus is closed")
        item = Received(*decode(datagram))
        self.history.append(item)
        for sub in self._subs:
            sub._offer(item)

    def close(self) -> None:
        self._closed = True


class UdpMulticastBus:
    """Best-effort UDP multicast endpoint bound to ``group:port``.

    Configuration keys ``bus.group`` / ``bus.port`` map onto the
    constructor arguments. Loss is possible; duplication is not
    introduced locally. One publisher plus one subscriber stream per
    endpoint; wider sharing needs external serialization.
    """

    def __init__(self, group: str = DEFAULT_GROUP, port: int = DEFAULT_PORT, *, loop: bool = True) -> None:
        self.group = group
        self.port = port
        try:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._sock.bind(("", port))
            membership = socket.inet_aton(group) + socket.inet_aton("0.0.0.0")
            self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, membership)
            self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1 if loop else 0)
            self._sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
        except OSError as exc:
            raise SocketError(f"cannot open multicast endpoint {group}:{port}: {exc}") from exc
        self._closed = False

    def publish(self, datagram: bytes) -> None:
        if self._closed:
            raise TransportClosed("endpoint is closed")
        try:
            self._sock.sendto(datagram, (self.group, self.port))
        except OSError as exc:
            raise SocketError(f"send failed: {exc}") from exc

    def poll(self, timeout_s: float = 0.0) -> Optional[Received]:
        """Receive and decode one datagram, or None on timeout.

        Undecodable datagrams (foreign traffic on the group) are dropped.
        """
        if self._closed:
            raise TransportClosed("endpoint is closed")
        self._sock.settimeout(timeout_s if timeout_s > 0 else 0.000001)
        try:
            raw, _addr = self._sock.recvfrom(65535)
        except socket.timeout:
            return None
        except OSError as exc:
            raise SocketError(f"recv failed: {exc}") from exc
        try:
            return Received(*decode(raw))
        except DecodeError:
            return None

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._sock.close()


class Sender:
    """Per-sender envelope writer: stamps monotonically increasing seq."""

    def __init__(self, bus, sender_id: int, clock) -> None:
        self.bus = bus
        self.sender_id = sender_id
        self.clock = clock
        self._seq = 0

    def send(self, msg: Message) -> int:
        """Encode and publish; returns the seq used."""
        seq = self._seq
        self.bus.publish(encode(msg, self.sender_id, seq, self.clock.now_us()))
        self._seq += 1
        return seq
