"""Wire format for GoS-extended RSVP-TE messages.

Every message is an 8-byte RSVP common header followed by objects framed as
``length:16 | class_num:8 | c_type:8 | body`` (big-endian; the length counts
the 4-byte object header and is a multiple of 4). The GoS objects use
private class numbers so that a node without GoS support can skip them.

    Path   = SESSION, RSVP_HOP, [GOS_PATH]
    Resv   = SESSION, RSVP_HOP, [GOS_RESV]
    Hello  = HELLO(c_type 1 request | 2 ack), [GOS_REQ | GOS_ACK]
"""

from __future__ import annotations

import ipaddress
import random
import struct
from dataclasses import dataclass
from typing import Union

RSVP_VERSION = 1

MSG_PATH = 1
MSG_RESV = 2
MSG_HELLO = 20

CLASS_SESSION = 1
CLASS_RSVP_HOP = 3
CLASS_HELLO = 22
CLASS_GOS_PATH = 248
CLASS_GOS_RESV = 249
CLASS_GOS_REQ = 250
CLASS_GOS_ACK = 251

HELLO_REQUEST = 1
HELLO_ACK = 2

_COMMON = struct.Struct("!BBHBBH")
_OBJ = struct.Struct("!HBB")

MAX_LEVEL = 0xFFFF
NULL_ADDRESS = 0


class CodecError(ValueError):
    pass


class TruncatedObject(CodecError):
    pass


class FramingError(CodecError):
    pass


class DuplicateObject(CodecError):
    pass


def _u32(name: str, value: int) -> None:
    if not 0 <= value <= 0xFFFFFFFF:
        raise ValueError(f"{name}={value} does not fit in 32 bits")


def _u16(name: str, value: int) -> None:
    if not 0 <= value <= MAX_LEVEL:
        raise ValueError(f"{name}={value} does not fit in 16 bits")


def addr_to_int(address: str | int) -> int:
    if isinstance(address, int):
        _u32("address", address)
        return address
    return int(ipaddress.IPv4Address(address))


def int_to_addr(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def parse_gos_level(binary_string: str) -> int:
    """Value of a GoS-table level column such as ``"0000000000001011"``.

    Strings shorter than 16 bits are read as if zero-padded on the left.
    """
    s = binary_string.strip()
    if not s or any(c not in "01" for c in s):
        raise ValueError(f"GoS level {binary_string!r} is not a binary string")
    if len(s) > 16:
        raise ValueError(f"GoS level {binary_string!r} is wider than 16 bits")
    return int(s.zfill(16), 2)


def format_gos_level(level: int) -> str:
    _u16("level", level)
    return format(level, "016b")


# -- GoS objects ---------------------------------------------------------------

@dataclass(frozen=True)
class GosPathObject:
    level: int
    gosp_phop: int = NULL_ADDRESS

    def __post_init__(self):
        _u16("level", self.level)
        _u32("gosp_phop", self.gosp_phop)


@dataclass(frozen=True)
class GosResvObject:
    granted_level: int

    def __post_init__(self):
        _u16("granted_level", self.granted_level)


@dataclass(frozen=True)
class GosReqObject:
    flow_id: int
    packet_id: int

    def __post_init__(self):
        _u32("flow_id", self.flow_id)
        _u32("packet_id", self.packet_id)


@dataclass(frozen=True)
class GosAckObject:
    flow_id: int
    packet_id: int
    found: bool

    def __post_init__(self):
        _u32("flow_id", self.flow_id)
        _u32("packet_id", self.packet_id)


# -- messages --------------------------------------------------------------------

@dataclass(frozen=True)
class PathMsg:
    session: int
    hop: int
    gos_path: GosPathObject | None = None

    def __post_init__(self):
        _u32("session", self.session)
        _u32("hop", self.hop)


@dataclass(frozen=True)
class ResvMsg:
    session: int
    hop: int
    gos_resv: GosResvObject | None = None

    def __post_init__(self):
        _u32("session", self.session)
        _u32("hop", self.hop)


@dataclass(frozen=True)
class HelloReq:
    src_instance: int
    dst_instance: int
    gos_req: GosReqObject | None = None

    def __post_init__(self):
        _u32("src_instance", self.src_instance)
        _u32("dst_instance", self.dst_instance)


@dataclass(frozen=True)
class HelloAck:
    src_instance: int
    dst_instance: int
    gos_ack: GosAckObject | None = None

    def __post_init__(self):
        _u32("src_instance", self.src_instance)
        _u32("dst_instance", self.dst_instance)


ControlMessage = Union[PathMsg, ResvMsg, HelloReq, HelloAck]


# -- encoding --------------------------------------------------------------------

def _obj(class_num: int, c_type: int, body: bytes) -> bytes:
    pad = -len(body) % 4
    body += b"\0" * pad
    return _OBJ.pack(_OBJ.size + len(body), class_num, c_type) + body


def _encode_gos(obj) -> bytes:
    if isinstance(obj, GosPathObject):
        return _obj(CLASS_GOS_PATH, 1, struct.pack("!HI", obj.level, obj.gosp_phop))
    if isinstance(obj, GosResvObject):
        return _obj(CLASS_GOS_RESV, 1, struct.pack("!H", obj.granted_level))
    if isinstance(obj, GosReqObject):
        return _obj(CLASS_GOS_REQ, 1, struct.pack("!II", obj.flow_id, obj.packet_id))
    if isinstance(obj, GosAckObject):
        return _obj(CLASS_GOS_ACK, 1, struct.pack("!III", obj.flow_id, obj.packet_id, int(obj.found)))
    raise TypeError(f"not a GoS object: {obj!r}")


def encode(msg: ControlMessage) -> bytes:
    if isinstance(msg, (PathMsg, ResvMsg)):
        msg_type = MSG_PATH if isinstance(msg, PathMsg) else MSG_RESV
        body = _obj(CLASS_SESSION, 1, struct.pack("!I", msg.session))
        body += _obj(CLASS_RSVP_HOP, 1, struct.pack("!I", msg.hop))
        ext = msg.gos_path if isinstance(msg, PathMsg) else msg.gos_resv
    elif isinstance(msg, (HelloReq, HelloAck)):
        msg_type = MSG_HELLO
        c_type = HELLO_REQUEST if isinstance(msg, HelloReq) else HELLO_ACK
        body = _obj(CLASS_HELLO, c_type, struct.pack("!II", msg.src_instance, msg.dst_instance))
        ext = msg.gos_req if isinstance(msg, HelloReq) else msg.gos_ack
    else:
        raise TypeError(f"not a control message: {msg!r}")
    if ext is not None:
        body += _encode_gos(ext)
    header = _COMMON.pack(RSVP_VERSION << 4, msg_type, 0, 255, 0, _COMMON.size + len(body))
    return header + body


# -- decoding --------------------------------------------------------------------

# exact object lengths, header included
_FIXED_LEN = {
    CLASS_SESSION: 8,
    CLASS_RSVP_HOP: 8,
    CLASS_HELLO: 12,
    CLASS_GOS_PATH: 12,
    CLASS_GOS_RESV: 8,
    CLASS_GOS_REQ: 12,
    CLASS_GOS_ACK: 16,
}

_ALLOWED = {
    MSG_PATH: {CLASS_SESSION, CLASS_RSVP_HOP, CLASS_GOS_PATH},
    MSG_RESV: {CLASS_SESSION, CLASS_RSVP_HOP, CLASS_GOS_RESV},
    MSG_HELLO: {CLASS_HELLO, CLASS_GOS_REQ, CLASS_GOS_ACK},
}


def _split_objects(data: bytes, offset: int):
    while offset < len(data):
        remaining = len(data) - offset
        if remaining < _OBJ.size:
            raise TruncatedObject(f"{remaining} trailing bytes at offset {offset}, need a 4-byte object header")
        length, class_num, c_type = _OBJ.unpack_from(data, offset)
        if length < _OBJ.size or length % 4:
            raise FramingError(f"object at offset {offset}: length {length} is not a multiple of 4 of at least 4")
        if length > remaining:
            raise TruncatedObject(f"object at offset {offset}: length {length} exceeds the {remaining} remaining bytes")
        yield offset, class_num, c_type, data[offset + _OBJ.size: offset + length]
        offset += length


def decode_report(data: bytes) -> tuple[ControlMessage, list[tuple[int, int]]]:
    """Decode a message; also return the (class_num, c_type) of skipped unknown objects."""
    data = bytes(data)
    if len(data) < _COMMON.size:
        raise TruncatedObject(f"{len(data)} bytes is shorter than the common header")
    vers_flags, msg_type, _cksum, _ttl, _rsvd, total = _COMMON.unpack_from(data, 0)
    if vers_flags >> 4 != RSVP_VERSION:
        raise FramingError(f"unsupported RSVP version {vers_flags >> 4}")
    if total != len(data):
        raise FramingError(f"header length {total} disagrees with {len(data)} bytes received")
    if msg_type not in _ALLOWED:
        raise FramingError(f"unsupported message type {msg_type}")

    found: dict[int, tuple[int, bytes]] = {}
    skipped: list[tuple[int, int]] = []
    for offset, class_num, c_type, body in _split_objects(data, _COMMON.size):
        expected = _FIXED_LEN.get(class_num)
        if expected is None:
            skipped.append((class_num, c_type))
            continue
        if len(body) + _OBJ.size != expected:
            raise FramingError(f"object class {class_num} at offset {offset}: length {len(body) + 4}, expected {expected}")
        if class_num not in _ALLOWED[msg_type]:
            raise FramingError(f"object class {class_num} is not valid in message type {msg_type}")
        if class_num in found:
            raise DuplicateObject(f"object class {class_num} appears more than once")
        if c_type != 1 and class_num != CLASS_HELLO:
            raise FramingError(f"object class {class_num}: unknown c_type {c_type}")
        found[class_num] = (c_type, body)

    def need(class_num):
        if class_num not in found:
            raise FramingError(f"message type {msg_type} lacks mandatory object class {class_num}")
        return found[class_num][1]

    if msg_type in (MSG_PATH, MSG_RESV):
        (session,) = struct.unpack("!I", need(CLASS_SESSION))
        (hop,) = struct.unpack("!I", need(CLASS_RSVP_HOP))
        if msg_type == MSG_PATH:
            ext = None
            if CLASS_GOS_PATH in found:
                level, phop = struct.unpack_from("!HI", found[CLASS_GOS_PATH][1])
                ext = GosPathObject(level, phop)
            return PathMsg(session, hop, ext), skipped
        ext = None
        if CLASS_GOS_RESV in found:
            (level,) = struct.unpack_from("!H", found[CLASS_GOS_RESV][1])
            ext = GosResvObject(level)
        return ResvMsg(session, hop, ext), skipped

    hello_body = need(CLASS_HELLO)
    c_type = found[CLASS_HELLO][0]
    src, dst = struct.unpack("!II", hello_body)
    if c_type == HELLO_REQUEST:
        if CLASS_GOS_ACK in found:
            raise FramingError("GoS Ack object inside a Hello Request")
        ext = None
        if CLASS_GOS_REQ in found:
            ext = GosReqObject(*struct.unpack("!II", found[CLASS_GOS_REQ][1]))
        return HelloReq(src, dst, ext), skipped
    if c_type == HELLO_ACK:
        if CLASS_GOS_REQ in found:
            raise FramingError("GoS Request object inside a Hello Ack")
        ext = None
        if CLASS_GOS_ACK in found:
            flow, pid, flags = struct.unpack("!III", found[CLASS_GOS_ACK][1])
            if flags & ~1:
                raise FramingError(f"GoS Ack reserved flag bits set: {flags:#x}")
            ext = GosAckObject(flow, pid, bool(flags & 1))
        return HelloAck(src, dst, ext), skipped
    raise FramingError(f"unknown Hello c_type {c_type}")


def decode(data: bytes) -> ControlMessage:
    return decode_report(data)[0]


# -- helpers for checks and golden vectors -----------------------------------------

def hexdump(data: bytes, width: int = 16) -> str:
    rows = []
    for off in range(0, len(data), width):
        chunk = data[off: off + width]
        rows.append(f"{off:04x}  " + " ".join(f"{b:02x}" for b in chunk))
    return "\n".join(rows)


def read_hex(text: str) -> bytes:
    """Parse a hex dump: ``#`` comments, optional ``0000`` offset column, byte pairs."""
    out = bytearray()
    for line in text.splitlines():
        line = line.split("#", 1)[0].split()
        if not line:
            continue
        if len(line[0]) == 4 and len(line) > 1:
            line = line[1:]
        for tok in line:
            if len(tok) != 2:
                raise ValueError(f"bad hex byte {tok!r}")
            out.append(int(tok, 16))
    return bytes(out)


def random_message(rng: random.Random) -> ControlMessage:
    u32 = lambda: rng.choice((0, 1, 0xFFFFFFFF, rng.getrandbits(32)))
    u16 = lambda: rng.choice((0, 1, MAX_LEVEL, rng.getrandbits(16)))
    with_ext = rng.random() < 0.7
    kind = rng.randrange(4)
    if kind == 0:
        return PathMsg(u32(), u32(), GosPathObject(u16(), u32()) if with_ext else None)
    if kind == 1:
        return ResvMsg(u32(), u32(), GosResvObject(u16()) if with_ext else None)
    if kind == 2:
        return HelloReq(u32(), u32(), GosReqObject(u32(), u32()) if with_ext else None)
    return HelloAck(u32(), u32(), GosAckObject(u32(), u32(), rng.random() < 0.5) if with_ext else None)


# name of each shipped testdata/<name>.hex vector -> the message it encodes
GOLDEN = {
    # GoS table row for FEC 35: level 0000000000001011, PHOP x.x.160.12 with masked octets zeroed
    "path_fec35": PathMsg(35, addr_to_int("0.0.160.12"), GosPathObject(11, addr_to_int("0.0.160.12"))),
    "path_plain": PathMsg(36, addr_to_int("10.0.160.73")),
    "resv_fec37": ResvMsg(37, addr_to_int("10.0.160.17"), GosResvObject(18)),
    "hello_req_35_7": HelloReq(4, 3, GosReqObject(35, 7)),
    "hello_ack_found": HelloAck(3, 4, GosAckObject(35, 7, True)),
    "hello_ack_plain": HelloAck(3, 4),
}
