"""Binary wire format shared by the networked trainer, checkpoints and archives.

Frame layout (all integers little-endian):

    magic ``TFD1`` (4 bytes) | version u8 (=1) | type u8 | round u32 |
    client_id u32 | payload_len u32 | payload

Parameter payload (GLOBAL_PARAMS / CLIENT_UPDATE): tensor_count u32, then per
tensor: name_len u16 + UTF-8 name, rank u8, dims u32 x rank, values f32 in
row-major order. A CLIENT_UPDATE payload appends the sender's training sample
count as an n_k u64.

CONFIG payload: UTF-8 ``key=value`` lines. ERROR payload: UTF-8 message.

Values travel as float32; in-memory math is float64 throughout, so one
encode/decode round trip perturbs each scalar by at most ~1.2e-7 relative.
Payloads are capped at 64 MiB.

A parameter checkpoint file (``.tfp``) is a single GLOBAL_PARAMS frame
written to disk. A window archive (``.tfw``) reuses the same per-tensor
encoding: magic ``TFW1`` | version u8 (=1) | count u32, then per window one
tensor block followed by its label u16.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .params import ParameterSet

MAGIC = b"TFD1"
ARCHIVE_MAGIC = b"TFW1"
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

_HEADER = struct.Struct("<4sBBIII")


class ProtocolError(ValueError):
    """Malformed, truncated or out-of-bounds wire data."""


class MsgType(enum.IntEnum):
    HELLO = 1
    CONFIG = 2
    GLOBAL_PARAMS = 3
    CLIENT_UPDATE = 4
    ROUND_DONE = 5  # reserved; the synchronous round flow does not emit it
    SHUTDOWN = 6
    ERROR = 7


@dataclass(frozen=True)
class Message:
    type: MsgType
    round: int = 0
    client_id: int = 0
    payload: bytes = b""


def encode_message(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(msg.payload)} bytes exceeds 64 MiB")
    header = _HEADER.pack(
        MAGIC, VERSION, int(msg.type), msg.round, msg.client_id, len(msg.payload)
    )
    return header + msg.payload


def decode_header(buf: bytes) -> tuple[MsgType, int, int, int]:
    """Validate a frame header; returns (type, round, client_id, payload_len)."""
    if len(buf) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, version, mtype, rnd, client_id, payload_len = _HEADER.unpack(
        buf[: _HEADER.size]
    )
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"advertised payload of {payload_len} bytes exceeds 64 MiB")
    return mtype, rnd, client_id, payload_len


def decode_message(buf: bytes) -> Message:
    """Decode one complete frame; rejects trailing or missing bytes."""
    mtype, rnd, client_id, payload_len = decode_header(buf)
    if len(buf) != _HEADER.size + payload_len:
        raise ProtocolError(
            f"frame length {len(buf)} does not match header "
            f"({_HEADER.size + payload_len} expected)"
        )
    return Message(mtype, rnd, client_id, buf[_HEADER.size:])


def header_size() -> int:
    return _HEADER.size


class _Cursor:
    """Sequential reader over a payload buffer with truncation checks."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def done(self) -> bool:
        return self.pos == len(self.buf)


def encode_tensor(name: str, values: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise ProtocolError("tensor name too long")
    arr = np.ascontiguousarray(values, dtype=np.float32)
    parts = [struct.pack("<H", len(name_bytes)), name_bytes,
             struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensor(cur: _Cursor) -> tuple[str, np.ndarray]:
    name = cur.take(cur.u16()).decode("utf-8")
    rank = cur.u8()
    dims = tuple(cur.u32() for _ in range(rank))
    count = 1
    for d in dims:
        count *= d
    raw = cur.take(4 * count)
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    return name, values


def encode_params(params: ParameterSet) -> bytes:
    parts = [struct.pack("<I", len(params))]
    parts.extend(encode_tensor(name, t) for name, t in params)
    return b"".join(parts)


def decode_params(buf: bytes, trailing: int = 0) -> tuple[ParameterSet, _Cursor]:
    cur = _Cursor(buf)
    count = cur.u32()
    items = [decode_tensor(cur) for _ in range(count)]
    if trailing == 0 and not cur.done():
        raise ProtocolError("unexpected trailing bytes after parameters")
    return ParameterSet(items), cur


def params_payload(params: ParameterSet) -> bytes:
    return encode_params(params)


def parse_params_payload(buf: bytes) -> ParameterSet:
    params, _ = decode_params(buf)
    return params


def client_update_payload(params: ParameterSet, n_k: int) -> bytes:
    return encode_params(params) + struct.pack("<Q", n_k)


def parse_client_update_payload(buf: bytes) -> tuple[ParameterSet, int]:
    params, cur = decode_params(buf, trailing=8)
    n_k = cur.u64()
    if not cur.done():
        raise ProtocolError("unexpected trailing bytes after client update")
    return params, n_k


def config_payload(config: dict) -> bytes:
    lines = [f"{key}={value}" for key, value in config.items()]
    return "\n".join(lines).encode("utf-8")


def parse_config_payload(buf: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in buf.decode("utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ProtocolError(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, params: ParameterSet, round: int = 0) -> None:
    """Write a parameter checkpoint (one GLOBAL_PARAMS frame) to disk."""
    frame = encode_message(
        Message(MsgType.GLOBAL_PARAMS, round=round, payload=encode_params(params))
    )
    with open(path, "wb") as fh:
        fh.write(frame)


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    msg = decode_message(buf)
    if msg.type != MsgType.GLOBAL_PARAMS:
        raise ProtocolError(f"checkpoint holds a {msg.type.name} frame")
    return parse_params_payload(msg.payload)
