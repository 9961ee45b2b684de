"""Framed wire format for split-point activations.

Layout (all little-endian)::

    magic    4s   b"SPEE"
    version  u8   1
    msg_type u8   0 activation_request | 1 class_response | 2 shutdown | 3 error
    sample   u64
    length   u32  payload bytes
    payload       f32[] activation, u16 class index, nothing, or UTF-8 text
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO, Optional

import numpy as np

from ..errors import BadFrameMagic, BadVersion, LengthMismatch, Truncated, UnknownMessageType

MAGIC = b"SPEE"
VERSION = 1
HEADER = struct.Struct("<4sBBQI")
HEADER_SIZE = HEADER.size  # 18
MAX_STREAM_PAYLOAD = 1 << 26


class MsgType(IntEnum):
    ACTIVATION_REQUEST = 0
    CLASS_RESPONSE = 1
    SHUTDOWN = 2
    ERROR = 3


def activation_frame_size(width: int) -> int:
    return HEADER_SIZE + 4 * width


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    sample_id: int
    payload: bytes = b""

    @classmethod
    def activation_request(cls, sample_id: int, activation) -> "Frame":
        data = np.ascontiguousarray(activation, dtype="<f4").reshape(-1).tobytes()
        return cls(MsgType.ACTIVATION_REQUEST, sample_id, data)

    @classmethod
    def class_response(cls, sample_id: int, class_index: int) -> "Frame":
        return cls(MsgType.CLASS_RESPONSE, sample_id, struct.pack("<H", class_index))

    @classmethod
    def shutdown(cls, sample_id: int = 0) -> "Frame":
        return cls(MsgType.SHUTDOWN, sample_id)

    @classmethod
    def error(cls, sample_id: int, message: str) -> "Frame":
        return cls(MsgType.ERROR, sample_id, message.encode("utf-8", "replace"))

    @property
    def activation(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4")

    @property
    def class_index(self) -> int:
        return struct.unpack("<H", self.payload)[0]

    @property
    def message(self) -> str:
        return self.payload.decode("utf-8", "replace")

    def __len__(self):
        return HEADER_SIZE + len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    _check_payload(MsgType(frame.msg_type), len(frame.payload))
    return HEADER.pack(MAGIC, VERSION, frame.msg_type, frame.sample_id, len(frame.payload)) + frame.payload


def _check_payload(msg_type: MsgType, length: int) -> None:
    if msg_type is MsgType.ACTIVATION_REQUEST and length % 4:
        raise LengthMismatch(f"activation payload of {length} bytes is not whole f32 values")
    if msg_type is MsgType.CLASS_RESPONSE and length != 2:
        raise LengthMismatch(f"class response payload must be 2 bytes, got {length}")
    if msg_type is MsgType.SHUTDOWN and length != 0:
        raise LengthMismatch(f"shutdown frame carries {length} payload bytes")


def _parse_header(header: bytes) -> tuple[MsgType, int, int]:
    magic, version, msg_type, sample_id, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadFrameMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported protocol version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise UnknownMessageType(f"unknown message type {msg_type}") from None
    _check_payload(kind, length)
    return kind, sample_id, length


def decode_frame(data: bytes) -> Frame:
    """Parse exactly one frame; any malformed input raises a ``FrameError``."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise Truncated(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    kind, sample_id, length = _parse_header(data[:HEADER_SIZE])
    body = len(data) - HEADER_SIZE
    if body < length:
        raise Truncated(f"payload has {body} of {length} bytes")
    if body > length:
        raise LengthMismatch(f"{body - length} trailing bytes after payload")
    return Frame(kind, sample_id, data[HEADER_SIZE:])


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Optional[Frame]:
    """Read one frame from a binary stream; ``None`` on clean EOF."""
    header = _read_exact(stream, HEADER_SIZE)
    if not header:
        return None
    if len(header) < HEADER_SIZE:
        raise Truncated("stream ended inside a frame header")
    kind, sample_id, length = _parse_header(header)
    if length > MAX_STREAM_PAYLOAD:
        raise LengthMismatch(f"payload of {length} bytes exceeds the stream limit")
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise Truncated(f"stream ended after {len(payload)} of {length} payload bytes")
    return Frame(kind, sample_id, payload)
