"""Wire format of the classical channel.

Every frame is ``tag (1) | block id (8) | payload length (4, big-endian) |
payload``, followed by a 16-byte authentication tag for the message types
listed in :data:`AUTHENTICATED`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct(">BQI")
AUTH_TAG_BYTES = 16
MAX_PAYLOAD = 1 << 30


class ProtocolError(RuntimeError):
    """A peer sent something the state machine cannot accept."""


class MsgType(enum.IntEnum):
    HELLO = 0x01
    ESTIMATION_DATA = 0x02
    ESTIMATION_RESULT = 0x03
    SYNDROME = 0x04
    PLANE_DISCLOSE = 0x05
    BCH_SYNDROME = 0x06
    PA_PARAMS = 0x07
    VERIFY_SAMPLE = 0x08
    VERIFY_RESULT = 0x09
    ABORT = 0x0A
    AUTH_REKEY = 0x0B


AUTHENTICATED = frozenset(
    {
        MsgType.ESTIMATION_RESULT,
        MsgType.BCH_SYNDROME,
        MsgType.PA_PARAMS,
        MsgType.VERIFY_SAMPLE,
        MsgType.VERIFY_RESULT,
        MsgType.AUTH_REKEY,
    }
)


@dataclass(frozen=True)
class Message:
    type: MsgType
    block_id: int
    payload: bytes = b""
    auth_tag: bytes = b""

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError("payload too large")
        want = AUTH_TAG_BYTES if self.type in AUTHENTICATED else 0
        if self.auth_tag and len(self.auth_tag) != want:
            raise ProtocolError(f"{self.type.name} carries a tag of the wrong size")

    @property
    def header(self) -> bytes:
        return HEADER.pack(int(self.type), self.block_id, len(self.payload))

    @property
    def signed_bytes(self) -> bytes:
        """The bytes covered by the authentication tag."""
        return self.header + self.payload

    def encode(self) -> bytes:
        if self.type in AUTHENTICATED and len(self.auth_tag) != AUTH_TAG_BYTES:
            raise ProtocolError(f"{self.type.name} must be tagged before sending")
        return self.signed_bytes + self.auth_tag

    @property
    def wire_bits(self) -> int:
        return 8 * (HEADER.size + len(self.payload) + len(self.auth_tag))


def parse_header(raw: bytes) -> tuple[MsgType, int, int]:
    tag, block_id, length = HEADER.unpack(raw)
    try:
        kind = MsgType(tag)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{tag:02x}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError("payload too large")
    return kind, block_id, length


def decode(raw: bytes) -> Message:
    """Parse one complete frame; the length field must match exactly."""
    if len(raw) < HEADER.size:
        raise ProtocolError("truncated header")
    kind, block_id, length = parse_header(raw[: HEADER.size])
    tag_len = AUTH_TAG_BYTES if kind in AUTHENTICATED else 0
    if len(raw) != HEADER.size + length + tag_len:
        raise ProtocolError("length field does not match the frame")
    body = raw[HEADER.size: HEADER.size + length]
    return Message(kind, block_id, body, raw[HEADER.size + length:])


def trailer_size(kind: MsgType) -> int:
    return AUTH_TAG_BYTES if kind in AUTHENTICATED else 0


# payload helpers

def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(raw: bytes, n_bits: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    if bits.size < n_bits or bits.size - n_bits >= 8:
        raise ProtocolError("bit payload has the wrong length")
    return bits[:n_bits].copy()


# frame index, plane level, code seed, rate-table version, bit count
PLANE_HEAD = struct.Struct(">IBQHI")


@dataclass(frozen=True)
class PlanePayload:
    frame: int
    level: int
    code_seed: int
    table_version: int
    bits: np.ndarray

    def encode(self) -> bytes:
        head = PLANE_HEAD.pack(self.frame, self.level, self.code_seed, self.table_version,
                               int(self.bits.size))
        return head + pack_bits(self.bits)

    @classmethod
    def decode(cls, payload: bytes) -> "PlanePayload":
        if len(payload) < PLANE_HEAD.size:
            raise ProtocolError("truncated plane message")
        frame, level, seed, version, n = PLANE_HEAD.unpack(payload[: PLANE_HEAD.size])
        return cls(frame, level, seed, version, unpack_bits(payload[PLANE_HEAD.size:], n))
