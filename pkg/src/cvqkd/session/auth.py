"""Message authentication with a replenished key pool.

Each block draws a fresh 128-bit key from the pool and uses it to tag the
designated messages with HMAC-SHA256 truncated to 128 bits. The tag covers a
running hash of every frame exchanged in the block so far, so dropped,
reordered or altered earlier frames also break it. The pool is seeded with a
pre-shared secret and topped up from each delivered key.
"""

from __future__ import annotations

import hashlib
import hmac

from ..model_core import LeakageLedger
from .messages import AUTH_TAG_BYTES, Message

AUTH_SCHEME = "hmac-sha256-128"
KEY_BYTES = 16


class AuthError(RuntimeError):
    """Authentication key material exhausted."""


class TagMismatch(AuthError):
    """A received tag does not verify: the block is aborted and an alarm raised."""


class AuthPool:
    """FIFO of secret bytes shared by both endpoints."""

    def __init__(self, psk: bytes):
        if len(psk) < KEY_BYTES:
            raise AuthError(
                f"pre-shared key holds {8 * len(psk)} bits; at least {8 * KEY_BYTES} are needed"
            )
        self._buf = bytearray(psk)

    @property
    def available_bits(self) -> int:
        return 8 * len(self._buf)

    def take(self, ledger: LeakageLedger | None = None) -> bytes:
        if len(self._buf) < KEY_BYTES:
            raise AuthError("authentication key pool exhausted")
        key = bytes(self._buf[:KEY_BYTES])
        del self._buf[:KEY_BYTES]
        if ledger is not None:
            ledger.add("auth_bits", 8 * KEY_BYTES)
        return key

    def refill(self, secret: bytes) -> None:
        self._buf += secret

    def state(self) -> bytes:
        return bytes(self._buf)

    def restore(self, state: bytes) -> None:
        self._buf = bytearray(state)


class BlockAuthenticator:
    """Per-block tagging context over the running transcript hash."""

    def __init__(self, key: bytes):
        self._key = key
        self._hash = hashlib.sha256()

    def observe(self, msg: Message) -> None:
        self._hash.update(msg.signed_bytes)
        self._hash.update(msg.auth_tag)

    def _tag(self, msg: Message) -> bytes:
        h = self._hash.copy()
        h.update(msg.signed_bytes)
        return hmac.new(self._key, h.digest(), hashlib.sha256).digest()[:AUTH_TAG_BYTES]

    def sign(self, msg: Message) -> Message:
        return Message(msg.type, msg.block_id, msg.payload, self._tag(msg))

    def check(self, msg: Message) -> None:
        if not hmac.compare_digest(self._tag(msg), msg.auth_tag):
            raise TagMismatch(f"bad authentication tag on {msg.type.name} for block {msg.block_id}")
