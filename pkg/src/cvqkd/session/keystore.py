"""Append-only store of delivered keys.

Records are length-prefixed binary entries in ``keys.bin``. A JSON-lines
index next to it carries metadata and offsets but never key material.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_RECORD = struct.Struct(">QdddI")  # block id, timestamp, delta_i, eps_hat, key bits
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class KeyStoreRecord:
    block_id: int
    timestamp: float  # simulated seconds since session start
    key: np.ndarray = field(repr=False)
    delta_i: float
    epsilon_hat: float

    def encode(self) -> bytes:
        head = _RECORD.pack(
            self.block_id, self.timestamp, self.delta_i, self.epsilon_hat, int(self.key.size)
        )
        return head + np.packbits(self.key.astype(np.uint8)).tobytes()

    @classmethod
    def decode(cls, raw: bytes) -> "KeyStoreRecord":
        block_id, ts, di, eps, n = _RECORD.unpack(raw[: _RECORD.size])
        bits = np.unpackbits(np.frombuffer(raw[_RECORD.size:], dtype=np.uint8))[:n]
        return cls(block_id, ts, bits, di, eps)


class KeyStore:
    """Key records for one endpoint; ``path=None`` keeps everything in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._mem = bytearray()
        self._ids: list[int] = []
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            for rec in self.records():
                self._ids.append(rec.block_id)

    @property
    def data_file(self) -> Path | None:
        return None if self.path is None else self.path / "keys.bin"

    @property
    def index_file(self) -> Path | None:
        return None if self.path is None else self.path / "index.jsonl"

    def __contains__(self, block_id: int) -> bool:
        return block_id in self._ids

    def __len__(self) -> int:
        return len(self._ids)

    def append(self, rec: KeyStoreRecord) -> None:
        if rec.block_id in self._ids:
            raise ValueError(f"block {rec.block_id} already stored")
        raw = rec.encode()
        entry = _LEN.pack(len(raw)) + raw
        if self.path is None:
            offset = len(self._mem)
            self._mem += entry
        else:
            with open(self.data_file, "ab") as fh:
                offset = fh.tell()
                fh.write(entry)
            meta = {
                "block_id": rec.block_id,
                "timestamp": rec.timestamp,
                "key_bits": int(rec.key.size),
                "delta_i": rec.delta_i,
                "epsilon_hat": rec.epsilon_hat,
                "offset": offset,
            }
            with open(self.index_file, "a") as fh:
                fh.write(json.dumps(meta) + "\n")
        self._ids.append(rec.block_id)

    def raw_bytes(self) -> bytes:
        if self.path is None:
            return bytes(self._mem)
        return self.data_file.read_bytes() if self.data_file.exists() else b""

    def records(self) -> list[KeyStoreRecord]:
        raw = self.raw_bytes()
        out, pos = [], 0
        while pos < len(raw):
            (n,) = _LEN.unpack(raw[pos: pos + _LEN.size])
            pos += _LEN.size
            out.append(KeyStoreRecord.decode(raw[pos: pos + n]))
            pos += n
        return out

    def export_hex(self) -> str:
        """One line per key: ``<block id> <key bits> <hex>``."""
        lines = []
        for rec in self.records():
            hexkey = np.packbits(rec.key).tobytes().hex()
            lines.append(f"{rec.block_id} {rec.key.size} {hexkey}")
        return "\n".join(lines) + ("\n" if lines else "")
