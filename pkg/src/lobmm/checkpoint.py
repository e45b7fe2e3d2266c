"""Binary checkpoint container.

Layout (little endian)::

    b"LOBT" | u32 version | u32 n | n bytes UTF-8 JSON config | u32 tensor count
    per tensor: u16 name length | name | u8 rank | u32 dims... | float32 data | u32 CRC32(data)

The JSON document carries the model config plus everything needed to encode
new data identically (tokenizer levels, PLGS parameters, snapshot scaler,
vocabulary).
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LobModel, ModelConfig
from .scaling import PRICE_PLGS, TIME_PLGS, VOLUME_PLGS, PlgsParams, SnapshotScalerConfig
from .tokenizer import TokenizerConfig, Vocabulary

MAGIC = b"LOBT"
VERSION = 1


@dataclass
class Checkpoint:
    model: LobModel
    vocab: Vocabulary
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    plgs: dict[str, PlgsParams] = field(
        default_factory=lambda: {"price": PRICE_PLGS, "volume": VOLUME_PLGS, "time": TIME_PLGS}
    )
    snapshot: SnapshotScalerConfig = field(default_factory=SnapshotScalerConfig)
    meta: dict = field(default_factory=dict)

    def config_document(self) -> dict:
        return {
            "model": self.model.cfg.to_dict(),
            "tokenizer": self.tokenizer.to_dict(),
            "plgs": {k: v.to_dict() for k, v in self.plgs.items()},
            "snapshot": self.snapshot.to_dict(),
            "vocab": list(self.vocab.tokens),
            "meta": self.meta,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = json.dumps(ckpt.config_document(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
    named = list(ckpt.model.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)) + key + struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(raw + struct.pack("<I", zlib.crc32(raw)))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checksum failure: file truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a LOBT checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        doc = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config document: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    state = {}
    for _ in range(count):
        (klen,) = r.unpack("<H", "tensor name length")
        name = r.take(klen, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"shape of {name}")
        raw = r.take(4 * int(np.prod(shape, dtype=np.int64)), f"data of {name}")
        (crc,) = r.unpack("<I", f"checksum of {name}")
        if zlib.crc32(raw) != crc:
            raise CheckpointError(f"checksum failure in tensor {name!r}")
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after tensor table")

    try:
        cfg = ModelConfig.from_dict(doc["model"])
        model = LobModel(cfg, dtype=np.float32)
        model.load_state_dict(state)
        return Checkpoint(
            model=model,
            vocab=Vocabulary(doc["vocab"]),
            tokenizer=TokenizerConfig.from_dict(doc["tokenizer"]),
            plgs={k: PlgsParams(**v) for k, v in doc["plgs"].items()},
            snapshot=SnapshotScalerConfig(**doc["snapshot"]),
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc
