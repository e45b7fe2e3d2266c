"""From a message stream to model-ready arrays.

Each message becomes a token id, three PLGS-scaled channels (price distance,
volume, time gap) and the scaled snapshot of the book right after it. Raw
values are kept alongside so decoded predictions can be compared in natural
units.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

from .errors import BookError, DataError
from .feed import BookState, RawMessage, Side, apply_message, best_quotes
from .model import ModelInputs
from .scaling import (
    PRICE_PLGS,
    TIME_PLGS,
    VOLUME_PLGS,
    PlgsParams,
    SnapshotScalerConfig,
    plgs_forward,
    price_diff_ticks,
    scale_snapshots,
)
from .tokenizer import PAD_ID, TokenizerConfig, Vocabulary, build_vocab, message_components, stringify

DEFAULT_PLGS = {"price": PRICE_PLGS, "volume": VOLUME_PLGS, "time": TIME_PLGS}


@dataclass
class Preprocessed:
    tokens: np.ndarray
    price: np.ndarray
    volume: np.ndarray
    time: np.ndarray
    snapshots: np.ndarray
    mid: np.ndarray
    mtype: np.ndarray
    side: np.ndarray
    price_diff: np.ndarray
    raw_volume: np.ndarray
    dt_ms: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    def slice(self, start: int, stop: int) -> "Preprocessed":
        return Preprocessed(**{f.name: getattr(self, f.name)[start:stop] for f in fields(self)})

    def save(self, path) -> None:
        np.savez(path, **{f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def load(cls, path) -> "Preprocessed":
        with np.load(path) as z:
            missing = {f.name for f in fields(cls)} - set(z.files)
            if missing:
                raise DataError(f"{path}: missing arrays {sorted(missing)}")
            return cls(**{f.name: z[f.name] for f in fields(cls)})


def preprocess(
    messages: Iterable[RawMessage],
    vocab: Vocabulary | None = None,
    tokenizer: TokenizerConfig = TokenizerConfig(),
    snapshot_cfg: SnapshotScalerConfig = SnapshotScalerConfig(),
    plgs: dict[str, PlgsParams] = DEFAULT_PLGS,
) -> tuple[Preprocessed, Vocabulary, list[str]]:
    """Replay ``messages`` and build arrays; a vocabulary is built from the data when none is given."""
    state = BookState()
    strings, snaps, rows = [], [], []
    prev_ts = None
    for i, msg in enumerate(messages):
        bid, ask = best_quotes(state)
        opp = ask if msg.side == Side.BUY else bid
        strings.append(stringify(message_components(msg, opp, tokenizer), tokenizer))
        diff = price_diff_ticks(msg, opp, plgs["price"].tau_clip)
        dt = 0 if prev_ts is None else msg.ts_ms - prev_ts
        prev_ts = msg.ts_ms
        rows.append((int(msg.mtype), int(msg.side), diff, msg.volume, dt))
        try:
            _, snap = apply_message(state, msg)
        except BookError as exc:
            raise DataError(f"message {i}: {exc}") from exc
        snaps.append(snap)
    if not rows:
        raise DataError("no messages to preprocess")
    if vocab is None:
        vocab = build_vocab(strings)

    raw = np.asarray(rows, dtype=np.int64)
    snaps = np.asarray(snaps)
    scaled, one_sided = scale_snapshots(snaps, snapshot_cfg)
    mid = np.where(one_sided, np.nan, (snaps[:, 0] + snaps[:, 2]) / 2.0)
    data = Preprocessed(
        tokens=np.array([vocab.id_of(s) for s in strings], dtype=np.int64),
        price=plgs_forward(raw[:, 2].astype(float), plgs["price"]),
        volume=plgs_forward(raw[:, 3].astype(float), plgs["volume"]),
        time=plgs_forward(raw[:, 4].astype(float), plgs["time"]),
        snapshots=scaled,
        mid=mid,
        mtype=raw[:, 0].astype(np.int8),
        side=raw[:, 1].astype(np.int8),
        price_diff=raw[:, 2],
        raw_volume=raw[:, 3],
        dt_ms=raw[:, 4],
    )
    return data, vocab, strings


def write_tokens_csv(strings: list[str], data: Preprocessed, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("token", "token_id", "price", "volume", "time"))
        for s, tid, p, v, t in zip(strings, data.tokens, data.price, data.volume, data.time):
            w.writerow((s, int(tid), repr(float(p)), repr(float(v)), repr(float(t))))


# --------------------------------------------------------------------------- windows


def cumulative_time(dt_ms: np.ndarray, step_clip: float = TIME_PLGS.tau_clip) -> np.ndarray:
    """Per-window cumulative time: 0 at the first position, then the running sum of clipped gaps."""
    dt = np.minimum(np.asarray(dt_ms, dtype=np.float64), step_clip)
    cum = np.cumsum(dt, axis=-1)
    return cum - cum[..., :1]


@dataclass
class SeqBatch:
    tokens: np.ndarray
    price: np.ndarray
    volume: np.ndarray
    time: np.ndarray
    snapshots: np.ndarray
    cum_time: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    def inputs(self, **override) -> ModelInputs:
        base = dict(
            tokens=self.tokens,
            price=self.price,
            volume=self.volume,
            snapshots=self.snapshots,
            cum_time=self.cum_time,
            valid=self.valid,
        )
        base.update(override)
        return ModelInputs(**base)


def window_starts(n: int, seq_len: int, stride: int | None = None) -> np.ndarray:
    stride = stride or seq_len
    if n < seq_len:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n - seq_len + 1, stride, dtype=np.int64)


def gather_windows(data: Preprocessed, starts: np.ndarray, seq_len: int, step_clip: float = TIME_PLGS.tau_clip) -> SeqBatch:
    idx = np.asarray(starts, dtype=np.int64)[:, None] + np.arange(seq_len)
    if idx.size and idx.max() >= len(data):
        raise DataError(f"window reaches index {idx.max()} past {len(data)} messages")
    return SeqBatch(
        tokens=data.tokens[idx],
        price=data.price[idx],
        volume=data.volume[idx],
        time=data.time[idx],
        snapshots=data.snapshots[idx],
        cum_time=cumulative_time(data.dt_ms[idx], step_clip),
        valid=data.tokens[idx] != PAD_ID,
    )


def split(data: Preprocessed, fractions=(0.8, 0.1, 0.1)) -> tuple[Preprocessed, ...]:
    """Contiguous chronological split."""
    if abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    bounds = np.round(np.cumsum((0,) + tuple(fractions)) * len(data)).astype(int)
    return tuple(data.slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]))
