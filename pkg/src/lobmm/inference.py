"""Turn model outputs back into messages.

Type, side and the roundness flag always come from the argmax token. The
numeric fields depend on the mode:

``combined``   regressor values clamped into the token's bins
``token``      bin start for price, bin centre for volume (exact level when flagged)
``regressor``  inverse-scaled regressors, limited only to [0, clip]

The time gap has no token component, so every mode reads it from the time
regressor.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ag
from .feed import BookState, MsgType, RawMessage, Side, best_quotes
from .model import LobModel, ModelInputs
from .preprocess import DEFAULT_PLGS, Preprocessed, cumulative_time
from .scaling import PlgsParams, plgs_inverse
from .tokenizer import SPECIALS, UNKNOWN, ZERO_PRICE_TYPES, TokenizerConfig, Vocabulary, bin_range, decode_components


class DecodeMode(str, Enum):
    COMBINED = "combined"
    TOKEN = "token"
    REGRESSOR = "regressor"


MODES = tuple(DecodeMode)


@dataclass(frozen=True)
class DecodedMessage:
    mtype: MsgType
    side: Side
    price_diff: int
    volume: int
    dt_ms: float
    round_flag: bool


@dataclass
class DecodeStats:
    total: int = 0
    failures: int = 0
    clamps: Counter = field(default_factory=Counter)

    @property
    def failure_rate(self) -> float:
        return self.failures / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "failures": self.failures,
            "clamp_activations": {f"{k[0]}:{k[1]}": v for k, v in sorted(self.clamps.items())},
        }


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp(value: float, lo: int, hi: int, key, stats: DecodeStats | None) -> int:
    if stats is not None and not lo <= value <= hi:
        stats.clamps[key] += 1
    return _half_up(min(max(value, lo), hi))


def decode(
    token_id: int,
    preds: tuple[float, float, float],
    vocab: Vocabulary,
    mode: DecodeMode | str = DecodeMode.COMBINED,
    tokenizer: TokenizerConfig = TokenizerConfig(),
    plgs: dict[str, PlgsParams] = DEFAULT_PLGS,
    stats: DecodeStats | None = None,
) -> DecodedMessage | None:
    """Decode one position; returns None (and counts a failure) when the token is not a message."""
    mode = DecodeMode(mode)
    if stats is not None:
        stats.total += 1
    comps = decode_components(token_id, vocab, tokenizer) if token_id >= len(SPECIALS) else UNKNOWN
    if comps is UNKNOWN:
        if stats is not None:
            stats.failures += 1
        return None

    price_pred, volume_pred, time_pred = (min(max(float(v), 0.0), 1.0) for v in preds)
    p_clip, v_clip = int(plgs["price"].tau_clip), int(plgs["volume"].tau_clip)
    p_lo, p_hi = bin_range(tokenizer.price_levels, p_clip, comps.price_bin)
    v_lo, v_hi = bin_range(tokenizer.volume_levels, v_clip, comps.volume_bin)
    # half-open bins keep their upper edge out; the last bin is closed at the clip
    p_top = p_hi if p_hi == p_clip else p_hi - 1
    v_top = v_hi if v_hi == v_clip else v_hi - 1
    dt = float(plgs_inverse(time_pred, plgs["time"]))

    if mode is DecodeMode.TOKEN:
        price = p_lo
        volume = v_lo if comps.round_flag else _half_up((v_lo + v_hi) / 2)
    elif mode is DecodeMode.COMBINED:
        price = _clamp(float(plgs_inverse(price_pred, plgs["price"])), p_lo, p_top, ("price", p_lo), stats)
        if comps.round_flag:
            volume = v_lo
        else:
            raw_v = float(plgs_inverse(volume_pred, plgs["volume"]))
            volume = _clamp(raw_v, v_lo + 1, v_top, ("volume", v_lo), stats)
    else:
        price = min(max(_half_up(float(plgs_inverse(price_pred, plgs["price"]))), 0), p_clip)
        volume = min(max(_half_up(float(plgs_inverse(volume_pred, plgs["volume"]))), 0), v_clip)

    if comps.mtype in ZERO_PRICE_TYPES:
        price = 0
    return DecodedMessage(comps.mtype, comps.side, int(price), int(volume), dt, comps.round_flag)


# --------------------------------------------------------------------------- model-driven prediction


@dataclass
class NextPredictions:
    token_ids: np.ndarray
    preds: np.ndarray  # (N, 3) price, volume, time in scaled units
    logits: np.ndarray


def context_inputs(data: Preprocessed, starts: np.ndarray, length: int) -> ModelInputs:
    idx = np.asarray(starts)[:, None] + np.arange(length)
    return ModelInputs(
        tokens=data.tokens[idx],
        price=data.price[idx],
        volume=data.volume[idx],
        snapshots=data.snapshots[idx],
        cum_time=cumulative_time(data.dt_ms[idx]),
    )


def predict_next(model: LobModel, data: Preprocessed, targets: np.ndarray, context_len: int, batch_size: int = 64) -> NextPredictions:
    """Causal predictions for messages ``targets`` from the ``context_len`` messages before each."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and targets.min() < context_len:
        raise ValueError(f"targets need {context_len} messages of context")
    context_len = min(context_len, model.cfg.max_seq_len)
    ids, preds, logits = [], [], []
    model.eval()
    with ag.no_grad():
        for i in range(0, len(targets), batch_size):
            t = targets[i : i + batch_size]
            inp = context_inputs(data, t - context_len, context_len)
            out = model(inp, causal=True, positions=(np.arange(len(t)), np.full(len(t), context_len - 1)))
            lg = out.token_logits.data
            logits.append(lg)
            ids.append(lg.argmax(axis=-1))
            preds.append(np.stack([out.regress[k].data for k in ("price", "volume", "time")], axis=-1))
    if not ids:
        return NextPredictions(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, model.cfg.vocab_size)))
    return NextPredictions(np.concatenate(ids), np.concatenate(preds).astype(np.float64), np.concatenate(logits))


def generate_next(
    model: LobModel,
    context: Preprocessed,
    vocab: Vocabulary,
    mode: DecodeMode | str = DecodeMode.COMBINED,
    tokenizer: TokenizerConfig = TokenizerConfig(),
    plgs: dict[str, PlgsParams] = DEFAULT_PLGS,
    stats: DecodeStats | None = None,
) -> DecodedMessage | None:
    """Greedy prediction of the message following ``context`` (kept to the most recent max_seq_len)."""
    n = len(context)
    if n == 0:
        raise ValueError("context must hold at least one message")
    keep = min(n, model.cfg.max_seq_len)
    if keep < n:
        context = context.slice(n - keep, n)
    inp = context_inputs(context, np.array([0]), keep)
    model.eval()
    with ag.no_grad():
        out = model(inp, causal=True, positions=(np.array([0]), np.array([keep - 1])))
    token_id = int(out.token_logits.data[0].argmax())
    preds = tuple(float(out.regress[k].data[0]) for k in ("price", "volume", "time"))
    return decode(token_id, preds, vocab, mode, tokenizer, plgs, stats)


def to_raw_message(msg: DecodedMessage, state: BookState, last_ts: int) -> RawMessage:
    """Place a decoded message against the current book (absolute price, timestamp; order id 0)."""
    bid, ask = best_quotes(state)
    if msg.mtype in ZERO_PRICE_TYPES:
        ref = bid if msg.side == Side.BUY else ask
        price = ref if ref is not None else 0
    elif msg.side == Side.BUY:
        price = ask - msg.price_diff if ask is not None else (bid or 0)
    else:
        price = bid + msg.price_diff if bid is not None else (ask or 0)
    return RawMessage(last_ts + _half_up(msg.dt_ms), msg.mtype, msg.side, int(price), msg.volume, 0)
