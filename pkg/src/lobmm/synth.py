"""Synthetic order flow from a toy matching engine.

The generator keeps its own :class:`~lobmm.feed.BookState` and only emits
messages that replay cleanly: new orders never cross, executions always hit
the oldest order at the best price of the consumed side, and deletes/edits
reference live orders. Randomness comes from numpy's Philox counter-based
bit generator, so a seed fixes the stream on every platform.

Two optional structures make toy training meaningful:

* a motif, a fixed k-step pattern injected with probability ``p_motif``
  (``p_motif=1`` yields the motif repeated);
* a latent trend regime in {-1, 0, +1} that tilts order placement and
  execution towards one side, giving mid-price moves some predictability.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import BookError, ConfigError, DataError
from .feed import BookState, MsgType, RawMessage, Side, apply_message, best_quotes, replay, write_feed_csv


@dataclass(frozen=True)
class MotifStep:
    """One motif message. DELETE removes the oldest live motif order on ``side``;
    with fewer than two such orders it places a NEW order instead, which is how
    the first repetition bootstraps two-sided liquidity."""

    mtype: MsgType
    side: Side
    diff: int
    volume: int
    dt_ms: int


DEFAULT_MOTIF = (
    MotifStep(MsgType.NEW, Side.BUY, 4, 100, 2),
    MotifStep(MsgType.NEW, Side.SELL, 4, 130, 0),
    MotifStep(MsgType.DELETE, Side.BUY, 4, 100, 7),
    MotifStep(MsgType.DELETE, Side.SELL, 4, 130, 1),
)

_TYPES = (MsgType.NEW, MsgType.EDIT, MsgType.DELETE, MsgType.EXECUTE, MsgType.HIDDEN)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_messages: int = 10_000
    tick0: int = 100_000
    # intensities for NEW, EDIT, DELETE, EXECUTE, HIDDEN (normalized internally)
    rates: tuple[float, ...] = (0.45, 0.06, 0.34, 0.10, 0.05)
    # probabilities for volumes 50, 100, 200 and a continuous tail; must sum to 1
    volume_mixture: tuple[float, ...] = (0.07, 0.75, 0.06, 0.12)
    tail_log_mean: float = 5.0
    tail_log_sigma: float = 1.0
    # price distance from the best opposing quote: 1 + Geometric(placement_p), capped
    placement_p: float = 0.3
    max_diff: int = 60
    # inter-arrival gaps: log-normal in ms, clipped to [0, gap_max]
    gap_log_mean: float = 1.0
    gap_log_sigma: float = 1.6
    gap_max: int = 10_000
    motif: tuple[MotifStep, ...] = DEFAULT_MOTIF
    p_motif: float = 0.0
    min_depth: int = 5
    max_orders: int = 400
    trend_switch: float = 0.0
    trend_strength: float = 0.0

    def __post_init__(self):
        if self.n_messages < 0:
            raise ConfigError("n_messages must be >= 0")
        if len(self.rates) != 5 or min(self.rates) < 0 or sum(self.rates) <= 0:
            raise ConfigError(f"rates must be 5 non-negative intensities, got {self.rates}")
        if len(self.volume_mixture) != 4 or min(self.volume_mixture) < 0 or abs(sum(self.volume_mixture) - 1) > 1e-9:
            raise ConfigError(f"volume_mixture must be 4 probabilities summing to 1, got {self.volume_mixture}")
        if not 0 <= self.p_motif <= 1 or (self.p_motif > 0 and not self.motif):
            raise ConfigError("p_motif must lie in [0, 1] and needs a non-empty motif")
        if not 0 < self.placement_p <= 1:
            raise ConfigError("placement_p must lie in (0, 1]")
        if not (0 <= self.trend_switch <= 1 and 0 <= self.trend_strength <= 1):
            raise ConfigError("trend_switch and trend_strength must lie in [0, 1]")


@dataclass
class _Engine:
    cfg: SynthConfig
    rng: np.random.Generator
    state: BookState = field(default_factory=BookState)
    ts: int = 0
    next_id: int = 1
    regime: int = 0
    anchor: float = 0.0
    own: dict = field(default_factory=lambda: {Side.BUY: [], Side.SELL: []})
    own_pos: dict = field(default_factory=dict)
    motif_orders: dict = field(default_factory=lambda: {Side.BUY: deque(), Side.SELL: deque()})

    def __post_init__(self):
        r = np.asarray(self.cfg.rates, dtype=float)
        self.type_cdf = np.cumsum(r / r.sum())
        self.volume_cdf = np.cumsum(self.cfg.volume_mixture)

    # -- helpers ------------------------------------------------------------

    def _emit(self, mtype, side, price, volume, order_id, dt) -> RawMessage:
        self.ts += int(dt)
        msg = RawMessage(self.ts, mtype, side, int(price), int(volume), int(order_id))
        apply_message(self.state, msg)
        if order_id in self.own_pos and order_id not in self.state.orders:
            self._forget(order_id)
        bid, ask = best_quotes(self.state)
        if bid is not None and ask is not None:
            self.anchor = (bid + ask) / 2
        return msg

    def _gap(self) -> int:
        c = self.cfg
        return int(min(round(self.rng.lognormal(c.gap_log_mean, c.gap_log_sigma)), c.gap_max))

    def _volume(self) -> int:
        c = self.cfg
        k = min(int(np.searchsorted(self.volume_cdf, self.rng.random(), side="right")), 3)
        if k < 3:
            return (50, 100, 200)[k]
        return int(np.clip(round(self.rng.lognormal(c.tail_log_mean, c.tail_log_sigma)), 1, 5000))

    def _diff(self) -> int:
        return int(min(self.rng.geometric(self.cfg.placement_p), self.cfg.max_diff))

    def _price_at(self, side: Side, diff: int) -> int:
        bid, ask = best_quotes(self.state)
        if side == Side.BUY:
            ref = ask if ask is not None else (bid + 2 if bid is not None else int(self.anchor) + 1)
            return ref - diff
        ref = bid if bid is not None else (ask - 2 if ask is not None else int(self.anchor) - 1)
        return ref + diff

    def _forget(self, oid: int) -> None:
        side, pos = self.own_pos.pop(oid)
        ids = self.own[side]
        last = ids.pop()
        if last != oid:
            ids[pos] = last
            self.own_pos[last] = (side, pos)

    def _new(self, side: Side, price: int, volume: int, dt: int, motif: bool = False) -> RawMessage:
        oid = self.next_id
        self.next_id += 1
        msg = self._emit(MsgType.NEW, side, price, volume, oid, dt)
        if motif:
            self.motif_orders[side].append(oid)
        else:
            self.own_pos[oid] = (side, len(self.own[side]))
            self.own[side].append(oid)
        return msg

    # -- random flow ----------------------------------------------------------

    def random_event(self) -> RawMessage:
        c, rng = self.cfg, self.rng
        if c.trend_switch and rng.random() < c.trend_switch:
            self.regime = int(rng.integers(-1, 2))
        tilt = c.trend_strength * self.regime
        dt = self._gap()
        for side in (Side.BUY, Side.SELL):
            if len(self.own[side]) < c.min_depth:
                return self._new_random(side, dt, tilt)
        n_own = len(self.own[Side.BUY]) + len(self.own[Side.SELL])
        if n_own > c.max_orders:
            mtype = MsgType.DELETE
        else:
            mtype = _TYPES[min(int(np.searchsorted(self.type_cdf, rng.random(), side="right")), 4)]
        if mtype == MsgType.NEW:
            side = Side.BUY if rng.random() < 0.5 + 0.35 * tilt else Side.SELL
            return self._new_random(side, dt, tilt)
        if mtype == MsgType.EXECUTE:
            side = Side.SELL if rng.random() < 0.5 + 0.5 * tilt else Side.BUY
            return self._execute(side, dt)
        if mtype == MsgType.HIDDEN:
            side = Side.BUY if rng.random() < 0.5 else Side.SELL
            bid, ask = best_quotes(self.state)
            price = (bid if side == Side.BUY else ask) or int(self.anchor)
            return self._emit(MsgType.HIDDEN, side, price, self._volume(), 0, dt)
        side = Side.BUY if rng.random() < 0.5 else Side.SELL
        if mtype == MsgType.DELETE and self.regime and rng.random() < c.trend_strength:
            # in a trend, liquidity on the losing side is pulled from the top
            side = Side.SELL if self.regime > 0 else Side.BUY
            ids = self.own[side]
            depth = self.state.depth(side)
            best = max(depth) if side == Side.BUY else min(depth)
            top = [i for i in ids if self.state.orders[i].price == best]
            oid = top[0] if top else ids[int(rng.integers(len(ids)))]
        else:
            ids = self.own[side]
            oid = ids[int(rng.integers(len(ids)))]
        order = self.state.orders[oid]
        if mtype == MsgType.EDIT:
            return self._emit(MsgType.EDIT, side, order.price, int(rng.integers(0, order.volume)), oid, dt)
        return self._emit(MsgType.DELETE, side, order.price, order.volume, oid, dt)

    def _new_random(self, side: Side, dt: int, tilt: float) -> RawMessage:
        favoured = (tilt > 0 and side == Side.BUY) or (tilt < 0 and side == Side.SELL)
        if favoured and self.rng.random() < abs(tilt):
            bid, ask = best_quotes(self.state)
            if side == Side.BUY and bid is not None and ask is not None:
                return self._new(side, min(ask - 1, bid + 1), self._volume(), dt)
            if side == Side.SELL and bid is not None and ask is not None:
                return self._new(side, max(bid + 1, ask - 1), self._volume(), dt)
        return self._new(side, self._price_at(side, self._diff()), self._volume(), dt)

    def _execute(self, side: Side, dt: int) -> RawMessage:
        depth = self.state.depth(side)
        if not depth:
            side = Side(-side)
            depth = self.state.depth(side)
        best = max(depth) if side == Side.BUY else min(depth)
        # dict order is insertion order, so the first match is the oldest order at the touch
        oid = next(i for i, o in self.state.orders.items() if o.side == side and o.price == best)
        vol = self.state.orders[oid].volume
        if vol > 1 and self.rng.random() >= 0.5:
            vol = int(self.rng.integers(1, vol))
        return self._emit(MsgType.EXECUTE, side, best, vol, oid, dt)

    # -- motif ------------------------------------------------------------------

    def motif_event(self, step: MotifStep) -> RawMessage:
        if step.mtype == MsgType.DELETE:
            live = self.motif_orders[step.side]
            while live and live[0] not in self.state.orders:
                live.popleft()
            alive = [i for i in live if i in self.state.orders]
            if len(alive) >= 2:
                oid = live.popleft()
                order = self.state.orders[oid]
                return self._emit(MsgType.DELETE, step.side, order.price, order.volume, oid, step.dt_ms)
        return self._new(step.side, self._price_at(step.side, step.diff), step.volume, step.dt_ms, motif=True)


def generate(config: SynthConfig) -> Iterator[RawMessage]:
    """Yield ``config.n_messages`` messages; identical seeds give identical streams."""
    eng = _Engine(config, np.random.Generator(np.random.Philox(config.seed)))
    eng.anchor = float(config.tick0)
    emitted = 0
    while emitted < config.n_messages:
        if config.p_motif > 0 and eng.rng.random() < config.p_motif:
            for step in config.motif:
                if emitted >= config.n_messages:
                    return
                yield eng.motif_event(step)
                emitted += 1
        else:
            yield eng.random_event()
            emitted += 1


def write_dataset(messages: Iterable[RawMessage], out_dir) -> tuple[Path, Path]:
    """Write ``messages.csv`` and ``snapshots.csv`` (raw 40-value rows, one per message)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    messages = list(messages)
    msg_path, snap_path = out_dir / "messages.csv", out_dir / "snapshots.csv"
    try:
        snaps = [snap for _, snap in replay(messages)]
    except BookError as exc:
        raise DataError(f"synthetic stream does not replay: {exc}") from exc
    write_feed_csv(messages, msg_path)
    with open(snap_path, "w") as fh:
        for snap in snaps:
            fh.write(",".join(str(int(v)) for v in snap) + "\n")
    return msg_path, snap_path


def read_snapshots(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if not text:
        return np.zeros((0, 40))
    return np.loadtxt(path, delimiter=",", ndmin=2)
