"""Feed parsing and limit-order-book reconstruction.

Messages arrive as LOBSTER-style rows ``ts_ms,type,side,price,volume,order_id``
(CSV) or as fixed 28-byte binary records. :func:`apply_message` is the book
state machine; it mutates the state in place and returns the 40-value snapshot
of the book immediately after the message.
"""
from __future__ import annotations

import csv
import heapq
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import BookError, FeedError

N_LEVELS = 10
SNAPSHOT_DIM = 4 * N_LEVELS
EMPTY_PRICE = -1

CSV_HEADER = ("ts_ms", "type", "side", "price", "volume", "order_id")
BINARY_MAGIC = b"LOBF"
BINARY_VERSION = 1
_RECORD = struct.Struct("<QBbqII2x")
assert _RECORD.size == 28


class MsgType(IntEnum):
    NEW = 1
    EDIT = 2
    DELETE = 3
    EXECUTE = 4
    HIDDEN = 5


class Side(IntEnum):
    BUY = 1
    SELL = -1


@dataclass(frozen=True, slots=True)
class RawMessage:
    ts_ms: int
    mtype: MsgType
    side: Side
    price: int
    volume: int
    order_id: int

    def to_row(self) -> tuple[int, int, int, int, int, int]:
        return (self.ts_ms, int(self.mtype), int(self.side), self.price, self.volume, self.order_id)


@dataclass(slots=True)
class RestingOrder:
    side: Side
    price: int
    volume: int


@dataclass
class BookState:
    """Resting orders by id plus aggregated depth per side (price -> volume)."""

    orders: dict[int, RestingOrder] = field(default_factory=dict)
    bids: dict[int, int] = field(default_factory=dict)
    asks: dict[int, int] = field(default_factory=dict)

    def copy(self) -> "BookState":
        return BookState(
            {oid: RestingOrder(o.side, o.price, o.volume) for oid, o in self.orders.items()},
            dict(self.bids),
            dict(self.asks),
        )

    def depth(self, side: Side) -> dict[int, int]:
        return self.bids if side == Side.BUY else self.asks


# --------------------------------------------------------------------------- parsing


def _check_message(ts, mtype, side, price, volume, order_id, line) -> RawMessage:
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise FeedError(f"unknown message type {mtype}", line) from None
    try:
        side = Side(side)
    except ValueError:
        raise FeedError(f"side must be 1 or -1, got {side}", line) from None
    if ts < 0:
        raise FeedError(f"negative timestamp {ts}", line)
    min_volume = 0 if mtype in (MsgType.EDIT, MsgType.DELETE) else 1
    if volume < min_volume:
        raise FeedError(f"volume {volume} below {min_volume} for {mtype.name}", line)
    if order_id < 0:
        raise FeedError(f"negative order id {order_id}", line)
    return RawMessage(ts, mtype, side, price, volume, order_id)


def _parse_csv(path: Path) -> Iterator[RawMessage]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = None
        width = 6
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if columns is None:
                columns = list(range(6))
                if row[0].strip() == "ts_ms":
                    # named header: extra trailing columns (e.g. ``mode``) are tolerated
                    names = [c.strip() for c in row]
                    missing = [c for c in CSV_HEADER if c not in names]
                    if missing:
                        raise FeedError(f"header lacks columns {missing}", lineno)
                    columns = [names.index(c) for c in CSV_HEADER]
                    width = len(names)
                    continue
            if len(row) != width:
                raise FeedError(f"expected {width} fields, got {len(row)}", lineno)
            try:
                vals = [int(row[i]) for i in columns]
            except (ValueError, IndexError):
                raise FeedError(f"non-integer field in {row!r}", lineno) from None
            yield _check_message(*vals, line=lineno)


def _parse_binary(path: Path) -> Iterator[RawMessage]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if not head:
            return
        if len(head) < 8 or head[:4] != BINARY_MAGIC:
            raise FeedError("bad magic, not a LOBF file")
        (version,) = struct.unpack("<I", head[4:])
        if version != BINARY_VERSION:
            raise FeedError(f"unsupported binary feed version {version}")
        recno = 0
        while True:
            buf = fh.read(_RECORD.size)
            if not buf:
                return
            recno += 1
            if len(buf) < _RECORD.size:
                raise FeedError(f"truncated record ({len(buf)} of {_RECORD.size} bytes)", recno)
            yield _check_message(*_RECORD.unpack(buf), line=recno)


def parse_feed(path, format: str = "csv") -> Iterator[RawMessage]:
    """Yield messages in file order, enforcing non-decreasing timestamps."""
    path = Path(path)
    if format == "csv":
        rows = _parse_csv(path)
    elif format == "binary":
        rows = _parse_binary(path)
    else:
        raise ValueError(f"unknown feed format {format!r}")
    prev = None
    for msg in rows:
        if prev is not None and msg.ts_ms < prev.ts_ms:
            raise FeedError(f"timestamp went backwards: {msg.ts_ms} after {prev.ts_ms}")
        prev = msg
        yield msg


def detect_format(path) -> str:
    with open(path, "rb") as fh:
        return "binary" if fh.read(4) == BINARY_MAGIC else "csv"


def write_feed_csv(messages: Iterable[RawMessage], path, extra: dict[str, list] | None = None) -> int:
    """Write messages as feed CSV; ``extra`` appends named columns. Returns the row count."""
    messages = list(messages)
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        if not messages:
            return 0
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER + tuple(extra))
        for i, m in enumerate(messages):
            writer.writerow(m.to_row() + tuple(col[i] for col in extra.values()))
    return len(messages)


def write_feed_binary(messages: Iterable[RawMessage], path) -> int:
    n = 0
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<I", BINARY_VERSION))
        for m in messages:
            fh.write(_RECORD.pack(*m.to_row()))
            n += 1
    return n


# --------------------------------------------------------------------------- book


def best_quotes(state: BookState) -> tuple[int | None, int | None]:
    best_bid = max(state.bids) if state.bids else None
    best_ask = min(state.asks) if state.asks else None
    return best_bid, best_ask


def snapshot(state: BookState) -> np.ndarray:
    """10-level snapshot ordered [ask_p1, ask_v1, bid_p1, bid_v1, ...]; absent levels are (-1, 0)."""
    out = np.zeros(SNAPSHOT_DIM, dtype=np.float64)
    out[0::2] = EMPTY_PRICE
    asks = heapq.nsmallest(N_LEVELS, state.asks)
    bids = heapq.nlargest(N_LEVELS, state.bids)
    for i, p in enumerate(asks):
        out[4 * i] = p
        out[4 * i + 1] = state.asks[p]
    for i, p in enumerate(bids):
        out[4 * i + 2] = p
        out[4 * i + 3] = state.bids[p]
    return out


def _remove_volume(state: BookState, oid: int, order: RestingOrder, amount: int) -> None:
    depth = state.depth(order.side)
    left = depth[order.price] - amount
    if left > 0:
        depth[order.price] = left
    else:
        del depth[order.price]
    order.volume -= amount
    if order.volume == 0:
        del state.orders[oid]


def _resting(state: BookState, msg: RawMessage) -> RestingOrder:
    order = state.orders.get(msg.order_id)
    if order is None:
        raise BookError(f"{msg.mtype.name} references unknown order id {msg.order_id}")
    if order.side != msg.side:
        raise BookError(f"{msg.mtype.name} side {msg.side.name} does not match order {msg.order_id}")
    return order


def apply_message(state: BookState, msg: RawMessage) -> tuple[BookState, np.ndarray]:
    """Apply ``msg`` to ``state`` in place; return the state and the post-message snapshot."""
    t = msg.mtype
    if t == MsgType.NEW:
        if msg.order_id in state.orders:
            raise BookError(f"duplicate order id {msg.order_id}")
        if msg.volume < 1:
            raise BookError(f"NEW order {msg.order_id} with volume {msg.volume}")
        bid, ask = best_quotes(state)
        if msg.side == Side.BUY and ask is not None and msg.price >= ask:
            raise BookError(f"NEW buy at {msg.price} crosses best ask {ask}")
        if msg.side == Side.SELL and bid is not None and msg.price <= bid:
            raise BookError(f"NEW sell at {msg.price} crosses best bid {bid}")
        state.orders[msg.order_id] = RestingOrder(msg.side, msg.price, msg.volume)
        depth = state.depth(msg.side)
        depth[msg.price] = depth.get(msg.price, 0) + msg.volume
    elif t == MsgType.EDIT:
        order = _resting(state, msg)
        if msg.price != order.price:
            raise BookError(f"EDIT of order {msg.order_id} changes price {order.price} -> {msg.price}")
        if msg.volume < 0:
            raise BookError(f"EDIT to negative volume {msg.volume}")
        _remove_volume(state, msg.order_id, order, order.volume - msg.volume)
    elif t == MsgType.DELETE:
        order = _resting(state, msg)
        _remove_volume(state, msg.order_id, order, order.volume)
    elif t == MsgType.EXECUTE:
        order = _resting(state, msg)
        depth = state.depth(order.side)
        best = max(depth) if order.side == Side.BUY else min(depth)
        if order.price != best:
            raise BookError(f"EXECUTE of order {msg.order_id} at {order.price}, best is {best}")
        if msg.price != order.price:
            raise BookError(f"EXECUTE price {msg.price} differs from resting price {order.price}")
        if msg.volume > order.volume:
            raise BookError(f"EXECUTE of {msg.volume} exceeds resting volume {order.volume}")
        _remove_volume(state, msg.order_id, order, msg.volume)
    # HIDDEN leaves the visible book untouched.
    return state, snapshot(state)


def replay(messages: Iterable[RawMessage], state: BookState | None = None) -> Iterator[tuple[RawMessage, np.ndarray]]:
    """Yield (message, snapshot) pairs; a BookError is re-raised with the message index."""
    state = state if state is not None else BookState()
    for i, msg in enumerate(messages):
        try:
            _, snap = apply_message(state, msg)
        except BookError as exc:
            raise BookError(f"message {i}: {exc}") from exc
        yield msg, snap


def mid_price_ticks(snap: np.ndarray) -> float:
    ask, bid = snap[0], snap[2]
    if ask == EMPTY_PRICE or bid == EMPTY_PRICE:
        raise BookError("mid price undefined for a one-sided book")
    return (float(bid) + float(ask)) / 2.0
