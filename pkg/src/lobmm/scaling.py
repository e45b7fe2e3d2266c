"""Continuous transforms for message channels and book snapshots.

Piecewise linear-geometric scaling (PLGS) maps a non-negative raw value onto
[0, 1]: identity up to ``tau_start``, then unit steps whose increments decay
geometrically by ``mu`` so the curve approaches ``tau_max``; inputs past
``tau_clip`` sit on a plateau. Within each unit step the curve is linear,
which makes it continuous and strictly increasing on [0, tau_clip]:

    s(tau_start + n + f) = tau_start + sum_{k<n} mu**k + f * mu**n
    scaled = s / tau_max

The float64 path is what the data pipeline uses. For the price parameters the
true increments drop below one ulp of 1.0 around x = 315, so ``exact=True``
evaluates the same curve in rational arithmetic when strict monotonicity or an
exact inverse matters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .feed import EMPTY_PRICE, MsgType, RawMessage, Side


@dataclass(frozen=True)
class PlgsParams:
    tau_start: float
    tau_max: float
    tau_clip: float

    def __post_init__(self):
        if not (self.tau_max > self.tau_start >= 0):
            raise ValueError(f"need tau_max > tau_start >= 0, got {self}")
        if not self.tau_clip > self.tau_start:
            raise ValueError(f"need tau_clip > tau_start, got {self}")
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"geometric factor {self.mu} outside (0, 1); widen tau_max - tau_start")

    @property
    def mu(self) -> float:
        return 1.0 - 1.0 / (self.tau_max - self.tau_start)

    def to_dict(self) -> dict:
        return {"tau_start": self.tau_start, "tau_max": self.tau_max, "tau_clip": self.tau_clip}


PRICE_PLGS = PlgsParams(10, 20, 1000)
VOLUME_PLGS = PlgsParams(200, 400, 1500)
TIME_PLGS = PlgsParams(1, 50, 250)


def _scalar_or_array(arr: np.ndarray, like):
    return float(arr) if np.ndim(like) == 0 else arr


# --------------------------------------------------------------------------- exact (rational)


def _fr(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(v)


def _exact_terms(p: PlgsParams):
    ts, tm = _fr(p.tau_start), _fr(p.tau_max)
    mu = 1 - 1 / (tm - ts)
    return ts, tm, _fr(p.tau_clip), mu


def _forward_exact(x, p: PlgsParams) -> Fraction:
    ts, tm, clip, mu = _exact_terms(p)
    x = min(_fr(x), clip)
    if x <= ts:
        return x / tm
    u = x - ts
    n = math.floor(u)
    f = u - n
    mun = mu**n
    return (ts + (1 - mun) / (1 - mu) + f * mun) / tm


def _frac_log(v: Fraction) -> float:
    return math.log(v.numerator) - math.log(v.denominator)


def _inverse_exact(y, p: PlgsParams) -> Fraction:
    ts, tm, clip, mu = _exact_terms(p)
    y = _fr(y)
    s = y * tm
    if s <= ts:
        return s
    if y >= _forward_exact(clip, p):
        return clip
    # headroom h = mu**n * (1 - f*(1 - mu)) lies in (mu**(n+1), mu**n]
    h = 1 - (s - ts) * (1 - mu)
    n = max(0, math.floor(_frac_log(h) / _frac_log(mu)))
    while n > 0 and h > mu**n:
        n -= 1
    while h <= mu ** (n + 1):
        n += 1
    f = (1 - h / mu**n) / (1 - mu)
    return min(ts + n + f, clip)


# --------------------------------------------------------------------------- float64


def plgs_forward(x, p: PlgsParams, exact: bool = False):
    """Scale raw ``x`` (scalar or array, >= 0) into [0, 1]."""
    if exact:
        if _fr(x) < 0:
            raise ValueError(f"PLGS input must be >= 0, got {x}")
        return _forward_exact(x, p)
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("PLGS input must be >= 0")
    xc = np.minimum(arr, p.tau_clip)
    u = np.maximum(xc - p.tau_start, 0.0)
    n = np.floor(u)
    mun = p.mu**n
    # tau_start + (1 - mu**n)/(1 - mu) + f*mu**n, rearranged so rounding cannot break monotonicity
    geo = p.tau_max - mun * ((p.tau_max - p.tau_start) - (u - n))
    s = np.where(xc <= p.tau_start, xc, geo)
    return _scalar_or_array(s / p.tau_max, x)


def plateau(p: PlgsParams) -> float:
    return plgs_forward(p.tau_clip, p)


def plgs_inverse(y, p: PlgsParams, exact: bool = False):
    """Inverse of :func:`plgs_forward`; values at or above the plateau map to ``tau_clip``."""
    if exact:
        if not 0 <= _fr(y) <= 1:
            raise ValueError(f"PLGS inverse input must be in [0, 1], got {y}")
        return _inverse_exact(y, p)
    arr = np.asarray(y, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise ValueError("PLGS inverse input must be in [0, 1]")
    s = arr * p.tau_max
    mu = p.mu
    h = np.clip(1.0 - (s - p.tau_start) * (1.0 - mu), np.finfo(np.float64).tiny, 1.0)
    n = np.maximum(np.floor(np.log(h) / np.log(mu)), 0.0)
    f = (1.0 - h / mu**n) / (1.0 - mu)
    # log rounding can land one step off
    lo = f < 0
    n = np.where(lo, n - 1, n)
    hi = f >= 1
    n = np.where(hi, n + 1, n)
    f = np.where(lo | hi, (1.0 - h / mu**n) / (1.0 - mu), f)
    x = p.tau_start + n + np.clip(f, 0.0, 1.0)
    x = np.where(s <= p.tau_start, s, x)
    x = np.where(arr >= plateau(p), p.tau_clip, np.minimum(x, p.tau_clip))
    return _scalar_or_array(x, y)


# --------------------------------------------------------------------------- snapshots


@dataclass(frozen=True)
class SnapshotScalerConfig:
    k: float = 2000.0
    d_max: int = 20
    tick_size: int = 1

    def __post_init__(self):
        if self.k <= 0 or self.d_max < 1 or self.tick_size < 1:
            raise ValueError(f"invalid snapshot scaler config {self}")

    def to_dict(self) -> dict:
        return {"k": self.k, "d_max": self.d_max, "tick_size": self.tick_size}


def scale_snapshot_volume(v_raw, cfg: SnapshotScalerConfig = SnapshotScalerConfig()):
    v = np.asarray(v_raw, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("snapshot volume must be >= 0")
    return _scalar_or_array(-np.expm1(-v / cfg.k), v_raw)


def scale_snapshots(snaps: np.ndarray, cfg: SnapshotScalerConfig = SnapshotScalerConfig()):
    """Scale an (N, 40) array of raw snapshots.

    Returns the scaled array and a boolean (N,) flag marking one-sided books,
    whose price distances are all set to 1.0 because there is no opposite quote.
    """
    snaps = np.atleast_2d(np.asarray(snaps, dtype=np.float64))
    ask_p, ask_v = snaps[:, 0::4], snaps[:, 1::4]
    bid_p, bid_v = snaps[:, 2::4], snaps[:, 3::4]
    best_ask, best_bid = ask_p[:, :1], bid_p[:, :1]
    one_sided = (best_ask[:, 0] == EMPTY_PRICE) | (best_bid[:, 0] == EMPTY_PRICE)

    def dist(delta):
        ticks = np.floor(delta / cfg.tick_size + 0.5) - 1.0
        return np.clip(np.minimum(ticks, cfg.d_max) / cfg.d_max, 0.0, 1.0)

    d_ask = np.where(ask_p == EMPTY_PRICE, 1.0, dist(ask_p - best_bid))
    d_bid = np.where(bid_p == EMPTY_PRICE, 1.0, dist(best_ask - bid_p))
    d_ask[one_sided] = 1.0
    d_bid[one_sided] = 1.0

    out = np.empty_like(snaps)
    out[:, 0::4] = d_ask
    out[:, 1::4] = np.where(ask_p == EMPTY_PRICE, 0.0, scale_snapshot_volume(np.maximum(ask_v, 0), cfg))
    out[:, 2::4] = d_bid
    out[:, 3::4] = np.where(bid_p == EMPTY_PRICE, 0.0, scale_snapshot_volume(np.maximum(bid_v, 0), cfg))
    return out, one_sided


def scale_snapshot_prices(snap: np.ndarray, cfg: SnapshotScalerConfig = SnapshotScalerConfig()):
    """Scale one 40-value snapshot; returns (scaled 40 values, one_sided flag)."""
    out, one_sided = scale_snapshots(np.asarray(snap)[None, :], cfg)
    return out[0], bool(one_sided[0])


# --------------------------------------------------------------------------- message channels


def price_diff_ticks(msg: RawMessage, best_opposing: int | None, clip: float = PRICE_PLGS.tau_clip) -> int:
    """Distance in ticks from the best opposing quote (best ask for buys, best bid for sells).

    Executions and hidden trades are pinned to 0; a missing opposite side gives the clip distance.
    """
    if msg.mtype in (MsgType.EXECUTE, MsgType.HIDDEN):
        return 0
    if best_opposing is None:
        return int(clip)
    diff = best_opposing - msg.price if msg.side == Side.BUY else msg.price - best_opposing
    return int(min(max(diff, 0), clip))


def message_continuous_channels(
    msg: RawMessage,
    prev_ts: int | None,
    best_opposing: int | None,
    price_params: PlgsParams = PRICE_PLGS,
    volume_params: PlgsParams = VOLUME_PLGS,
    time_params: PlgsParams = TIME_PLGS,
) -> tuple[float, float, float]:
    diff = price_diff_ticks(msg, best_opposing, price_params.tau_clip)
    dt = 0 if prev_ts is None else msg.ts_ms - prev_ts
    return (
        plgs_forward(diff, price_params),
        plgs_forward(msg.volume, volume_params),
        plgs_forward(max(dt, 0), time_params),
    )
