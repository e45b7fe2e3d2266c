"""Pretraining by masked message modeling, plus the two fine-tuning tasks.

* ``mmm``: BERT-style corruption of ~15% of messages; 90% of snapshots are
  hidden independently. Bidirectional attention.
* ``next_msg``: a prefix of random length is visible under causal attention,
  and the outputs at its last position predict the first hidden message.
* ``midprice``: a window ending at t is classified into down/flat/up moves of
  the average mid-price over the next h messages.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DataError, TrainingDiverged
from .model import LobModel, ModelInputs, REGRESSORS
from .optim import AdamW, CosineWarmRestarts
from .preprocess import Preprocessed, SeqBatch, gather_windows, window_starts
from .tokenizer import MASK_ID, PAD_ID, SPECIALS

PHASES = ("mmm", "next_msg", "midprice")
HORIZONS = (10, 50, 100)
METRIC_COLUMNS = ("step", "phase", "loss_total", "loss_token", "loss_price", "loss_volume", "loss_time", "val_metric", "lr")


# --------------------------------------------------------------------------- loss weights


@dataclass(frozen=True)
class LossWeights:
    token: float = 5.0
    price: float = 1.0
    volume: float = 1.0
    time: float = 1.0
    recalibrated: bool = False

    def __post_init__(self):
        if min(self.token, self.price, self.volume, self.time) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")

    def regressor(self, name: str) -> float:
        return getattr(self, name)


def recalibrate_weights(weights: LossWeights, ema: dict[str, float]) -> LossWeights:
    """Rescale the regression weights so their weighted EMA losses coincide; allowed once per run.

    ``ema`` holds running averages of the *weighted* regression terms.
    """
    if weights.recalibrated:
        raise ConfigError("loss weights were already recalibrated in this run")
    vals = {k: float(ema[k]) for k in REGRESSORS}
    if min(vals.values()) <= 0:
        raise ValueError(f"EMA losses must be positive to recalibrate, got {vals}")
    target = sum(vals.values()) / len(vals)
    new = {k: weights.regressor(k) * target / vals[k] for k in REGRESSORS}
    return replace(weights, recalibrated=True, **new)


# --------------------------------------------------------------------------- MMM


@dataclass
class MmmBatch:
    inputs: ModelInputs
    message_mask: np.ndarray
    snapshot_mask: np.ndarray
    target_tokens: np.ndarray
    targets: dict[str, np.ndarray]

    @property
    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.message_mask)

    @property
    def n_masked(self) -> int:
        return int(self.message_mask.sum())


def make_mmm_batch(
    seqs: SeqBatch,
    vocab_size: int,
    rng: np.random.Generator,
    mask_rate: float = 0.15,
    snapshot_mask_rate: float = 0.9,
    corruption: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> MmmBatch:
    """Corrupt messages and hide snapshots.

    Masked positions are chosen independently with ``mask_rate`` among valid
    positions; ``corruption`` splits them into [MASK] / random token /
    unchanged. [MASK]-substituted positions also lose their continuous channels.
    """
    if not (0 <= mask_rate <= 1 and 0 <= snapshot_mask_rate <= 1):
        raise ConfigError("mask rates must lie in [0, 1]")
    if len(corruption) != 3 or min(corruption) < 0 or abs(sum(corruption) - 1) > 1e-9:
        raise ConfigError(f"corruption split must be 3 probabilities summing to 1, got {corruption}")
    shape = seqs.tokens.shape
    msg_mask = (rng.random(shape) < mask_rate) & seqs.valid
    snap_mask = (rng.random(shape) < snapshot_mask_rate) & seqs.valid
    kind = rng.random(shape)
    as_mask = msg_mask & (kind < corruption[0])
    as_random = msg_mask & ~as_mask & (kind < corruption[0] + corruption[1])

    tokens = seqs.tokens.copy()
    tokens[as_mask] = MASK_ID
    n_random = int(as_random.sum())
    if n_random:
        tokens[as_random] = rng.integers(len(SPECIALS), vocab_size, n_random)
    price = np.where(as_mask, 0.0, seqs.price)
    volume = np.where(as_mask, 0.0, seqs.volume)

    b, s = np.nonzero(msg_mask)
    return MmmBatch(
        inputs=seqs.inputs(tokens=tokens, price=price, volume=volume, snapshot_mask=snap_mask),
        message_mask=msg_mask,
        snapshot_mask=snap_mask,
        target_tokens=seqs.tokens[b, s],
        targets={"price": seqs.price[b, s], "volume": seqs.volume[b, s], "time": seqs.time[b, s]},
    )


@dataclass
class LossParts:
    total: ag.Tensor
    terms: dict[str, float]

    def row(self) -> dict[str, float]:
        return {"loss_total": self.total.item(), **{f"loss_{k}": v for k, v in self.terms.items()}}


def supervised_loss(out, target_tokens: np.ndarray, targets: dict[str, np.ndarray], weights: LossWeights) -> LossParts:
    """w_token * CE + sum_j w_j * MSE_j over the rows the heads were evaluated at."""
    if len(target_tokens) == 0:
        raise DataError("no supervised positions in batch")
    ce = ag.cross_entropy(out.token_logits, target_tokens)
    total = ce * weights.token
    terms = {"token": ce.item()}
    for name in REGRESSORS:
        term = ag.mse(out.regress[name], targets[name])
        total = total + term * weights.regressor(name)
        terms[name] = term.item()
    return LossParts(total, terms)


def mmm_loss(out, batch: MmmBatch, weights: LossWeights) -> LossParts:
    if batch.n_masked == 0:
        raise DataError("MMM batch has no masked positions")
    return supervised_loss(out, batch.target_tokens, batch.targets, weights)


# --------------------------------------------------------------------------- next message


@dataclass
class NextMessageBatch:
    inputs: ModelInputs
    split: np.ndarray
    target_tokens: np.ndarray
    targets: dict[str, np.ndarray]

    @property
    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        return np.arange(len(self.split)), self.split - 1


def next_message_batch(seqs: SeqBatch, rng: np.random.Generator, split: np.ndarray | int | None = None) -> NextMessageBatch:
    """Hide everything from a split index u in [S/4, S-1] on; the target is message u."""
    b, s = seqs.tokens.shape
    if s < 2:
        raise DataError("next-message sequences need at least 2 messages")
    if split is None:
        split = rng.integers(max(s // 4, 1), s, b)
    split = np.broadcast_to(np.asarray(split, dtype=np.int64), (b,)).copy()
    if split.min() < 1 or split.max() > s - 1:
        raise ValueError(f"split indices must lie in [1, {s - 1}]")
    visible = np.arange(s)[None, :] < split[:, None]
    rows = np.arange(b)
    return NextMessageBatch(
        inputs=seqs.inputs(
            tokens=np.where(visible, seqs.tokens, PAD_ID),
            price=np.where(visible, seqs.price, 0.0),
            volume=np.where(visible, seqs.volume, 0.0),
            valid=visible & seqs.valid,
        ),
        split=split,
        target_tokens=seqs.tokens[rows, split],
        targets={"price": seqs.price[rows, split], "volume": seqs.volume[rows, split], "time": seqs.time[rows, split]},
    )


# --------------------------------------------------------------------------- mid-price


def tau(h: int) -> float:
    """Flat-move threshold in ticks: round(100 * log2(h / 10)) / 1000."""
    if h <= 0:
        raise ValueError(f"horizon must be positive, got {h}")
    return math.floor(100 * math.log2(h / 10) + 0.5) / 1000


def midprice_labels(mid: np.ndarray, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Ternary labels of the mean mid over the next ``h`` messages vs the current mid.

    Returns (labels in {-1, 0, 1}, defined) where positions without ``h``
    future mids, or touching a one-sided book, are undefined (label 0).
    """
    mid = np.asarray(mid, dtype=np.float64)
    n = len(mid)
    labels = np.zeros(n, dtype=np.int8)
    defined = np.zeros(n, dtype=bool)
    if n <= h:
        return labels, defined
    finite = np.isfinite(mid)
    csum = np.concatenate(([0.0], np.cumsum(np.where(finite, mid, 0.0))))
    cbad = np.concatenate(([0], np.cumsum(~finite)))
    t = np.arange(n - h)
    future = (csum[t + h + 1] - csum[t + 1]) / h
    ok = finite[t] & (cbad[t + h + 1] - cbad[t + 1] == 0)
    drift = np.where(ok, future - np.where(ok, mid[t], 0.0), 0.0)
    thr = tau(h)
    labels[t] = np.where(drift > thr, 1, np.where(drift < -thr, -1, 0))
    defined[t] = ok
    return labels, defined


@dataclass
class MidpriceBatch:
    inputs: ModelInputs
    labels: np.ndarray  # class index = label + 1


def midprice_samples(data: Preprocessed, h: int, seq_len: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """End indices t (window [t-S+1, t]) with a defined label, and their labels."""
    labels, defined = midprice_labels(data.mid, h)
    ends = np.arange(seq_len - 1, len(data), stride)
    ends = ends[defined[ends]]
    return ends, labels[ends]


def midprice_batch(data: Preprocessed, ends: np.ndarray, labels: np.ndarray, seq_len: int) -> MidpriceBatch:
    seqs = gather_windows(data, np.asarray(ends) - seq_len + 1, seq_len)
    return MidpriceBatch(seqs.inputs(), np.asarray(labels, dtype=np.int64) + 1)


# --------------------------------------------------------------------------- loop


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "mmm"
    steps: int = 2000
    batch_size: int = 32
    seq_len: int = 32
    stride: int | None = None
    lr_max: float = 5e-5
    lr_min: float = 5e-6
    t0: int = 400
    t_mult: int = 2
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    snapshot_mask_rate: float = 0.9
    corruption: tuple[float, float, float] = (0.8, 0.1, 0.1)
    w_token: float = 5.0
    recalibrate: bool = True
    ema_decay: float = 0.9
    eval_every: int = 0
    val_batches: int = 4
    horizon: int = 10
    midprice_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("steps must be >= 0, batch_size >= 1 and seq_len >= 2")
        if self.horizon not in HORIZONS:
            raise ConfigError(f"horizon must be one of {HORIZONS}")
        if self.eval_every < 0 or self.val_batches < 1:
            raise ConfigError("eval_every must be >= 0 and val_batches >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruption"] = list(self.corruption)
        return d


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val: float | None = None
    best_step: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def validations(self) -> list[dict]:
        return [r for r in self.history if r["val_metric"] != ""]


class _Sampler:
    """Epoch-wise shuffled minibatches over a fixed pool of sample indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise DataError("no training samples; the dataset is shorter than one window")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.epoch, self._order, self._pos = 0, rng.permutation(n), 0

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.n / self.batch_size))

    def next(self) -> np.ndarray:
        if self._pos >= self.n:
            self.epoch += 1
            self._order, self._pos = self.rng.permutation(self.n), 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


class Trainer:
    def __init__(self, model: LobModel, cfg: TrainConfig, train: Preprocessed, val: Preprocessed | None = None):
        self.model, self.cfg, self.train_data, self.val_data = model, cfg, train, val
        self.vocab_size = model.cfg.vocab_size
        if cfg.phase == "midprice" and model.midprice_head is None:
            model.attach_midprice_head(3, seed=cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.pool = self._pool(train)
        self.weights = LossWeights(token=cfg.w_token)
        self.schedule = CosineWarmRestarts(cfg.lr_max, cfg.lr_min, cfg.t0, cfg.t_mult)
        self.opt = AdamW(model.named_parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)

    def _pool(self, data: Preprocessed):
        c = self.cfg
        if c.phase == "midprice":
            return midprice_samples(data, c.horizon, c.seq_len, c.midprice_stride)
        return window_starts(len(data), c.seq_len, c.stride)

    def _pool_size(self, pool) -> int:
        return len(pool[0]) if isinstance(pool, tuple) else len(pool)

    def loss(self, data: Preprocessed, pool, idx: np.ndarray, rng: np.random.Generator) -> LossParts:
        c, m = self.cfg, self.model
        if c.phase == "midprice":
            ends, labels = pool
            batch = midprice_batch(data, ends[idx], labels[idx], c.seq_len)
            ce = ag.cross_entropy(m.midprice_logits(batch.inputs), batch.labels)
            return LossParts(ce, {"token": ce.item()})
        seqs = gather_windows(data, pool[idx], c.seq_len)
        if c.phase == "mmm":
            batch = make_mmm_batch(seqs, self.vocab_size, rng, c.mask_rate, c.snapshot_mask_rate, c.corruption)
            if batch.n_masked == 0:
                return None
            out = m(batch.inputs, causal=False, positions=batch.positions)
            return mmm_loss(out, batch, self.weights)
        nb = next_message_batch(seqs, rng)
        out = m(nb.inputs, causal=True, positions=nb.positions)
        return supervised_loss(out, nb.target_tokens, nb.targets, self.weights)

    def validate(self) -> float:
        data = self.val_data if self.val_data is not None else self.train_data
        pool = self._pool(data) if self.val_data is not None else self.pool
        n = self._pool_size(pool)
        if n == 0:
            raise DataError("validation split is shorter than one window")
        rng = np.random.default_rng(self.cfg.seed + 7919)
        self.model.eval()
        losses = []
        with ag.no_grad():
            for i in range(min(self.cfg.val_batches, math.ceil(n / self.cfg.batch_size))):
                idx = np.arange(i * self.cfg.batch_size, min(n, (i + 1) * self.cfg.batch_size))
                parts = self.loss(data, pool, idx, rng)
                if parts is not None:
                    losses.append(parts.total.item())
        self.model.train()
        return float(np.mean(losses)) if losses else float("nan")

    def run(self, log_path=None) -> TrainResult:
        c = self.cfg
        sampler = _Sampler(self._pool_size(self.pool), c.batch_size, self.rng)
        result = TrainResult(weights=self.weights)
        ema: dict[str, float] = {}
        best_state = last_good = self.model.state_dict()
        self.model.train()
        for step in range(c.steps):
            lr = self.schedule(step)
            parts = self.loss(self.train_data, self.pool, sampler.next(), self.rng)
            if parts is None:
                continue
            loss_val = parts.total.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"loss became {loss_val} at step {step + 1}", last_good=last_good)
            self.opt.zero_grad()
            parts.total.backward()
            try:
                self.opt.step(lr)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"step {step + 1}: {exc}", last_good=last_good) from None

            for k in REGRESSORS:
                if k in parts.terms:
                    v = parts.terms[k] * self.weights.regressor(k)
                    ema[k] = v if k not in ema else c.ema_decay * ema[k] + (1 - c.ema_decay) * v
            if (
                c.recalibrate
                and c.phase != "midprice"
                and not self.weights.recalibrated
                and step + 1 >= sampler.steps_per_epoch
                and ema
                and min(ema.values()) > 0
            ):
                self.weights = recalibrate_weights(self.weights, ema)
                result.weights = self.weights

            row = {
                "step": step + 1,
                "phase": c.phase,
                **{col: "" for col in METRIC_COLUMNS[2:]},
                **parts.row(),
                "lr": lr,
            }
            if c.eval_every and (step + 1) % c.eval_every == 0:
                val = self.validate()
                row["val_metric"] = val
                last_good = self.model.state_dict()
                if result.best_val is None or val < result.best_val:
                    result.best_val, result.best_step = val, step + 1
                    best_state = last_good
            result.history.append(row)

        if result.best_step is not None:
            self.model.load_state_dict(best_state)
        self.model.eval()
        if log_path is not None:
            write_metrics(result.history, log_path)
        return result


def train(phase: str, model: LobModel, train_data: Preprocessed, val_data=None, log_path=None, **overrides) -> TrainResult:
    cfg = TrainConfig(phase=phase, **overrides)
    return Trainer(model, cfg, train_data, val_data).run(log_path)


def write_metrics(history: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k, "") == "" else row[k]) for k in METRIC_COLUMNS})


# --------------------------------------------------------------------------- diagnostics


def masked_token_accuracy(model: LobModel, data: Preprocessed, cfg: TrainConfig, n_batches: int = 8, seed: int = 0) -> float:
    """Argmax accuracy at MMM-masked positions, dropout off."""
    rng = np.random.default_rng(seed)
    starts = window_starts(len(data), cfg.seq_len, cfg.stride)
    hits = total = 0
    model.eval()
    with ag.no_grad():
        for i in range(n_batches):
            idx = rng.choice(len(starts), min(cfg.batch_size, len(starts)), replace=False)
            batch = make_mmm_batch(
                gather_windows(data, starts[idx], cfg.seq_len),
                model.cfg.vocab_size, rng, cfg.mask_rate, cfg.snapshot_mask_rate, cfg.corruption,
            )
            if batch.n_masked == 0:
                continue
            out = model(batch.inputs, causal=False, positions=batch.positions)
            hits += int((out.token_logits.data.argmax(axis=-1) == batch.target_tokens).sum())
            total += batch.n_masked
    return hits / total if total else float("nan")
