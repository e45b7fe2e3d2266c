"""Transformer encoder over message sequences.

Inputs per position: a token id, scaled price and volume channels, a 40-value
book snapshot (optionally masked), and the cumulative time in milliseconds that
drives a rotary position encoding inside every attention layer. Outputs are
token logits plus three sigmoid-bounded regressors (price, volume, time) that
read the concatenation of the logits and the final hidden state.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

REGRESSORS = ("price", "volume", "time")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 512
    dropout: float = 0.1
    snapshot_dim: int = 40
    rope_base: float = 10000.0
    head_hidden: int = 64
    midprice_classes: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room beyond the specials")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"head dim {self.d_model // self.n_heads} must be even for rotary pairs")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if min(self.n_layers, self.d_ff, self.max_seq_len, self.head_hidden) < 1:
            raise ConfigError("layer counts and widths must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelInputs:
    """Batched encoder inputs, all with leading shape (B, S).

    ``snapshot_mask`` marks positions whose snapshot is hidden; ``valid`` marks
    real (non-PAD) positions.
    """

    tokens: np.ndarray
    price: np.ndarray
    volume: np.ndarray
    snapshots: np.ndarray
    cum_time: np.ndarray
    snapshot_mask: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        b, s = self.tokens.shape
        self.price = np.asarray(self.price, dtype=np.float64).reshape(b, s)
        self.volume = np.asarray(self.volume, dtype=np.float64).reshape(b, s)
        self.cum_time = np.asarray(self.cum_time, dtype=np.float64).reshape(b, s)
        snaps = np.asarray(self.snapshots, dtype=np.float64)
        if snaps.shape[:2] != (b, s) and snaps.shape[:1] == (s,) and b == 1:
            snaps = snaps[None]
        if snaps.ndim != 3 or snaps.shape[:2] != (b, s):
            raise ShapeError(f"snapshots {snaps.shape} do not match tokens {self.tokens.shape}")
        self.snapshots = snaps
        self.snapshot_mask = (
            np.zeros((b, s), dtype=bool)
            if self.snapshot_mask is None
            else np.asarray(self.snapshot_mask, dtype=bool).reshape(b, s)
        )
        self.valid = np.ones((b, s), dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool).reshape(b, s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


@dataclass
class EncoderOutput:
    hidden: Tensor
    token_logits: Tensor
    regress: dict[str, Tensor] = field(default_factory=dict)

    @property
    def price_pred(self) -> Tensor:
        return self.regress["price"]

    @property
    def volume_pred(self) -> Tensor:
        return self.regress["volume"]

    @property
    def time_pred(self) -> Tensor:
        return self.regress["time"]


# --------------------------------------------------------------------------- layers


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float, dtype, bias: bool = True):
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layernorm(x, self.gamma, self.beta, self.eps)


# --------------------------------------------------------------------------- rotary encoding


def rope_angles(cum_time: np.ndarray, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of angles t * base**(-2i/head_dim), shape cum_time.shape + (head_dim/2,)."""
    if head_dim % 2:
        raise ConfigError(f"head dim {head_dim} must be even for rotary pairs")
    theta = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    ang = np.asarray(cum_time, dtype=np.float64)[..., None] * theta
    return np.cos(ang), np.sin(ang)


def rotate(x: np.ndarray, t, base: float = 10000.0) -> np.ndarray:
    """Rotate the last axis of plain array ``x`` by cumulative time ``t`` (broadcast over leading axes)."""
    x = np.asarray(x)
    cos, sin = rope_angles(t, x.shape[-1], base)
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)), dtype=np.result_type(x, np.float64))
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def continuous_rope(q: Tensor, k: Tensor, cum_time: np.ndarray, base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Rotate (B, H, S, d_h) queries and keys by per-position cumulative time (B, S)."""
    if q.shape[-1] % 2:
        raise ConfigError(f"head dim {q.shape[-1]} must be even for rotary pairs")
    cos, sin = rope_angles(cum_time, q.shape[-1], base)
    cos, sin = cos[:, None], sin[:, None]
    return ag.rotate_pairs(q, cos, sin), ag.rotate_pairs(k, cos, sin)


# --------------------------------------------------------------------------- encoder


class Attention(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        d = cfg.d_model
        self.cfg = cfg
        self.wq = Linear(d, d, rng, cfg.init_std, dtype)
        self.wk = Linear(d, d, rng, cfg.init_std, dtype)
        self.wv = Linear(d, d, rng, cfg.init_std, dtype)
        self.wo = Linear(d, d, rng, cfg.init_std, dtype)

    def _heads(self, x: Tensor, b: int, s: int) -> Tensor:
        return ag.transpose(x.reshape(b, s, self.cfg.n_heads, self.cfg.head_dim), (0, 2, 1, 3))

    def __call__(self, x: Tensor, cum_time, blocked: np.ndarray, rng) -> Tensor:
        b, s, d = x.shape
        q, k = continuous_rope(self._heads(self.wq(x), b, s), self._heads(self.wk(x), b, s), cum_time, self.cfg.rope_base)
        v = self._heads(self.wv(x), b, s)
        scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / math.sqrt(self.cfg.head_dim))
        attn = ag.softmax(ag.mask_fill(scores, blocked, -1e9), axis=-1)
        attn = ag.dropout(attn, self.cfg.dropout, rng, self.training)
        ctx = ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)).reshape(b, s, d)
        return self.wo(ctx)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        self.attn = Attention(cfg, rng, dtype)
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng, cfg.init_std, dtype)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng, cfg.init_std, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)

    def __call__(self, x: Tensor, cum_time, blocked, rng) -> Tensor:
        p = self.cfg.dropout
        x = self.ln1(x + ag.dropout(self.attn(x, cum_time, blocked, rng), p, rng, self.training))
        h = ag.dropout(ag.gelu(self.ff1(x)), p, rng, self.training)
        return self.ln2(x + ag.dropout(self.ff2(h), p, rng, self.training))


class RegressionHead(Module):
    def __init__(self, d_in: int, hidden: int, rng, std, dtype):
        self.fc1 = Linear(d_in, hidden, rng, std, dtype)
        self.fc2 = Linear(hidden, 1, rng, std, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.fc2(ag.gelu(self.fc1(x)))
        return ag.sigmoid(y.reshape(y.shape[:-1]))


class LobModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        dtype = dtype or ag.get_default_dtype()
        rng = np.random.default_rng(seed)
        d, std = cfg.d_model, cfg.init_std
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.tok_emb = _param(rng.normal(0.0, std, (cfg.vocab_size, d)), dtype)
        self.pos_emb = _param(rng.normal(0.0, std, (cfg.max_seq_len, d)), dtype)
        self.w_price = _param(rng.normal(0.0, std, d), dtype)
        self.w_volume = _param(rng.normal(0.0, std, d), dtype)
        self.snap_proj = Linear(cfg.snapshot_dim, d, rng, std, dtype)
        self.snap_gate = Linear(d, d, rng, std, dtype)
        self.snap_mask_vec = _param(rng.normal(0.0, std, cfg.snapshot_dim), dtype)
        self.emb_ln = LayerNorm(d, dtype)
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.token_head = Linear(d, cfg.vocab_size, rng, std, dtype)
        self.heads = [RegressionHead(cfg.vocab_size + d, cfg.head_hidden, rng, std, dtype) for _ in REGRESSORS]
        self.midprice_head = Linear(d, cfg.midprice_classes, rng, std, dtype) if cfg.midprice_classes else None
        self.dropout_rng = np.random.default_rng(seed + 1)

    def attach_midprice_head(self, n_classes: int = 3, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.cfg = ModelConfig.from_dict({**self.cfg.to_dict(), "midprice_classes": n_classes})
        self.midprice_head = Linear(self.cfg.d_model, n_classes, rng, self.cfg.init_std, self.dtype)

    # -- pieces -----------------------------------------------------------------

    def _const(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def embed(self, inp: ModelInputs) -> Tensor:
        b, s = inp.shape
        if s > self.cfg.max_seq_len:
            raise ShapeError(f"sequence length {s} exceeds max_seq_len {self.cfg.max_seq_len}")
        if inp.snapshots.shape[-1] != self.cfg.snapshot_dim:
            raise ShapeError(f"snapshot width {inp.snapshots.shape[-1]} != {self.cfg.snapshot_dim}")
        e = ag.gather(self.tok_emb, inp.tokens)
        e = e + self._const(inp.price[..., None]) * self.w_price
        e = e + self._const(inp.volume[..., None]) * self.w_volume
        e = e + ag.getitem(self.pos_emb, slice(0, s))
        keep = self._const(~inp.snapshot_mask[..., None])
        snap = self._const(inp.snapshots) * keep + (1.0 - keep) * self.snap_mask_vec
        proj = self.snap_proj(snap)
        e = e + ag.sigmoid(self.snap_gate(proj)) * proj
        return ag.dropout(self.emb_ln(e), self.cfg.dropout, self.dropout_rng, self.training)

    def attention_block(self, inp: ModelInputs, causal: bool) -> np.ndarray:
        """Boolean (B, 1, S, S) array, True where a query may not attend to a key."""
        b, s = inp.shape
        blocked = np.broadcast_to(~inp.valid[:, None, None, :], (b, 1, s, s))
        if causal:
            blocked = blocked | np.triu(np.ones((s, s), dtype=bool), k=1)
        return np.ascontiguousarray(blocked)

    def encode(self, inp: ModelInputs, causal: bool = False) -> Tensor:
        x = self.embed(inp)
        blocked = self.attention_block(inp, causal)
        for layer in self.layers:
            x = layer(x, inp.cum_time, blocked, self.dropout_rng)
        return x

    def heads_at(self, hidden: Tensor) -> EncoderOutput:
        logits = self.token_head(hidden)
        joint = ag.concat([logits, hidden], axis=-1)
        return EncoderOutput(hidden, logits, {name: head(joint) for name, head in zip(REGRESSORS, self.heads)})

    def forward(self, inp: ModelInputs, causal: bool = False, positions=None) -> EncoderOutput:
        """Run the encoder; ``positions`` = (batch_idx, seq_idx) restricts the heads to those rows."""
        hidden = self.encode(inp, causal)
        if positions is not None:
            hidden = ag.getitem(hidden, tuple(np.asarray(p) for p in positions))
        return self.heads_at(hidden)

    __call__ = forward

    def midprice_logits(self, inp: ModelInputs, causal: bool = False) -> Tensor:
        if self.midprice_head is None:
            raise ConfigError("model has no mid-price head; call attach_midprice_head first")
        hidden = self.encode(inp, causal)
        last = inp.valid.shape[1] - 1 - np.argmax(inp.valid[:, ::-1], axis=1)
        return self.midprice_head(ag.getitem(hidden, (np.arange(len(last)), last)))

    # -- weights ----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
