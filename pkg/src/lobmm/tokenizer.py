"""One token per message.

A token string joins side, message type, quantized price distance, quantized
volume and a roundness flag with colons, e.g. ``S:1:P3:V100:N`` is a new sell
order 3-4 ticks from the best bid whose volume lies strictly inside [100, 200).
Executions and hidden trades always carry ``P0``.
"""
from __future__ import annotations

import bisect
import itertools
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .feed import BookState, MsgType, RawMessage, Side, apply_message, best_quotes
from .scaling import PRICE_PLGS, VOLUME_PLGS, price_diff_ticks

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
SPECIALS = (PAD, MASK, UNK)
PAD_ID, MASK_ID, UNK_ID = 0, 1, 2

_SIDE_CHAR = {Side.BUY: "B", Side.SELL: "S"}
_CHAR_SIDE = {v: k for k, v in _SIDE_CHAR.items()}
ZERO_PRICE_TYPES = (MsgType.EXECUTE, MsgType.HIDDEN)


@dataclass(frozen=True)
class TokenizerConfig:
    price_levels: tuple[int, ...] = (0, 1, 2, 3, 5, 10)
    volume_levels: tuple[int, ...] = (0, 50, 100, 200)
    price_clip: int = int(PRICE_PLGS.tau_clip)
    volume_clip: int = int(VOLUME_PLGS.tau_clip)

    def __post_init__(self):
        for levels, clip in ((self.price_levels, self.price_clip), (self.volume_levels, self.volume_clip)):
            if not levels or levels[0] != 0 or any(b <= a for a, b in zip(levels, levels[1:])):
                raise ValueError(f"levels must start at 0 and increase strictly: {levels}")
            if clip <= levels[-1]:
                raise ValueError(f"clip {clip} must exceed the last level {levels[-1]}")

    def to_dict(self) -> dict:
        return {
            "price_levels": list(self.price_levels),
            "volume_levels": list(self.volume_levels),
            "price_clip": self.price_clip,
            "volume_clip": self.volume_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(tuple(d["price_levels"]), tuple(d["volume_levels"]), d["price_clip"], d["volume_clip"])


class Bin(NamedTuple):
    index: int
    lower: int
    upper: int
    exact: bool


def quantize(value: int, levels: tuple[int, ...], clip: int) -> Bin:
    """Bin holding ``value``: [level_i, level_{i+1}), the last bin is [level_last, clip]."""
    if value < 0:
        raise ValueError(f"cannot quantize negative value {value}")
    value = min(value, clip)
    i = bisect.bisect_right(levels, value) - 1
    upper = levels[i + 1] if i + 1 < len(levels) else clip
    return Bin(i, levels[i], upper, value == levels[i])


class MsgComponents(NamedTuple):
    side: Side
    mtype: MsgType
    price_bin: int
    volume_bin: int
    round_flag: bool

    def canonical(self) -> "MsgComponents":
        if self.mtype in ZERO_PRICE_TYPES and self.price_bin != 0:
            return self._replace(price_bin=0)
        return self


class MsgToken(NamedTuple):
    token_id: int
    components: MsgComponents


UNKNOWN = None  # decode result for the UNK token


def message_components(
    msg: RawMessage, best_opposing: int | None, cfg: TokenizerConfig = TokenizerConfig()
) -> MsgComponents:
    diff = price_diff_ticks(msg, best_opposing, cfg.price_clip)
    pbin = quantize(diff, cfg.price_levels, cfg.price_clip)
    vbin = quantize(msg.volume, cfg.volume_levels, cfg.volume_clip)
    return MsgComponents(msg.side, msg.mtype, pbin.index, vbin.index, vbin.exact).canonical()


def stringify(c: MsgComponents, cfg: TokenizerConfig = TokenizerConfig()) -> str:
    c = c.canonical()
    return (
        f"{_SIDE_CHAR[c.side]}:{int(c.mtype)}:P{cfg.price_levels[c.price_bin]}"
        f":V{cfg.volume_levels[c.volume_bin]}:{'Y' if c.round_flag else 'N'}"
    )


def parse_token(s: str, cfg: TokenizerConfig = TokenizerConfig()) -> MsgComponents:
    try:
        side, mtype, p, v, flag = s.split(":")
        if p[0] != "P" or v[0] != "V" or flag not in ("Y", "N"):
            raise ValueError
        return MsgComponents(
            _CHAR_SIDE[side],
            MsgType(int(mtype)),
            cfg.price_levels.index(int(p[1:])),
            cfg.volume_levels.index(int(v[1:])),
            flag == "Y",
        )
    except (ValueError, KeyError, IndexError):
        raise ValueError(f"not a message token: {s!r}") from None


def all_components(cfg: TokenizerConfig = TokenizerConfig()) -> list[MsgComponents]:
    """Every (side, type, price bin, volume bin, flag) combination, before canonicalization."""
    return [
        MsgComponents(*combo)
        for combo in itertools.product(
            (Side.BUY, Side.SELL),
            tuple(MsgType),
            range(len(cfg.price_levels)),
            range(len(cfg.volume_levels)),
            (True, False),
        )
    ]


def max_vocab_size(cfg: TokenizerConfig = TokenizerConfig()) -> int:
    return len(SPECIALS) + 2 * len(MsgType) * len(cfg.price_levels) * len(cfg.volume_levels) * 2


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        return cls([ln for ln in lines if ln])


def build_vocab(token_strings: Iterable[str]) -> Vocabulary:
    """Specials first, then the distinct observed tokens in lexicographic order."""
    counts = Counter(t for t in token_strings if t not in SPECIALS)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(list(SPECIALS) + sorted(counts), counts)


def tokenize_messages(messages: Iterable[RawMessage], cfg: TokenizerConfig = TokenizerConfig()) -> list[str]:
    """Token strings for a message stream, replaying the book for price context."""
    state = BookState()
    out = []
    for msg in messages:
        bid, ask = best_quotes(state)
        out.append(stringify(message_components(msg, ask if msg.side == Side.BUY else bid, cfg), cfg))
        apply_message(state, msg)
    return out


def encode(
    msg: RawMessage, best_opposing: int | None, vocab: Vocabulary, cfg: TokenizerConfig = TokenizerConfig()
) -> MsgToken:
    comps = message_components(msg, best_opposing, cfg)
    return MsgToken(vocab.id_of(stringify(comps, cfg)), comps)


def decode_components(token_id: int, vocab: Vocabulary, cfg: TokenizerConfig = TokenizerConfig()):
    """Components of a message token; :data:`UNKNOWN` for UNK, ValueError for PAD/MASK."""
    if token_id == UNK_ID:
        return UNKNOWN
    if token_id in (PAD_ID, MASK_ID):
        raise ValueError(f"token id {token_id} ({vocab.tokens[token_id]}) is not a message")
    if not 0 <= token_id < len(vocab):
        raise ValueError(f"token id {token_id} outside vocabulary of {len(vocab)}")
    return parse_token(vocab.tokens[token_id], cfg)


def bin_range(levels: tuple[int, ...], clip: int, index: int) -> tuple[int, int]:
    return levels[index], (levels[index + 1] if index + 1 < len(levels) else clip)
