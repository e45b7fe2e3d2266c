"""Run a trained model over a test split and collect every report metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .feed import MsgType, Side
from .inference import MODES, DecodeStats, decode, predict_next
from .metrics import THRESHOLDS, component_accuracy, hist_pearson, histogram, marginal_metrics, selective_f1
from .model import LobModel
from .preprocess import DEFAULT_PLGS, Preprocessed
from .tokenizer import SPECIALS, MsgComponents, TokenizerConfig, Vocabulary, decode_components, quantize
from .training import midprice_batch, midprice_samples


@dataclass
class NextMessageEval:
    component_accuracy: dict
    modes: dict = field(default_factory=dict)
    hist_pearson: dict = field(default_factory=dict)
    decode_stats: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    n: int = 0


def truth_components(data: Preprocessed, idx: np.ndarray, tokenizer: TokenizerConfig = TokenizerConfig()) -> list[MsgComponents]:
    out = []
    for i in idx:
        pb = quantize(int(data.price_diff[i]), tokenizer.price_levels, tokenizer.price_clip)
        vb = quantize(int(data.raw_volume[i]), tokenizer.volume_levels, tokenizer.volume_clip)
        out.append(MsgComponents(Side(int(data.side[i])), MsgType(int(data.mtype[i])), pb.index, vb.index, vb.exact).canonical())
    return out


def evaluation_targets(n: int, context_len: int, max_samples: int | None, seed: int = 0) -> np.ndarray:
    targets = np.arange(context_len, n)
    if max_samples is not None and len(targets) > max_samples:
        targets = np.sort(np.random.default_rng(seed).choice(targets, max_samples, replace=False))
    return targets


def evaluate_next_message(
    model: LobModel,
    data: Preprocessed,
    vocab: Vocabulary,
    context_len: int,
    tokenizer: TokenizerConfig = TokenizerConfig(),
    plgs=DEFAULT_PLGS,
    max_samples: int | None = 2000,
    seed: int = 0,
) -> NextMessageEval:
    targets = evaluation_targets(len(data), context_len, max_samples, seed)
    if len(targets) == 0:
        raise ValueError(f"test split of {len(data)} messages is too short for context {context_len}")
    pred = predict_next(model, data, targets, context_len)
    truth = truth_components(data, targets, tokenizer)
    true_vals = {"price": data.price_diff[targets], "volume": data.raw_volume[targets], "time": data.dt_ms[targets]}

    comps = [decode_components(int(t), vocab, tokenizer) if t >= len(SPECIALS) else None for t in pred.token_ids]
    result = NextMessageEval(component_accuracy(comps, truth), n=len(targets))
    result.histograms = {var: {"true": histogram(v, var)} for var, v in true_vals.items()}

    for mode in MODES:
        stats = DecodeStats()
        decoded = [decode(int(t), p, vocab, mode, tokenizer, plgs, stats) for t, p in zip(pred.token_ids, pred.preds)]
        ok = [d for d in decoded if d is not None]
        vals = {
            "price": np.array([d.price_diff for d in ok], dtype=float),
            "volume": np.array([d.volume for d in ok], dtype=float),
            "time": np.array([d.dt_ms for d in ok], dtype=float),
        }
        result.decode_stats[mode.value] = stats.to_dict()
        if not ok:
            continue
        result.modes[mode.value] = {var: marginal_metrics(vals[var], true_vals[var], var) for var in vals}
        pearson = {}
        for var in vals:
            try:
                pearson[var] = hist_pearson(vals[var], true_vals[var], var)
            except ValueError:
                pearson[var] = None
            result.histograms[var][mode.value] = histogram(vals[var], var)
        result.hist_pearson[mode.value] = pearson
    return result


def midprice_probabilities(
    model: LobModel, data: Preprocessed, horizon: int, seq_len: int, stride: int = 1, max_samples: int | None = 2000, batch_size: int = 64, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax class probabilities and class labels (0=down, 1=flat, 2=up) over a split."""
    ends, labels = midprice_samples(data, horizon, seq_len, stride)
    if max_samples is not None and len(ends) > max_samples:
        keep = np.sort(np.random.default_rng(seed).choice(len(ends), max_samples, replace=False))
        ends, labels = ends[keep], labels[keep]
    probs = []
    model.eval()
    with ag.no_grad():
        for i in range(0, len(ends), batch_size):
            batch = midprice_batch(data, ends[i : i + batch_size], labels[i : i + batch_size], seq_len)
            probs.append(ag.softmax(model.midprice_logits(batch.inputs), axis=-1).data.astype(np.float64))
    if not probs:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    p = np.concatenate(probs)
    return p / p.sum(axis=1, keepdims=True), labels.astype(np.int64) + 1


def evaluate_midprice(model, data, horizon, seq_len, thresholds=THRESHOLDS, **kw):
    probs, labels = midprice_probabilities(model, data, horizon, seq_len, **kw)
    if len(probs) == 0:
        raise ValueError("no labelled mid-price samples in the split")
    return selective_f1(probs, labels, thresholds)
