import numpy as np
import pytest

from lobmm.evaluate import evaluate_midprice, evaluate_next_message, evaluation_targets, midprice_probabilities, truth_components
from lobmm.model import LobModel, ModelConfig
from lobmm.preprocess import preprocess
from lobmm.synth import SynthConfig, generate
from lobmm.tokenizer import parse_token


@pytest.fixture(scope="module")
def setup():
    data, vocab, strings = preprocess(generate(SynthConfig(seed=8, n_messages=600, trend_switch=0.02, trend_strength=0.7)))
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=16, head_hidden=8, midprice_classes=3)
    return data, vocab, strings, LobModel(cfg, seed=0).eval()


def test_truth_components_match_token_strings(setup):
    data, _, strings, _ = setup
    idx = np.arange(len(data))
    assert truth_components(data, idx) == [parse_token(s) for s in strings]


def test_targets_sampling():
    assert list(evaluation_targets(10, 4, None)) == [4, 5, 6, 7, 8, 9]
    t = evaluation_targets(1000, 16, 50, seed=1)
    assert len(t) == 50 and np.all(np.diff(t) > 0) and t.min() >= 16


def test_next_message_eval_structure(setup):
    data, vocab, _, model = setup
    ev = evaluate_next_message(model, data, vocab, 16, max_samples=100)
    assert ev.n == 100
    assert set(ev.component_accuracy) == {"type", "side", "price_q", "volume_q", "full"}
    for mode, cells in ev.modes.items():
        assert set(cells) == {"price", "volume", "time"}
        assert ev.decode_stats[mode]["total"] == 100
    with pytest.raises(ValueError):
        evaluate_next_message(model, data.slice(0, 10), vocab, 16)


def test_midprice_probabilities(setup):
    data, _, _, model = setup
    probs, labels = midprice_probabilities(model, data, 10, 16)
    assert probs.shape[1] == 3 and np.allclose(probs.sum(1), 1)
    assert set(np.unique(labels)) <= {0, 1, 2}
    res = evaluate_midprice(model, data, 10, 16)
    assert res[0].coverage == 1.0
