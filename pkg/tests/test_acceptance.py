"""Numbered acceptance criteria; the terminal summary prints one PASS/FAIL line per criterion."""
import json
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import MOTIF_SEQ_LEN, TOY_LR
from gradcheck import check, model_check
from lobmm import cli
from lobmm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lobmm.errors import CheckpointError
from lobmm.evaluate import evaluate_midprice, evaluate_next_message
from lobmm.feed import EMPTY_PRICE, MsgType
from lobmm.metrics import THRESHOLDS, jsd, macro_f1, tvd, w1
from lobmm.model import LobModel, ModelConfig, rotate
from lobmm.preprocess import preprocess, split
from lobmm.report import validate_report
from lobmm.scaling import PRICE_PLGS, plgs_forward, plgs_inverse, scale_snapshot_prices, scale_snapshot_volume
from lobmm.synth import SynthConfig, generate
from lobmm.tokenizer import SPECIALS, all_components, build_vocab, decode_components, max_vocab_size, parse_token, stringify
from lobmm.training import TrainConfig, Trainer, masked_token_accuracy, tau
from oracles import jsd_loops, macro_f1_confusion, tvd_loops, w1_cdf
from test_autograd import CASES
from test_checkpoint import VOCAB, first_tensor_data_offset
from test_feed import replay_against_oracle, random_stream
from test_model import full_model_loss
from toys import outputs, perturb_from, random_inputs, toy_model

acceptance = pytest.mark.acceptance


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, *_):
        elapsed = time.perf_counter() - self.start
        if exc_type is None:
            assert elapsed < self.seconds, f"took {elapsed:.1f}s, budget {self.seconds}s"


@acceptance(1, "PLGS anchors, strict monotonicity, inverse roundtrip")
def test_plgs_anchors():
    with Budget(1):
        assert plgs_forward(10, PRICE_PLGS) == 0.5
        assert plgs_forward(10, PRICE_PLGS, exact=True) == Fraction(1, 2)
        grid = [Fraction(i, 4) for i in range(4001)]
        vals = [plgs_forward(x, PRICE_PLGS, exact=True) for x in grid]
        assert all(a < b for a, b in zip(vals, vals[1:]))
        worst = max(abs(plgs_inverse(v, PRICE_PLGS, exact=True) - x) for x, v in zip(grid, vals))
        assert worst <= 1e-6
        x = np.arange(0, 150, 0.25)
        assert np.max(np.abs(plgs_inverse(plgs_forward(x, PRICE_PLGS), PRICE_PLGS) - x)) <= 1e-6


def _book(asks, bids):
    snap = np.zeros(40)
    snap[0::4] = EMPTY_PRICE
    snap[2::4] = EMPTY_PRICE
    for i, (p, v) in enumerate(asks):
        snap[4 * i], snap[4 * i + 1] = p, v
    for i, (p, v) in enumerate(bids):
        snap[4 * i + 2], snap[4 * i + 3] = p, v
    return snap


@acceptance(2, "snapshot volume and distance scaling")
def test_snapshot_scaling():
    with Budget(1):
        assert abs(scale_snapshot_volume(2000) - 0.632121) <= 1e-6
        out, _ = scale_snapshot_prices(_book([(101, 5), (103, 5)], [(100, 5), (96, 5)]))
        assert (out[0], out[2], out[4], out[6]) == (0.0, 0.0, 2 / 20, 4 / 20)
        out, _ = scale_snapshot_prices(_book([(121, 5), (130, 5)], [(100, 5), (79, 5)]))
        assert (out[0], out[2], out[4], out[6]) == (1.0, 1.0, 1.0, 1.0)
        out, _ = scale_snapshot_prices(_book([(120, 5)], [(100, 5)]))
        assert out[0] == 19 / 20


@acceptance(3, "exhaustive tokenizer roundtrip and vocabulary bound")
def test_tokenizer_exhaustive():
    with Budget(5):
        combos = all_components()
        vocab = build_vocab(stringify(c) for c in combos)
        failures = 0
        for c in combos:
            tid = vocab.id_of(stringify(c))
            failures += tid < len(SPECIALS) or decode_components(tid, vocab) != c.canonical()
        assert len(combos) == 480 and failures == 0
        assert len(vocab) <= max_vocab_size() == 483
        executes = [parse_token(t) for t in vocab.tokens[len(SPECIALS):]]
        executes = [c for c in executes if c.mtype == MsgType.EXECUTE]
        assert executes and all(c.price_bin == 0 for c in executes)


@acceptance(4, "continuous RoPE relative-shift identity")
def test_rope_identity():
    with Budget(5):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            q, k = rng.normal(size=16), rng.normal(size=16)
            t1, t2 = rng.uniform(0, 1e5, 2)
            lhs = rotate(q, t1) @ rotate(k, t2)
            assert abs(lhs - rotate(q, t1 - t2) @ k) <= 1e-5 * max(1.0, abs(lhs))
        x = rng.normal(size=(7, 16))
        assert np.array_equal(rotate(x, np.zeros(7)), x)


@acceptance(5, "finite-difference gradients for every op and a toy model")
def test_gradcheck(float64):
    with Budget(60):
        op_errors = {name: check(f, *arrays) for name, (f, arrays) in CASES.items()}
        assert max(op_errors.values()) <= 1e-5, op_errors
        model = toy_model(seed=2, init_std=0.3)
        rng = np.random.default_rng(12)
        inp = random_inputs(rng, snapshot_mask_rate=0.3)
        targets = rng.integers(0, 12, (2, 8))
        errors = model_check(lambda: full_model_loss(model, inp, targets), dict(model.named_parameters()), max_entries=12)
        assert max(errors.values()) <= 1e-5, errors


@acceptance(6, "causal outputs bit-invariant to future perturbations")
def test_causality():
    with Budget(30):
        model = toy_model(seed=7)
        rng = np.random.default_rng(99)
        for _ in range(100):
            inp = random_inputs(rng)
            i = int(rng.integers(0, 7))
            a = outputs(model, inp, causal=True)
            b = outputs(model, perturb_from(inp, i + 1, rng), causal=True)
            for x, y in zip(a, b):
                assert np.array_equal(x[:, : i + 1], y[:, : i + 1])


@acceptance(7, "mid-price thresholds")
def test_tau():
    with Budget(1):
        assert tau(10) == 0.0 and tau(50) == 0.232 and tau(100) == 0.332


@acceptance(8, "metrics equal brute-force definitions")
def test_metric_oracles():
    with Budget(30):
        rng = np.random.default_rng(8)
        for _ in range(10_000):
            k = int(rng.integers(1, 6))
            support = np.sort(rng.choice(np.arange(-50, 51), k, replace=False)).astype(float)
            a = rng.choice(support, int(rng.integers(1, 9)))
            b = rng.choice(support, int(rng.integers(1, 9)))
            assert abs(w1(a, b) - w1_cdf(list(a), list(b))) <= 1e-12
            p = rng.integers(0, 6, k) * rng.random(k)
            q = rng.integers(0, 6, k) * rng.random(k)
            p[int(rng.integers(k))] += 0.5
            q[int(rng.integers(k))] += 0.5
            assert abs(jsd(p, q) - jsd_loops(list(p), list(q))) <= 1e-12
            assert abs(tvd(p, q) - tvd_loops(list(p), list(q))) <= 1e-12
            n = int(rng.integers(1, 12))
            pred, labels = rng.integers(0, 3, n), rng.integers(0, 3, n)
            assert abs(macro_f1(pred, labels) - macro_f1_confusion(list(pred), list(labels))) <= 1e-12


@pytest.fixture(scope="module")
def motif_eval(motif_data, motif_models):
    _, test, vocab = motif_data
    t = time.perf_counter()
    ev = evaluate_next_message(motif_models["next_msg"], test, vocab, MOTIF_SEQ_LEN, max_samples=1000)
    return ev, time.perf_counter() - t


@acceptance(9, "toy memorization: masked-token and next-message accuracy")
def test_learnability(motif_data, motif_models, motif_eval):
    train, _, _ = motif_data
    acc = masked_token_accuracy(motif_models["pretrained"], train, motif_models["mmm_cfg"])
    ev, eval_secs = motif_eval
    print(f"masked-token acc {acc:.4f}, next-message full acc {ev.component_accuracy['full']:.4f}")
    assert acc >= 0.95
    assert ev.component_accuracy["full"] >= 0.95
    assert motif_models["seconds"] + eval_secs < 20 * 60


@acceptance(10, "combined decoding has the smallest price/volume discrepancy")
def test_mode_ordering(motif_eval):
    ev, eval_secs = motif_eval
    for var in ("price", "volume"):
        for metric in ("jsd", "tvd"):
            cell = {mode: ev.modes[mode][var][metric] for mode in ("combined", "token", "regressor")}
            print(var, metric, cell)
            assert cell["combined"] <= cell["token"] and cell["combined"] <= cell["regressor"]
    assert eval_secs < 10 * 60


@acceptance(11, "selective prediction on the toy mid-price task")
def test_selective_prediction():
    with Budget(10 * 60):
        msgs = generate(SynthConfig(seed=5, n_messages=30_000, trend_switch=0.005, trend_strength=0.8))
        data, vocab, _ = preprocess(msgs)
        train, _, test = split(data, (0.8, 0.1, 0.1))
        cfg = ModelConfig(vocab_size=len(vocab), d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=32, dropout=0.1)
        model = LobModel(cfg, seed=0)
        lr = dict(lr_max=TOY_LR["lr_max"], lr_min=TOY_LR["lr_min"])
        Trainer(model, TrainConfig(phase="mmm", steps=300, stride=1, **lr), train).run()
        Trainer(model, TrainConfig(phase="midprice", steps=1000, horizon=10, midprice_stride=1, **lr), train).run()
        res = evaluate_midprice(model, test, 10, 32, thresholds=THRESHOLDS, max_samples=None)
        for r in res:
            print(r.to_dict())
        cov = [r.coverage for r in res]
        assert cov[0] == 1.0 and all(a >= b for a, b in zip(cov, cov[1:]))
        assert res[-1].macro_f1 is not None and res[-1].macro_f1 >= res[0].macro_f1


@acceptance(12, "book depth equals from-scratch oracle on random streams")
def test_book_reconstruction():
    with Budget(60):
        for seed in range(100):
            replay_against_oracle(random_stream(seed, 10_000), every=97)


@acceptance(13, "checkpoint roundtrip and CRC rejection")
def test_checkpoint(tmp_path):
    with Budget(10):
        model = toy_model(seed=4, midprice_classes=3)
        path = tmp_path / "m.lobt"
        save_checkpoint(Checkpoint(model, VOCAB, meta={"step": 1}), path)
        loaded = load_checkpoint(path).model.eval()
        inp = random_inputs(np.random.default_rng(0))
        for x, y in zip(outputs(model, inp, False), outputs(loaded, inp, False)):
            assert np.array_equal(x, y)
        raw = bytearray(path.read_bytes())
        raw[first_tensor_data_offset(raw) + 3] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


@acceptance(14, "CLI end-to-end pipeline")
def test_cli_end_to_end(tmp_path):
    def run(*argv):
        return cli.main([str(a) for a in argv])

    with Budget(25 * 60):
        assert run("synth", "--out", tmp_path / "raw", "--seed", 1, "--n-messages", 5000, "--trend-switch", 0.01) == 0
        assert run("ingest", tmp_path / "raw" / "messages.csv", "--out", tmp_path / "data") == 0
        assert run(
            "pretrain", tmp_path / "data", "--out", tmp_path / "mmm", "--d-model", 32, "--n-layers", 2, "--n-heads", 4,
            "--seq-len", 32, "--steps", 200, "--batch-size", 16, "--eval-every", 50,
        ) == 0
        for task in ("next_msg", "midprice"):
            assert run(
                "finetune", tmp_path / "data", "--out", tmp_path / task, "--task", task,
                "--checkpoint", tmp_path / "mmm" / "model.lobt", "--steps", 100, "--batch-size", 16, "--eval-every", 50,
            ) == 0
        assert run(
            "evaluate", tmp_path / "data", "--out", tmp_path / "eval", "--checkpoint", tmp_path / "next_msg" / "model.lobt",
            "--midprice-checkpoint", tmp_path / "midprice" / "model.lobt", "--threshold-sweep", "--max-samples", 500,
        ) == 0
        validate_report(json.loads((tmp_path / "eval" / "report.json").read_text()))
