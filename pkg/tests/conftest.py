import time

import numpy as np
import pytest

from lobmm import autograd as ag

_ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "setup":
        item.setup_seconds = report.duration  # includes session fixtures (toy training) first used here
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        secs = report.duration + (getattr(item, "setup_seconds", 0.0) if report.when == "call" else 0.0)
        _ACCEPTANCE[number] = (title, status, secs)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, secs = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title} ({secs:.1f}s)")


@pytest.fixture
def float64():
    prev = ag.get_default_dtype()
    ag.set_default_dtype(np.float64)
    yield
    ag.set_default_dtype(prev)


@pytest.fixture
def timer():
    class _T:
        def __enter__(self):
            self.start = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.elapsed = time.perf_counter() - self.start

    return _T


# --------------------------------------------------------------------------- trained toy models

MOTIF_SEQ_LEN = 32
MOTIF_STRIDE = 33  # coprime with the motif length, so windows start at every motif phase
TOY_LR = dict(lr_max=1e-3, lr_min=1e-4, t0=400, t_mult=2)


@pytest.fixture(scope="session")
def motif_data():
    from lobmm.preprocess import preprocess
    from lobmm.synth import SynthConfig, generate

    n = MOTIF_STRIDE * 999 + MOTIF_SEQ_LEN  # exactly 1000 windows
    train, vocab, _ = preprocess(generate(SynthConfig(seed=3, n_messages=n, p_motif=1.0)))
    test, _, _ = preprocess(generate(SynthConfig(seed=11, n_messages=3000, p_motif=1.0)), vocab=vocab)
    return train, test, vocab


@pytest.fixture(scope="session")
def motif_models(motif_data):
    """MMM-pretrained toy model and its next-message fine-tune, with wall times."""
    import copy

    from lobmm.model import LobModel, ModelConfig
    from lobmm.training import TrainConfig, Trainer

    train, _, vocab = motif_data
    cfg = ModelConfig(vocab_size=len(vocab), d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=MOTIF_SEQ_LEN)
    model = LobModel(cfg, seed=0)
    t = time.perf_counter()
    mmm_cfg = TrainConfig(phase="mmm", steps=2000, seq_len=MOTIF_SEQ_LEN, stride=MOTIF_STRIDE, seed=0, **TOY_LR)
    mmm = Trainer(model, mmm_cfg, train).run()
    mmm_secs = time.perf_counter() - t
    pretrained = copy.deepcopy(model)

    t = time.perf_counter()
    ft_cfg = TrainConfig(phase="next_msg", steps=1000, seq_len=MOTIF_SEQ_LEN, stride=MOTIF_STRIDE, seed=1, **TOY_LR)
    Trainer(model, ft_cfg, train).run()
    ft_secs = time.perf_counter() - t
    return {
        "pretrained": pretrained,
        "mmm_cfg": mmm_cfg,
        "mmm_history": mmm.history,
        "next_msg": model,
        "seconds": mmm_secs + ft_secs,
    }
