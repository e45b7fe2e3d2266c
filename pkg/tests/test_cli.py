import csv
import hashlib
import json

import pytest

from lobmm import cli
from lobmm.errors import TrainingDiverged
from lobmm.report import validate_report


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(directory):
    h = hashlib.sha256()
    for name in ("messages.csv", "snapshots.csv"):
        h.update((directory / name).read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "model.yaml").write_text("pretrain:\n  d_ff: 32\n  head_hidden: 8\n  dropout: 0.0\n")
    assert run("synth", "--out", root / "raw", "--seed", 5, "--n-messages", 3000, "--trend-switch", 0.01, "--trend-strength", 0.7) == 0
    assert run("ingest", root / "raw" / "messages.csv", "--out", root / "data") == 0
    assert run(
        "pretrain", root / "data", "--out", root / "mmm", "--config", root / "model.yaml",
        "--d-model", 16, "--n-layers", 1, "--n-heads", 2, "--seq-len", 16, "--steps", 20, "--batch-size", 8, "--eval-every", 10,
    ) == 0
    for task in ("next_msg", "midprice"):
        assert run(
            "finetune", root / "data", "--out", root / task, "--task", task, "--checkpoint", root / "mmm" / "model.lobt",
            "--steps", 10, "--batch-size", 8, "--eval-every", 5, "--stride", 4,
        ) == 0
    return root


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--seed", 1, "--n-messages", 500) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert run("synth", "--out", tmp_path / "c", "--seed", 2, "--n-messages", 500) == 0
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_ingest_row_count(pipeline):
    with open(pipeline / "data" / "tokens.csv") as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == 3000
    assert (pipeline / "data" / "vocab.txt").read_text().splitlines()[:3] == ["[PAD]", "[MASK]", "[UNK]"]


def test_resolved_config_echo(pipeline):
    doc = json.loads((pipeline / "mmm" / "config.resolved.json").read_text())
    assert doc["command"] == "pretrain"
    assert doc["d_ff"] == 32 and doc["d_model"] == 16 and doc["steps"] == 20


def test_metrics_log(pipeline):
    with open(pipeline / "mmm" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and sum(r["val_metric"] != "" for r in rows) == 2


def test_generate_all_modes(pipeline, tmp_path):
    ctx = tmp_path / "ctx.csv"
    ctx.write_text("\n".join((pipeline / "raw" / "messages.csv").read_text().splitlines()[:200]) + "\n")
    out = tmp_path / "gen"
    assert run("generate", "--out", out, "--checkpoint", pipeline / "next_msg" / "model.lobt", "--context", ctx, "--mode", "all") == 0
    stats = json.loads((out / "decode_stats.json").read_text())
    with open(out / "generated.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) + stats["failures"] == 3
    assert {r["mode"] for r in rows} <= {"combined", "token", "regressor"}


def test_evaluate_report(pipeline, tmp_path):
    out = tmp_path / "eval"
    assert run(
        "evaluate", pipeline / "data", "--out", out, "--checkpoint", pipeline / "next_msg" / "model.lobt",
        "--midprice-checkpoint", pipeline / "midprice" / "model.lobt", "--threshold-sweep", "--max-samples", 200,
    ) == 0
    report = json.loads((out / "report.json").read_text())
    validate_report(report)
    assert set(report["modes"]) == {"combined", "token", "regressor"}
    assert [r["threshold"] for r in report["selective"]["10"]] == [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    for name in ("table_modes.csv", "table_components.csv", "table_selective.csv", "hist_price.csv", "report.md"):
        assert (out / name).exists()


def test_evaluate_default_thresholds(pipeline, tmp_path):
    out = tmp_path / "eval"
    assert run("evaluate", pipeline / "data", "--out", out, "--checkpoint", pipeline / "midprice" / "model.lobt",
               "--tasks", "midprice", "--max-samples", 100) == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["threshold"] for r in report["selective"]["10"]] == [0.3, 0.9]


@pytest.mark.parametrize(
    "argv, code",
    [
        (["pretrain", "DATA", "--steps", "-5"], 2),
        (["finetune", "DATA"], 2),
        (["evaluate", "DATA", "--checkpoint", "MISSING"], 3),
        (["ingest", "BADFEED"], 3),
        (["pretrain", "NOWHERE"], 3),
    ],
)
def test_exit_codes(pipeline, tmp_path, capsys, argv, code):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,1,1,10,-5,1\n")
    subst = {"DATA": pipeline / "data", "MISSING": tmp_path / "missing.lobt", "BADFEED": bad, "NOWHERE": tmp_path / "none"}
    argv = [str(subst.get(a, a)) for a in argv] + ["--out", str(tmp_path / "o")]
    assert cli.main(argv) == code
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == code and err["message"]


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("colour: blue\n")
    assert run("synth", "--out", tmp_path / "o", "--config", cfg) == 2


def test_config_file_overridden_by_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_messages": 50, "seed": 3}))
    assert run("synth", "--out", tmp_path / "o", "--config", cfg, "--n-messages", 20) == 0
    doc = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert doc["n_messages"] == 20 and doc["seed"] == 3
    assert len((tmp_path / "o" / "messages.csv").read_text().splitlines()) == 21


def test_divergence_exit_code(pipeline, tmp_path, monkeypatch):
    def boom(self, log_path=None):
        raise TrainingDiverged("loss became nan at step 3", last_good=self.model.state_dict())

    monkeypatch.setattr(cli.Trainer, "run", boom)
    out = tmp_path / "div"
    assert run("finetune", pipeline / "data", "--out", out, "--checkpoint", pipeline / "mmm" / "model.lobt") == 4
    assert (out / "model.last_good.lobt").exists()
