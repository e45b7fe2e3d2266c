"""Command-line pipeline: synth -> ingest -> pretrain -> finetune -> generate / evaluate.

Every command merges built-in defaults, an optional ``--config`` file (YAML or
JSON key/value mapping) and explicit flags, in that order of precedence, and
writes the merged result to ``<out>/config.resolved.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DataError, LobError, TrainingDiverged
from .evaluate import evaluate_midprice, evaluate_next_message
from .feed import BookState, apply_message, detect_format, parse_feed, write_feed_csv
from .inference import MODES, DecodeStats, generate_next, to_raw_message
from .metrics import THRESHOLDS
from .model import LobModel, ModelConfig
from .preprocess import Preprocessed, preprocess, split, write_tokens_csv
from .report import empty_report, write_report
from .synth import SynthConfig, generate, write_dataset
from .tokenizer import Vocabulary
from .training import HORIZONS, TrainConfig, Trainer

log = logging.getLogger("lobmm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

_TRAIN_DEFAULTS = {
    "seed": 0,
    "steps": 2000,
    "batch_size": 32,
    "lr_max": 5e-5,
    "lr_min": 5e-6,
    "t0": 400,
    "t_mult": 2,
    "weight_decay": 0.01,
    "w_token": 5.0,
    "eval_every": 100,
    "val_batches": 4,
    "stride": 1,
    "split": [0.8, 0.1, 0.1],
}

DEFAULTS = {
    "synth": {"seed": 0, "n_messages": 10000, "p_motif": 0.0, "trend_switch": 0.0, "trend_strength": 0.0, "format": "csv"},
    "ingest": {"format": "auto", "vocab": None},
    "pretrain": {
        **_TRAIN_DEFAULTS,
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 4,
        "d_ff": 256,
        "head_hidden": 64,
        "seq_len": 32,
        "dropout": 0.1,
        "mask_rate": 0.15,
        "snapshot_mask_rate": 0.9,
    },
    "finetune": {**_TRAIN_DEFAULTS, "steps": 1000, "task": "next_msg", "checkpoint": None, "horizon": 10, "midprice_stride": 1},
    "generate": {"checkpoint": None, "context": None, "mode": "combined"},
    "evaluate": {
        "seed": 0,
        "checkpoint": None,
        "midprice_checkpoint": None,
        "tasks": None,
        "horizon": 10,
        "threshold_sweep": False,
        "max_samples": 2000,
        "eval_split": "test",
        "split": [0.8, 0.1, 0.1],
    },
}

_JSON_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string", list: "array"}


def config_schema(command: str) -> dict:
    props = {}
    for key, default in DEFAULTS[command].items():
        kind = _JSON_TYPES.get(type(default))
        if kind == "integer":
            props[key] = {"type": "integer"}
        elif kind == "number":
            props[key] = {"type": "number"}
        elif kind:
            props[key] = {"type": [kind]}
        else:
            props[key] = {}
    props["format"] = props.get("format", {})
    return {"type": "object", "properties": props, "additionalProperties": False}


def resolve_config(command: str, file_path, flags: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    if file_path:
        try:
            loaded = yaml.safe_load(Path(file_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {file_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {file_path} must be a key/value mapping")
        loaded = loaded.get(command, loaded) if isinstance(loaded.get(command), dict) else loaded
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if v is not None and k in DEFAULTS[command]})
    try:
        jsonschema.validate(cfg, config_schema(command))
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from None
    return cfg


def _echo(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, **cfg}
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    log.info("resolved config: %s", json.dumps(doc, sort_keys=True))


def _need(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


# --------------------------------------------------------------------------- datasets


def save_dataset(data: Preprocessed, vocab: Vocabulary, strings: list[str], out: Path) -> None:
    data.save(out / "arrays.npz")
    vocab.save(out / "vocab.txt")
    write_tokens_csv(strings, data, out / "tokens.csv")


def load_dataset(path, vocab: Vocabulary | None = None) -> Preprocessed:
    """Load an ingested dataset; with ``vocab`` the token ids are re-mapped through it."""
    path = Path(path)
    if not (path / "arrays.npz").exists():
        raise DataError(f"{path} is not an ingested dataset (arrays.npz missing)")
    data = Preprocessed.load(path / "arrays.npz")
    if vocab is not None:
        with open(path / "tokens.csv", newline="") as fh:
            strings = [row["token"] for row in csv.DictReader(fh)]
        if len(strings) != len(data):
            raise DataError(f"tokens.csv has {len(strings)} rows for {len(data)} messages")
        data.tokens = np.array([vocab.id_of(s) for s in strings], dtype=np.int64)
    return data


def _split(data: Preprocessed, fractions) -> tuple[Preprocessed, Preprocessed, Preprocessed]:
    try:
        return split(data, tuple(fractions))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(cfg: dict, phase: str, seq_len: int) -> TrainConfig:
    keys = set(TrainConfig.__dataclass_fields__) & set(cfg)
    return TrainConfig(phase=phase, seq_len=seq_len, **{k: cfg[k] for k in keys - {"phase", "seq_len"}})


def _run_training(trainer: Trainer, ckpt: Checkpoint, out: Path) -> None:
    try:
        result = trainer.run(out / "metrics.csv")
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            ckpt.model.load_state_dict(exc.last_good)
            save_checkpoint(ckpt, out / "model.last_good.lobt")
        raise
    ckpt.meta = {**ckpt.meta, "best_val": result.best_val, "best_step": result.best_step}
    save_checkpoint(ckpt, out / "model.lobt")
    log.info("saved %s (best validation %s at step %s)", out / "model.lobt", result.best_val, result.best_step)


# --------------------------------------------------------------------------- commands


def cmd_synth(cfg: dict, out: Path) -> None:
    sc = SynthConfig(
        seed=cfg["seed"],
        n_messages=cfg["n_messages"],
        p_motif=cfg["p_motif"],
        trend_switch=cfg["trend_switch"],
        trend_strength=cfg["trend_strength"],
    )
    msg_path, snap_path = write_dataset(generate(sc), out)
    log.info("wrote %s and %s", msg_path, snap_path)


def cmd_ingest(cfg: dict, out: Path, feed: str) -> None:
    fmt = detect_format(feed) if cfg["format"] == "auto" else cfg["format"]
    vocab = Vocabulary.load(cfg["vocab"]) if cfg["vocab"] else None
    data, vocab, strings = preprocess(parse_feed(feed, fmt), vocab=vocab)
    save_dataset(data, vocab, strings, out)
    log.info("ingested %d messages, vocabulary of %d tokens", len(data), len(vocab))


def cmd_pretrain(cfg: dict, out: Path, dataset: str) -> None:
    vocab = Vocabulary.load(Path(dataset) / "vocab.txt")
    train, val, _ = _split(load_dataset(dataset), cfg["split"])
    mcfg = ModelConfig(
        vocab_size=len(vocab),
        d_model=cfg["d_model"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        head_hidden=cfg["head_hidden"],
        max_seq_len=cfg["seq_len"],
        dropout=cfg["dropout"],
    )
    model = LobModel(mcfg, seed=cfg["seed"])
    tcfg = _train_config(cfg, "mmm", cfg["seq_len"])
    _run_training(Trainer(model, tcfg, train, val), Checkpoint(model, vocab, meta={"phase": "mmm"}), out)


def cmd_finetune(cfg: dict, out: Path, dataset: str) -> None:
    task = cfg["task"]
    if task not in ("next_msg", "midprice"):
        raise ConfigError(f"unknown fine-tune task {task!r}")
    if cfg["horizon"] not in HORIZONS:
        raise ConfigError(f"horizon must be one of {HORIZONS}")
    ckpt = load_checkpoint(_need(cfg, "checkpoint"))
    train, val, _ = _split(load_dataset(dataset, ckpt.vocab), cfg["split"])
    tcfg = _train_config(cfg, task, ckpt.model.cfg.max_seq_len)
    trainer = Trainer(ckpt.model, tcfg, train, val)
    ckpt.meta = {"phase": task, "horizon": cfg["horizon"] if task == "midprice" else None}
    _run_training(trainer, ckpt, out)


def cmd_generate(cfg: dict, out: Path) -> None:
    ckpt = load_checkpoint(_need(cfg, "checkpoint"))
    context_file = _need(cfg, "context")
    messages = list(parse_feed(context_file, detect_format(context_file)))
    if not messages:
        raise DataError("context feed is empty")
    data, _, _ = preprocess(messages, vocab=ckpt.vocab, tokenizer=ckpt.tokenizer, snapshot_cfg=ckpt.snapshot, plgs=ckpt.plgs)
    state = BookState()
    for m in messages:
        apply_message(state, m)
    modes = MODES if cfg["mode"] == "all" else (cfg["mode"],)
    rows, mode_col, stats = [], [], DecodeStats()
    for mode in modes:
        decoded = generate_next(ckpt.model, data, ckpt.vocab, mode, ckpt.tokenizer, ckpt.plgs, stats)
        if decoded is None:
            log.warning("mode %s: predicted token is not a message (decode failure)", getattr(mode, "value", mode))
            continue
        rows.append(to_raw_message(decoded, state, messages[-1].ts_ms))
        mode_col.append(getattr(mode, "value", mode))
    write_feed_csv(rows, out / "generated.csv", extra={"mode": mode_col})
    (out / "decode_stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("generated %d message(s), %d decode failure(s)", len(rows), stats.failures)


def cmd_evaluate(cfg: dict, out: Path, dataset: str) -> None:
    thresholds = THRESHOLDS if cfg["threshold_sweep"] else (0.3, 0.9)
    report = empty_report({k: v for k, v in cfg.items()})
    histograms = None
    tasks = cfg["tasks"] or ("next_msg,midprice" if cfg["midprice_checkpoint"] else "next_msg")
    tasks = [t.strip() for t in tasks.split(",") if t.strip()]
    unknown = set(tasks) - {"next_msg", "midprice"}
    if unknown:
        raise ConfigError(f"unknown evaluation tasks {sorted(unknown)}")

    def pick(data):
        idx = {"train": 0, "val": 1, "test": 2}.get(cfg["eval_split"])
        if cfg["eval_split"] == "all":
            return data
        if idx is None:
            raise ConfigError(f"eval_split must be train, val, test or all, got {cfg['eval_split']!r}")
        return _split(data, cfg["split"])[idx]

    if "next_msg" in tasks:
        ckpt = load_checkpoint(_need(cfg, "checkpoint"))
        test = pick(load_dataset(dataset, ckpt.vocab))
        ev = evaluate_next_message(
            ckpt.model, test, ckpt.vocab, ckpt.model.cfg.max_seq_len, ckpt.tokenizer, ckpt.plgs, cfg["max_samples"], cfg["seed"]
        )
        report.update(component_accuracy=ev.component_accuracy, modes=ev.modes, hist_pearson=ev.hist_pearson,
                      decode_stats=ev.decode_stats)
        report["metadata"]["n_next_msg"] = ev.n
        histograms = ev.histograms
    if "midprice" in tasks:
        ckpt = load_checkpoint(cfg["midprice_checkpoint"] or _need(cfg, "checkpoint"))
        if ckpt.model.midprice_head is None:
            raise ConfigError("mid-price evaluation needs a checkpoint fine-tuned for the mid-price task")
        horizon = ckpt.meta.get("horizon") or cfg["horizon"]
        test = pick(load_dataset(dataset, ckpt.vocab))
        results = evaluate_midprice(ckpt.model, test, horizon, ckpt.model.cfg.max_seq_len, thresholds,
                                    max_samples=cfg["max_samples"], seed=cfg["seed"])
        report["selective"][str(horizon)] = [r.to_dict() for r in results]
    paths = write_report(report, out, histograms)
    log.info("wrote %s", ", ".join(str(p.name) for p in paths))


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lobmm", description="Limit-order-book message modeling pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON key-value file; flags override it")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic feed")
    common(sp)
    sp.add_argument("--n-messages", type=int)
    sp.add_argument("--p-motif", type=float)
    sp.add_argument("--trend-switch", type=float)
    sp.add_argument("--trend-strength", type=float)

    sp = sub.add_parser("ingest", help="tokenize and scale a feed file")
    common(sp)
    sp.add_argument("feed")
    sp.add_argument("--format", choices=("auto", "csv", "binary"))
    sp.add_argument("--vocab", help="reuse an existing vocab.txt")

    def training(sp):
        sp.add_argument("dataset")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr-max", type=float)
        sp.add_argument("--lr-min", type=float)
        sp.add_argument("--t0", type=int)
        sp.add_argument("--eval-every", type=int)
        sp.add_argument("--stride", type=int)

    sp = sub.add_parser("pretrain", help="masked message modeling")
    common(sp)
    training(sp)
    sp.add_argument("--d-model", type=int)
    sp.add_argument("--n-layers", type=int)
    sp.add_argument("--n-heads", type=int)
    sp.add_argument("--seq-len", type=int)
    sp.add_argument("--dropout", type=float)

    sp = sub.add_parser("finetune", help="next-message or mid-price fine-tuning")
    common(sp)
    training(sp)
    sp.add_argument("--task", choices=("next_msg", "midprice"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--horizon", type=int, choices=HORIZONS)

    sp = sub.add_parser("generate", help="predict the next message after a context feed")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--context")
    sp.add_argument("--mode", choices=("combined", "token", "regressor", "all"))

    sp = sub.add_parser("evaluate", help="metrics and report files")
    common(sp)
    sp.add_argument("dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--midprice-checkpoint")
    sp.add_argument("--tasks", help="comma list of next_msg, midprice")
    sp.add_argument("--horizon", type=int, choices=HORIZONS)
    sp.add_argument("--threshold-sweep", action="store_true", default=None)
    sp.add_argument("--max-samples", type=int)
    sp.add_argument("--eval-split", choices=("train", "val", "test", "all"))
    return p


def _dispatch(args, cfg: dict, out: Path) -> None:
    cmd = args.command
    if cmd == "synth":
        cmd_synth(cfg, out)
    elif cmd == "ingest":
        cmd_ingest(cfg, out, args.feed)
    elif cmd == "pretrain":
        cmd_pretrain(cfg, out, args.dataset)
    elif cmd == "finetune":
        cmd_finetune(cfg, out, args.dataset)
    elif cmd == "generate":
        cmd_generate(cfg, out)
    else:
        cmd_evaluate(cfg, out, args.dataset)


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose")}
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args.config, flags)
        _echo(cfg, out, args.command)
        _dispatch(args, cfg, out)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, CheckpointError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except LobError as exc:
        return _fail(EXIT_DATA, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
