"""Operator surface: train / eval / ablate / sweep / compress / inspect.

Config files are plain key=value lines (# comments allowed); every run echoes
its fully resolved configuration into the run directory so any artifact is
reproducible from config + seed alone. Run directories are never reused if
non-empty.
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import data_eval as D
from .model import (
    PRESET_ORDER,
    ModelConfig,
    TrainabilityMask,
    build_model,
)
from .reservoir import recurrent_layer_keys
from .tensor_core import spectral_radius
from .training import TrainConfig, train

_SCHEMA = {
    # task
    "task": str, "data_size": int, "max_len": int, "content_vocab": int,
    # model
    "cell_type": str, "hidden_dim": int, "input_dim": int,
    "num_encoder_layers": int, "num_decoder_layers": int, "attention_dim": int,
    "density": float, "radius_norm_target": float, "residual": lambda s: s.lower() == "true",
    "preset": str, "fixed_rho": float, "init_gamma": float,
    # training
    "learning_rate": float, "warmup_steps": int, "batch_size": int, "max_steps": int,
    "label_smoothing": float, "dropout": float, "weight_decay": float, "clip_norm": float,
    "eval_interval": int, "seed": int,
    # experiment
    "radii": lambda s: [float(x) for x in s.split(",")],
    "bucket_edges": lambda s: [int(x) for x in s.split(",")],
    "decode_max_len": int,
}

_DEFAULTS = {
    "task": "reverse", "data_size": 2000, "max_len": 10, "content_vocab": 26,
    "cell_type": "simple_rnn", "hidden_dim": 64, "num_encoder_layers": 1,
    "num_decoder_layers": 1, "density": 0.775, "radius_norm_target": 1.0,
    "residual": True, "preset": "plus_attention", "init_gamma": 10.0,
    "learning_rate": 2e-3, "warmup_steps": 100, "batch_size": 32, "max_steps": 500,
    "label_smoothing": 0.1, "dropout": 0.2, "weight_decay": 1e-5, "clip_norm": 5.0,
    "eval_interval": 0, "seed": 0,
    "radii": [0.1, 0.9, 2.0], "bucket_edges": [5, 10, 15, 20], "decode_max_len": 64,
}


class CliError(Exception):
    pass


def read_config(path) -> dict:
    cfg = dict(_DEFAULTS)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = (p.strip() for p in line.partition("="))
        if key not in _SCHEMA:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            cfg[key] = _SCHEMA[key](value)
        except ValueError as e:
            raise CliError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
    return cfg


def _prepare_run_dir(path) -> Path:
    run = Path(path)
    run.mkdir(parents=True, exist_ok=True)
    if any(run.iterdir()):
        raise CliError(f"run directory {run} is not empty; refusing to reuse it")
    return run


def _write_resolved(cfg: dict, run: Path):
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    (run / "config.resolved").write_text("\n".join(lines) + "\n")


def _build_task(cfg: dict) -> D.ToyTask:
    return D.make_toy_task(
        cfg["task"], cfg["data_size"], cfg["max_len"], cfg["seed"],
        content_vocab=cfg["content_vocab"],
    )


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        cell_type=cfg["cell_type"],
        hidden_dim=cfg["hidden_dim"],
        input_dim=cfg.get("input_dim"),
        num_encoder_layers=cfg["num_encoder_layers"],
        num_decoder_layers=cfg["num_decoder_layers"],
        attention_dim=cfg.get("attention_dim"),
        density=cfg["density"],
        radius_norm_target=cfg["radius_norm_target"],
        residual=cfg["residual"],
        fixed_rho=cfg.get("fixed_rho"),
        init_gamma=cfg["init_gamma"],
        seed=cfg["seed"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"], warmup_steps=cfg["warmup_steps"],
        batch_size=cfg["batch_size"], max_steps=cfg["max_steps"],
        label_smoothing=cfg["label_smoothing"], dropout=cfg["dropout"],
        weight_decay=cfg["weight_decay"], clip_norm=cfg["clip_norm"],
        eval_interval=cfg["eval_interval"], seed=cfg["seed"],
    )


def _train_one(cfg: dict, task: D.ToyTask, preset: str):
    mcfg = _model_config(cfg, len(task.vocab))
    model = build_model(mcfg, TrainabilityMask.preset(preset))
    tcfg = _train_config(cfg)
    dev_eval = (lambda m, pairs: D.evaluate_bleu(m, D.ParallelCorpus(pairs), cfg["decode_max_len"])) \
        if tcfg.eval_interval else None
    model, log = train(model, task.train.pairs, tcfg,
                       dev_pairs=task.dev.pairs, dev_eval=dev_eval)
    return model, log


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    run = _prepare_run_dir(args.run_dir)
    _write_resolved(cfg, run)
    task = _build_task(cfg)
    model, log = _train_one(cfg, task, cfg["preset"])
    log.to_csv(run / "metrics.csv")

    hyps, refs = D.decode_corpus(model, task.test, cfg["decode_max_len"])
    src_lens = [len(p[0]) for p in task.test.pairs]
    rows = D.bleu_by_length(hyps, refs, src_lens, cfg["bucket_edges"])
    D.bleu_rows_to_csv(rows, run / "bleu.csv")
    overall = D.corpus_bleu(hyps, refs)
    C.save_file(run / "ckpt.full", model, C.FULL, step=cfg["max_steps"],
                vocab_tokens=task.vocab.tokens)
    C.save_file(run / "ckpt.esn", model, C.COMPRESSED, step=cfg["max_steps"],
                vocab_tokens=task.vocab.tokens)
    print(f"test BLEU: {overall:.2f}")
    print(f"artifacts written to {run}")
    return 0


def cmd_eval(args) -> int:
    ckpt = C.load_file(args.checkpoint)
    if ckpt.vocab_tokens is None:
        raise CliError("checkpoint carries no vocabulary; cannot tokenize text")
    vocab = D.Vocab(ckpt.vocab_tokens[len(D.RESERVED):])
    corpus, _ = D.load_parallel_text(args.source, args.reference, vocab)
    score = D.evaluate_bleu(ckpt.model, corpus, args.max_len)
    print(f"BLEU: {score:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = read_config(args.config)
    run = _prepare_run_dir(args.run_dir)
    _write_resolved(cfg, run)
    task = _build_task(cfg)
    results = []
    for preset in PRESET_ORDER:
        model, _ = _train_one(cfg, task, preset)
        score = D.evaluate_bleu(model, task.test, cfg["decode_max_len"])
        results.append((preset, score))
        print(f"{preset:<20s} {score:6.2f}")
    with open(run / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["preset", "bleu"])
        w.writerows(results)
    return 0


def cmd_sweep(args) -> int:
    cfg = read_config(args.config)
    run = _prepare_run_dir(args.run_dir)
    _write_resolved(cfg, run)
    task = _build_task(cfg)
    rows = D.fixed_radius_sweep(
        _model_config(cfg, len(task.vocab)), _train_config(cfg),
        cfg["radii"], task, cfg["bucket_edges"], cfg["decode_max_len"],
    )
    with open(run / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["radius", "bucket_lo", "bucket_hi", "count", "bleu"])
        for r in rows:
            w.writerow([r["radius"], r["bucket_lo"], r["bucket_hi"], r["count"],
                        f"{r['bleu']:.4f}"])
    for r in rows:
        print(f"radius {r['radius']:<4} bucket ({r['bucket_lo']}, {r['bucket_hi']}] "
              f"n={r['count']:<5d} BLEU {r['bleu']:.2f}")
    return 0


def cmd_compress(args) -> int:
    ckpt = C.load_file(args.input)
    if ckpt.mode == C.COMPRESSED:
        raise CliError(f"{args.input} is already compressed")
    C.save_file(args.output, ckpt.model, C.COMPRESSED, step=ckpt.step,
                vocab_tokens=ckpt.vocab_tokens)
    full_size = Path(args.input).stat().st_size
    comp_size = Path(args.output).stat().st_size
    print(f"compressed {full_size} -> {comp_size} bytes "
          f"({comp_size / full_size:.1%} of full)")
    return 0


def cmd_inspect(args) -> int:
    ckpt = C.load_file(args.checkpoint)
    model = ckpt.model
    cfg = model.config
    n_train, n_frozen = model.num_params()
    print(f"mode: {ckpt.mode}  step: {ckpt.step}")
    print(f"cell_type: {cfg.cell_type}  hidden_dim: {cfg.hidden_dim}  "
          f"layers: {cfg.num_encoder_layers}+{cfg.num_decoder_layers}  "
          f"vocab: {cfg.vocab_size}  seed: {cfg.seed}")
    print(f"mask: {model.mask}")
    print(f"trainable params: {n_train}  frozen params: {n_frozen}  "
          f"frozen fraction: {n_frozen / (n_train + n_frozen):.4f}")
    d = cfg.hidden_dim
    for key in recurrent_layer_keys(cfg.spec):
        name = f"{key}.Wres"
        if name not in model.frozen:
            continue
        W = model.frozen[name]
        radii = [spectral_radius(W[i * d : (i + 1) * d]).value for i in range(W.shape[0] // d)]
        rho, gamma = model.scale(key)
        print(f"{key}: radius {' '.join(f'{r:.4f}' for r in radii)}  "
              f"rho {rho:.4f}  gamma {gamma:.4f}")
    return 0


def _verify_cmd(args) -> int:
    report = C.verify(Path(args.full).read_bytes(), Path(args.compressed).read_bytes())
    print(report)
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="echonmt",
        description="Frozen-reservoir sequence-to-sequence translation toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write run artifacts")
    t.add_argument("--config", required=True)
    t.add_argument("--run-dir", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on parallel text files")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--source", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--max-len", type=int, default=64)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train every trainability preset and tabulate BLEU")
    a.add_argument("--config", required=True)
    a.add_argument("--run-dir", required=True)
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("sweep", help="fixed-radius sweep with length-bucketed BLEU")
    s.add_argument("--config", required=True)
    s.add_argument("--run-dir", required=True)
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("compress", help="convert a full checkpoint to seed+trainable form")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.set_defaults(fn=cmd_compress)

    i = sub.add_parser("inspect", help="print checkpoint header, counts and radii")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)

    v = sub.add_parser("verify", help="compare two checkpoints tensor by tensor")
    v.add_argument("--full", required=True)
    v.add_argument("--compressed", required=True)
    v.set_defaults(fn=_verify_cmd)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, C.CheckpointError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
