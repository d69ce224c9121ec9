"""Optimization loop: BPTT orchestration, AdamW-style updates, clipping,
regularization, and per-step metric logging.

The optimizer only ever allocates state for tensors that appear in the
gradient set, so frozen weights cost no optimizer memory and provably never
move. Training is deterministic given (seed, config, dataset): batching,
dropout and shuffling all derive from the config seed.
"""

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import model as M
from .tensor_core import Rng, _splitmix64


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    warmup_steps: int = 1000
    batch_size: int = 32
    max_steps: int = 1000
    label_smoothing: float = 0.1
    dropout: float = 0.2
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    eval_interval: int = 0  # 0 disables dev evaluation
    snapshot_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "label_smoothing", "dropout", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.label_smoothing >= 1.0:
            raise ValueError("label_smoothing must be < 1")

    def lr_at(self, step: int) -> float:
        """Linear warmup then inverse-sqrt decay."""
        w = max(1, self.warmup_steps)
        return self.learning_rate * min(step / w, (w / step) ** 0.5)


@dataclass
class MetricsLog:
    """Append-only per-step log; one row per (step, layer) plus the step loss."""

    rows: List[tuple] = field(default_factory=list)  # (step, layer_id, direction, rho, gamma, loss)
    bleu: List[tuple] = field(default_factory=list)  # (step, bleu)

    def record_step(self, step: int, loss_value: float, model: M.EsnmtModel):
        for key in M.recurrent_layer_keys(model.config.spec):
            rho, gamma = model.scale(key)
            if key.endswith(".fwd") or key.endswith(".bwd"):
                layer_id, direction = key.rsplit(".", 1)
            else:
                layer_id, direction = key, "-"
            self.rows.append((step, layer_id, direction, rho, gamma, loss_value))

    def losses(self) -> Dict[int, float]:
        return {step: loss for (step, _, _, _, _, loss) in self.rows}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "layer_id", "direction", "rho", "gamma", "loss"])
            w.writerows(self.rows)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good snapshot."""

    def __init__(self, step: int, last_good: Optional[M.EsnmtModel]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Scale the whole gradient set so its global L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    norm = total**0.5
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def apply_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                 state: AdamState, config: TrainConfig, step: int) -> None:
    """Adaptive-moment update with bias correction and decoupled weight decay.

    Mutates params/state in place. Touches exactly the keys present in grads;
    a key mismatch against params is a hard error.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise KeyError(f"gradient/parameter key mismatch: {sorted(missing)}")
    lr = config.lr_at(step)
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / (1.0 - b1**step)
        vhat = state.v[name] / (1.0 - b2**step)
        p = params[name]
        upd = lr * mhat / (np.sqrt(vhat) + state.eps)
        if config.weight_decay > 0.0:
            upd = upd + lr * config.weight_decay * p
        params[name] = p - upd


def _batches(pairs, batch_size: int):
    """Length-bucketed fixed-count batches; order within a batch is stable."""
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), i))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def pad_batch(pairs, indices) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of (src_ids, tgt_ids) pairs into two id matrices."""
    srcs = [np.asarray(pairs[i][0], dtype=np.int64) for i in indices]
    tgts = [np.asarray(pairs[i][1], dtype=np.int64) for i in indices]
    S = max(len(s) for s in srcs)
    T = max(len(t) for t in tgts)
    src = np.full((len(indices), S), M.PAD_ID, dtype=np.int64)
    tgt = np.full((len(indices), T), M.PAD_ID, dtype=np.int64)
    for b, (s, t) in enumerate(zip(srcs, tgts)):
        src[b, : len(s)] = s
        tgt[b, : len(t)] = t
    return src, tgt


def train(model: M.EsnmtModel, pairs, config: TrainConfig,
          dev_pairs=None, dev_eval=None) -> Tuple[M.EsnmtModel, MetricsLog]:
    """Run forward/loss/backward/clip/update for max_steps.

    pairs is a list of (src_ids, tgt_ids) sequences. dev_eval, if given, is
    called as dev_eval(model, dev_pairs) -> float at every eval_interval and
    the result logged. Returns the trained model and the metrics log.
    """
    if not pairs:
        raise ValueError("training dataset must be nonempty")
    log = MetricsLog()
    state = AdamState()
    batches = _batches(pairs, config.batch_size)
    shuffle_rng = np.random.default_rng(_splitmix64(config.seed) & 0x7FFFFFFF)
    dropout_rng = np.random.default_rng(_splitmix64(config.seed ^ 0xD506) & 0x7FFFFFFF)
    order = []
    snapshot = model.copy()
    for step in range(1, config.max_steps + 1):
        if not order:
            order = list(shuffle_rng.permutation(len(batches)))
        batch = batches[order.pop()]
        src, tgt = pad_batch(pairs, batch)
        logits, cache = M.forward(
            model, src, tgt, mode="train", dropout=config.dropout, rng=dropout_rng
        )
        loss_value, dlogits = M.loss(logits, tgt, config.label_smoothing)
        if not np.isfinite(loss_value):
            raise TrainingDiverged(step, snapshot)
        grads = M.backward(model, cache, dlogits)
        grads = clip_gradients(grads, config.clip_norm)
        apply_update(model.params, grads, state, config, step)
        log.record_step(step, loss_value, model)
        if config.snapshot_interval and step % config.snapshot_interval == 0:
            snapshot = model.copy()
        if config.eval_interval and dev_eval is not None and step % config.eval_interval == 0:
            log.bleu.append((step, float(dev_eval(model, dev_pairs))))
    return model, log
