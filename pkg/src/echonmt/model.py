"""Encoder/decoder assembly with per-component trainability.

One code path covers the frozen-recurrent translation models (simple-RNN and
LSTM cells), the fully trainable LSTM baseline, and every partial-freeze
ablation variant: a TrainabilityMask decides which tensors receive gradients,
and frozen recurrent weights come from the seed-derived reservoir generator
while trainable ones are initialized uniform +-0.05.

Architecture (fixed): bidirectional bottom encoder layer (outputs concatenated
then mixed down to hidden_dim), unidirectional upper layers, residual
connections from layer 2 upward; single-head additive attention queried from
the bottom decoder layer, its context vector concatenated to the input of
every higher decoder layer and to the pre-projection state; shared
source/target embedding table.
"""

import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import layers as L
from .reservoir import (
    ReservoirSet,
    ReservoirSpec,
    generate_layer,
    layer_input_dim,
    recurrent_layer_keys,
)
from .tensor_core import Rng

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

COMPONENTS = (
    "embedding",
    "attention",
    "projection",
    "encoder_recurrent",
    "decoder_recurrent",
    "scaling_factors",
)

# Ablation presets, in cumulative-release table order. The two *_only rows
# release encoder or decoder as alternatives on top of plus_attention.
PRESET_ORDER = (
    "softmax_only",
    "plus_embedding",
    "plus_attention",
    "plus_encoder",
    "plus_decoder",
    "fully_trainable",
)

_PRESETS = {
    "softmax_only": ("projection",),
    "plus_embedding": ("projection", "embedding"),
    "plus_attention": ("projection", "embedding", "attention", "scaling_factors"),
    "plus_encoder": (
        "projection",
        "embedding",
        "attention",
        "scaling_factors",
        "encoder_recurrent",
    ),
    "plus_decoder": (
        "projection",
        "embedding",
        "attention",
        "scaling_factors",
        "decoder_recurrent",
    ),
    "fully_trainable": COMPONENTS,
}


@dataclass(frozen=True)
class TrainabilityMask:
    embedding: bool = False
    attention: bool = False
    projection: bool = True
    encoder_recurrent: bool = False
    decoder_recurrent: bool = False
    scaling_factors: bool = False

    def __post_init__(self):
        if not any(getattr(self, c) for c in COMPONENTS):
            raise ValueError("at least one component must be trainable")

    @classmethod
    def preset(cls, name: str) -> "TrainabilityMask":
        if name not in _PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {list(_PRESETS)}")
        on = _PRESETS[name]
        return cls(**{c: (c in on) for c in COMPONENTS})

    def component_trainable(self, component: str) -> bool:
        return bool(getattr(self, component))


@dataclass
class ModelConfig:
    vocab_size: int
    cell_type: str = "simple_rnn"
    hidden_dim: int = 64
    input_dim: Optional[int] = None
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    attention_dim: Optional[int] = None
    density: float = 0.775
    radius_norm_target: float = 1.0
    residual: bool = True
    fixed_rho: Optional[float] = None  # pin every layer radius, excluded from training
    init_gamma: float = 10.0  # initial input gain on frozen recurrent layers
    seed: int = 0

    def __post_init__(self):
        if self.input_dim is None:
            self.input_dim = self.hidden_dim
        if self.attention_dim is None:
            self.attention_dim = self.hidden_dim
        if self.vocab_size <= len((PAD_ID, BOS_ID, EOS_ID, UNK_ID)):
            raise ValueError(f"vocab_size must exceed the reserved ids, got {self.vocab_size}")

    @property
    def spec(self) -> ReservoirSpec:
        return ReservoirSpec(
            seed=self.seed,
            cell_type=self.cell_type,
            num_encoder_layers=self.num_encoder_layers,
            num_decoder_layers=self.num_decoder_layers,
            hidden_dim=self.hidden_dim,
            input_dim=self.input_dim,
            density=self.density,
            radius_norm_target=self.radius_norm_target,
        )


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[tuple, str]]:
    """Every tensor name -> (shape, component). Shared by the builder,
    frozen-fraction accounting, and the checkpoint reader."""
    d, din, a, V = cfg.hidden_dim, cfg.input_dim, cfg.attention_dim, cfg.vocab_size
    G = 4 if cfg.cell_type == "lstm" else 1
    spec = cfg.spec
    shapes: Dict[str, Tuple[tuple, str]] = {
        "emb": ((V, din), "embedding"),
        "attn.Wq": ((a, d), "attention"),
        "attn.Wk": ((a, d), "attention"),
        "attn.v": ((a,), "attention"),
        "out_mix.W": ((d, 2 * d), "projection"),
        "out_mix.b": ((d,), "projection"),
        "proj.W": ((V, d), "projection"),
        "proj.b": ((V,), "projection"),
        "enc.mix.W": ((d, 2 * d), "encoder_recurrent"),
        "enc.mix.b": ((d,), "encoder_recurrent"),
    }
    for key in recurrent_layer_keys(spec):
        comp = "encoder_recurrent" if key.startswith("enc.") else "decoder_recurrent"
        shapes[f"{key}.Wres"] = ((G * d, d), comp)
        shapes[f"{key}.Win"] = ((G * d, layer_input_dim(spec, key)), comp)
        if cfg.cell_type == "lstm":
            shapes[f"{key}.b"] = ((G * d,), comp)
        shapes[f"scale.{key}.rho"] = ((), "scaling_factors")
        shapes[f"scale.{key}.gamma"] = ((), "scaling_factors")
    return shapes


@dataclass
class EsnmtModel:
    config: ModelConfig
    mask: TrainabilityMask
    params: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    frozen: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def tensor(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.frozen[name]

    def scale(self, layer_key: str) -> Tuple[float, float]:
        return (
            float(self.tensor(f"scale.{layer_key}.rho")),
            float(self.tensor(f"scale.{layer_key}.gamma")),
        )

    def frozen_hashes(self) -> Dict[str, str]:
        out = {}
        for name in sorted(self.frozen):
            t = self.frozen[name]
            h = hashlib.sha256()
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t, dtype=np.float64).tobytes())
            out[name] = h.hexdigest()
        return out

    def copy(self) -> "EsnmtModel":
        return EsnmtModel(
            config=replace(self.config),
            mask=self.mask,
            params={k: v.copy() for k, v in self.params.items()},
            frozen=self.frozen,
        )

    def num_params(self) -> Tuple[int, int]:
        """(trainable, frozen) parameter counts."""
        return (
            sum(int(np.prod(v.shape)) if v.shape else 1 for v in self.params.values()),
            sum(int(np.prod(v.shape)) if v.shape else 1 for v in self.frozen.values()),
        )


def _layer_frozen(cfg: ModelConfig, mask: TrainabilityMask, layer_key: str) -> bool:
    comp = "encoder_recurrent" if layer_key.startswith("enc.") else "decoder_recurrent"
    return not mask.component_trainable(comp)


def build_model(cfg: ModelConfig, mask: TrainabilityMask,
                generate_frozen: bool = True) -> EsnmtModel:
    """Initialize every tensor deterministically from (config, mask, seed).

    Frozen recurrent layers come from the reservoir generator; trainable
    recurrent layers and all non-recurrent weights are uniform +-0.05 on
    per-tensor streams, biases zero. Everything, including frozen-random
    non-recurrent tensors, is regenerable from the seed, which is what the
    compressed checkpoint mode relies on. generate_frozen=False leaves frozen
    recurrent tensors zeroed for callers about to overwrite them (full
    checkpoint load).
    """
    shapes = parameter_shapes(cfg)
    spec = cfg.spec
    values: Dict[str, np.ndarray] = {}

    for key in recurrent_layer_keys(spec):
        if _layer_frozen(cfg, mask, key):
            if not generate_frozen:
                for suffix in ("Wres", "Win") + (("b",) if cfg.cell_type == "lstm" else ()):
                    values[f"{key}.{suffix}"] = np.zeros(shapes[f"{key}.{suffix}"][0])
                continue
            rset = ReservoirSet(spec)
            matrices, biases = generate_layer(spec, key)
            rset.matrices.update(matrices)
            rset.biases.update(biases)
            stacked = rset.stacked(key)
            values[f"{key}.Wres"] = stacked["Wres"]
            values[f"{key}.Win"] = stacked["Win"]
            if cfg.cell_type == "lstm":
                values[f"{key}.b"] = stacked["b"]

    for name, (shape, component) in shapes.items():
        if name in values or name.startswith("scale."):
            continue
        if name.endswith(".b") or name in ("out_mix.b", "proj.b", "enc.mix.b"):
            values[name] = np.zeros(shape)
        else:
            values[name] = Rng(cfg.seed, f"init.{name}").uniform(shape, -0.05, 0.05)

    for key in recurrent_layer_keys(spec):
        rho = cfg.fixed_rho if cfg.fixed_rho is not None else 1.0
        gamma = cfg.init_gamma if _layer_frozen(cfg, mask, key) else 1.0
        values[f"scale.{key}.rho"] = np.float64(rho).reshape(())
        values[f"scale.{key}.gamma"] = np.float64(gamma).reshape(())

    params, frozen = {}, {}
    for name, (shape, component) in shapes.items():
        trainable = mask.component_trainable(component)
        if name.startswith("scale.") and name.endswith(".rho") and cfg.fixed_rho is not None:
            trainable = False
        (params if trainable else frozen)[name] = values[name]
    return EsnmtModel(cfg, mask, params, frozen)


def _cell_weights(model: EsnmtModel, key: str):
    w = {"Wres": model.tensor(f"{key}.Wres"), "Win": model.tensor(f"{key}.Win")}
    w["b"] = model.tensor(f"{key}.b") if model.config.cell_type == "lstm" else None
    w["rho"], w["gamma"] = model.scale(key)
    return w


def _check_finite(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite activation in {where}")


class _Drop:
    """Per-forward dropout mask factory; records masks for backward."""

    def __init__(self, rate, rng, active):
        self.rate = rate if active else 0.0
        self.rng = rng
        self.masks = {}

    def __call__(self, x, key):
        if self.rate <= 0.0:
            return x
        m = L.dropout_mask(self.rng, x.shape, self.rate)
        self.masks[key] = m
        return x * m

    def grad(self, dx, key):
        if key in self.masks:
            return dx * self.masks[key]
        return dx


def _run_encoder_layer(model, key, P, Wres, b, rho, gamma, mask, reverse=False):
    """Unroll one recurrent direction over a (B, S, Gd) preprojected input."""
    lstm = model.config.cell_type == "lstm"
    B, S = P.shape[0], P.shape[1]
    d = model.config.hidden_dim
    H = np.zeros((B, S, d))
    h = np.zeros((B, d))
    c = np.zeros((B, d)) if lstm else None
    caches = [None] * S
    steps = range(S - 1, -1, -1) if reverse else range(S)
    for t in steps:
        m_t = mask[:, t : t + 1]
        if lstm:
            h, c, caches[t] = L.esn_lstm_step(h, c, P[:, t], Wres, b, rho, gamma, m_t)
        else:
            h, caches[t] = L.esn_step(h, P[:, t], Wres, rho, gamma, m_t)
        H[:, t] = h
    return H, caches


def _encode(model: EsnmtModel, src: np.ndarray, drop: _Drop):
    cfg = model.config
    B, S = src.shape
    smask = (src != PAD_ID).astype(np.float64)
    emb = model.tensor("emb")
    E = L.embed(emb, src)
    X0 = drop(E, "src_emb")

    cache = {"src": src, "smask": smask, "X0": X0, "enc": {}}
    # bidirectional bottom layer
    dir_H = {}
    for direction, rev in (("fwd", False), ("bwd", True)):
        key = f"enc.l1.{direction}"
        w = _cell_weights(model, key)
        P = X0.reshape(B * S, -1) @ w["Win"].T
        P = P.reshape(B, S, -1)
        H, caches = _run_encoder_layer(
            model, key, P, w["Wres"], w["b"], w["rho"], w["gamma"], smask, reverse=rev
        )
        dir_H[direction] = H
        cache["enc"][key] = {"caches": caches, "input": X0}
    C1 = np.concatenate([dir_H["fwd"], dir_H["bwd"]], axis=2)
    mixW, mixb = model.tensor("enc.mix.W"), model.tensor("enc.mix.b")
    Z = (C1.reshape(B * S, -1) @ mixW.T + mixb).reshape(B, S, -1)
    _check_finite(Z, "encoder layer 1")
    x = drop(Z, "enc.l1")
    cache["C1"] = C1

    for l in range(2, cfg.num_encoder_layers + 1):
        key = f"enc.l{l}"
        w = _cell_weights(model, key)
        P = (x.reshape(B * S, -1) @ w["Win"].T).reshape(B, S, -1)
        H, caches = _run_encoder_layer(
            model, key, P, w["Wres"], w["b"], w["rho"], w["gamma"], smask
        )
        _check_finite(H, key)
        cache["enc"][key] = {"caches": caches, "input": x}
        Hd = drop(H, key)
        x = Hd + x if cfg.residual else Hd
    cache["memory"] = x
    return x, smask, cache


def forward(model: EsnmtModel, src_ids, tgt_ids, mode: str = "train",
            dropout: float = 0.0, rng=None):
    """Teacher-forced forward pass.

    Returns (logits, cache) with logits of shape (B, T, vocab). Dropout is
    active only in train mode; eval mode is deterministic. cache holds every
    intermediate needed by backward().
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    src = np.asarray(src_ids, dtype=np.int64)
    tgt = np.asarray(tgt_ids, dtype=np.int64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] == 0 or tgt.shape[1] == 0:
        raise ValueError("source and target batches must be nonempty (B, T) arrays")
    if mode == "train" and dropout > 0.0 and rng is None:
        raise ValueError("train-mode dropout requires an rng")
    cfg = model.config
    d = cfg.hidden_dim
    lstm = cfg.cell_type == "lstm"
    B, T = tgt.shape
    drop = _Drop(dropout, rng, mode == "train")

    memory, smask, cache = _encode(model, src, drop)
    Wk = model.tensor("attn.Wk")
    Wq, v = model.tensor("attn.Wq"), model.tensor("attn.v")
    K = L.attention_keys(memory, Wk)

    dec_in = np.concatenate([np.full((B, 1), BOS_ID, dtype=np.int64), tgt[:, :-1]], axis=1)
    tmask = (tgt != PAD_ID).astype(np.float64)
    Y0 = drop(L.embed(model.tensor("emb"), dec_in), "tgt_emb")

    w1 = _cell_weights(model, "dec.l1")
    P1 = (Y0.reshape(B * T, -1) @ w1["Win"].T).reshape(B, T, -1)
    upper = [_cell_weights(model, f"dec.l{l}") for l in range(2, cfg.num_decoder_layers + 1)]

    h = [np.zeros((B, d)) for _ in range(cfg.num_decoder_layers)]
    c = [np.zeros((B, d)) for _ in range(cfg.num_decoder_layers)] if lstm else None
    step_caches = []
    S_arr = np.empty((B, T, 2 * d))
    O = np.empty((B, T, d))
    H_stack = np.empty((B, T, cfg.num_decoder_layers, d))
    mixW, mixb = model.tensor("out_mix.W"), model.tensor("out_mix.b")

    for t in range(T):
        m_t = tmask[:, t : t + 1]
        rec = {"cells": [], "inps": []}
        if lstm:
            h[0], c[0], cc = L.esn_lstm_step(h[0], c[0], P1[:, t], w1["Wres"], w1["b"],
                                             w1["rho"], w1["gamma"], m_t)
        else:
            h[0], cc = L.esn_step(h[0], P1[:, t], w1["Wres"], w1["rho"], w1["gamma"], m_t)
        rec["cells"].append(cc)
        H_stack[:, t, 0] = h[0]
        ctx, _, acache = L.attention(h[0], memory, K, smask, Wq, v)
        rec["attn"] = acache
        x = drop(h[0], f"dec.t{t}.l1")
        for li, w in enumerate(upper, start=1):
            inp = np.concatenate([x, ctx], axis=1)
            p = inp @ w["Win"].T
            if lstm:
                h[li], c[li], cc = L.esn_lstm_step(h[li], c[li], p, w["Wres"], w["b"],
                                                   w["rho"], w["gamma"], m_t)
            else:
                h[li], cc = L.esn_step(h[li], p, w["Wres"], w["rho"], w["gamma"], m_t)
            rec["cells"].append(cc)
            rec["inps"].append(inp)
            H_stack[:, t, li] = h[li]
            out = drop(h[li], f"dec.t{t}.l{li + 1}")
            x = out + x if cfg.residual else out
        s = np.concatenate([x, ctx], axis=1)
        S_arr[:, t] = s
        O[:, t] = s @ mixW.T + mixb
        step_caches.append(rec)

    for li in range(cfg.num_decoder_layers):
        _check_finite(H_stack[:, :, li], f"dec.l{li + 1}")
    projW, projb = model.tensor("proj.W"), model.tensor("proj.b")
    logits = (O.reshape(B * T, d) @ projW.T + projb).reshape(B, T, -1)
    _check_finite(logits, "output projection")

    cache.update(
        tgt=tgt, dec_in=dec_in, tmask=tmask, Y0=Y0, K=K, steps=step_caches,
        S_arr=S_arr, O=O, drop=drop, mode=mode,
    )
    return logits, cache


def loss(logits, tgt_ids, label_smoothing: float = 0.0):
    """Label-smoothed cross-entropy, averaged over non-pad target positions.

    Per position: (1 - eps) * nll(target) + eps * mean_v(-log p_v).
    Returns (scalar loss, gradient with respect to logits).
    """
    eps = label_smoothing
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {eps}")
    tgt = np.asarray(tgt_ids, dtype=np.int64)
    tmask = (tgt != PAD_ID).astype(np.float64)
    n = tmask.sum()
    if n == 0:
        raise ValueError("loss: every target position is padding")
    V = logits.shape[-1]
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    logp = logits - lse
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    uni = -logp.mean(axis=-1)
    value = float(np.sum(((1.0 - eps) * nll + eps * uni) * tmask) / n)

    p = np.exp(logp)
    target_dist = np.full_like(logits, eps / V)
    np.put_along_axis(
        target_dist, tgt[..., None],
        np.take_along_axis(target_dist, tgt[..., None], axis=-1) + (1.0 - eps),
        axis=-1,
    )
    dlogits = (p - target_dist) * tmask[..., None] / n
    return value, dlogits


def backward(model: EsnmtModel, cache, dlogits):
    """Gradients for exactly the mask-trainable tensors.

    Walks the decoder tape in reverse, then the attention/key projections,
    then the encoder stack. No gradient is ever allocated for a frozen
    tensor; trainable recurrent weights get theirs via the param-grad
    helpers.
    """
    cfg = model.config
    d = cfg.hidden_dim
    lstm = cfg.cell_type == "lstm"
    trainable = set(model.params)
    shapes = parameter_shapes(cfg)
    grads = {name: np.zeros(shapes[name][0]) for name in trainable}
    scalar_grads = {n: 0.0 for n in trainable if n.startswith("scale.")}
    drop = cache["drop"]
    memory, smask = cache["memory"], cache["smask"]
    tgt, tmask = cache["tgt"], cache["tmask"]
    B, T = tgt.shape
    S = memory.shape[1]

    projW = model.tensor("proj.W")
    dl_flat = dlogits.reshape(B * T, -1)
    if "proj.W" in trainable:
        grads["proj.W"] += dl_flat.T @ cache["O"].reshape(B * T, d)
        grads["proj.b"] += dl_flat.sum(axis=0)
    dO = (dl_flat @ projW).reshape(B, T, d)

    mixW = model.tensor("out_mix.W")
    Wq, Wk, v = model.tensor("attn.Wq"), model.tensor("attn.Wk"), model.tensor("attn.v")
    w1 = _cell_weights(model, "dec.l1")
    upper = [_cell_weights(model, f"dec.l{l}") for l in range(2, cfg.num_decoder_layers + 1)]

    carry_h = [np.zeros((B, d)) for _ in range(cfg.num_decoder_layers)]
    carry_c = [np.zeros((B, d)) for _ in range(cfg.num_decoder_layers)]
    dP1 = np.zeros((B, T, w1["Wres"].shape[0]))
    dM = np.zeros_like(memory)
    dK = np.zeros_like(cache["K"])

    def _scale_acc(key, drho, dgamma):
        rname, gname = f"scale.{key}.rho", f"scale.{key}.gamma"
        if rname in scalar_grads:
            scalar_grads[rname] += drho
        if gname in scalar_grads:
            scalar_grads[gname] += dgamma

    def _cell_backward(key, w, cc, dh, dc):
        if lstm:
            dh_prev, dc_prev, dp, drho, dgamma, da = L.esn_lstm_step_backward(
                cc, dh, dc, w["Wres"]
            )
        else:
            dh_prev, dp, drho, dgamma, da = L.esn_step_backward(cc, dh, w["Wres"])
            dc_prev = None
        _scale_acc(key, drho, dgamma)
        if f"{key}.Wres" in trainable:
            if lstm:
                dW, db = L.lstm_step_param_grads(cc, da)
                grads[f"{key}.Wres"] += dW
                grads[f"{key}.b"] += db
            else:
                grads[f"{key}.Wres"] += L.esn_step_param_grads(cc, da)
        return dh_prev, dc_prev, dp

    for t in range(T - 1, -1, -1):
        rec = cache["steps"][t]
        do_t = dO[:, t]
        s_t = cache["S_arr"][:, t]
        if "out_mix.W" in trainable:
            grads["out_mix.W"] += do_t.T @ s_t
            grads["out_mix.b"] += do_t.sum(axis=0)
        ds = do_t @ mixW
        dx = ds[:, :d].copy()
        dctx = ds[:, d:].copy()

        for li in range(cfg.num_decoder_layers - 1, 0, -1):
            key = f"dec.l{li + 1}"
            w = upper[li - 1]
            cc = rec["cells"][li]
            dout = dx
            dh = drop.grad(dout, f"dec.t{t}.l{li + 1}") + carry_h[li]
            dh_prev, dc_prev, dp = _cell_backward(key, w, cc, dh, carry_c[li])
            carry_h[li] = dh_prev
            if lstm:
                carry_c[li] = dc_prev
            inp = rec["inps"][li - 1]
            if f"{key}.Win" in trainable:
                grads[f"{key}.Win"] += dp.T @ inp
            dinp = dp @ w["Win"]
            dx = dinp[:, :d] + (dout if cfg.residual else 0.0)
            dctx = dctx + dinp[:, d:]

        dh1 = drop.grad(dx, f"dec.t{t}.l1")
        dquery, dmem_c, dkeys_c, dWq_c, dv_c = L.attention_backward(
            rec["attn"], dctx, memory, Wq, v
        )
        dM += dmem_c
        dK += dkeys_c
        if "attn.Wq" in trainable:
            grads["attn.Wq"] += dWq_c
            grads["attn.v"] += dv_c
        dh1 = dh1 + dquery + carry_h[0]
        dh_prev, dc_prev, dp = _cell_backward("dec.l1", w1, rec["cells"][0], dh1, carry_c[0])
        carry_h[0] = dh_prev
        if lstm:
            carry_c[0] = dc_prev
        dP1[:, t] = dp

    Y0 = cache["Y0"]
    dP1_flat = dP1.reshape(B * T, -1)
    if "dec.l1.Win" in trainable:
        grads["dec.l1.Win"] += dP1_flat.T @ Y0.reshape(B * T, -1)
    dY0 = (dP1_flat @ w1["Win"]).reshape(B, T, -1)
    dEd = drop.grad(dY0, "tgt_emb")
    if "emb" in trainable:
        grads["emb"] += L.embed_backward(cfg.vocab_size, cfg.input_dim, cache["dec_in"], dEd)

    dK_flat = dK.reshape(B * S, -1)
    if "attn.Wk" in trainable:
        grads["attn.Wk"] += dK_flat.T @ memory.reshape(B * S, d)
    dM += (dK_flat @ Wk).reshape(B, S, d)

    # encoder stack
    dx = dM
    for l in range(cfg.num_encoder_layers, 1, -1):
        key = f"enc.l{l}"
        w = _cell_weights(model, key)
        entry = cache["enc"][key]
        dout = dx
        dH = drop.grad(dout, key)
        carry = np.zeros((B, d))
        carry_cell = np.zeros((B, d))
        dP = np.zeros((B, S, w["Wres"].shape[0]))
        for t in range(S - 1, -1, -1):
            dh = dH[:, t] + carry
            dh_prev, dc_prev, dp = _cell_backward(key, w, entry["caches"][t], dh, carry_cell)
            carry = dh_prev
            if lstm:
                carry_cell = dc_prev
            dP[:, t] = dp
        dP_flat = dP.reshape(B * S, -1)
        x_in = entry["input"]
        if f"{key}.Win" in trainable:
            grads[f"{key}.Win"] += dP_flat.T @ x_in.reshape(B * S, -1)
        dx = (dP_flat @ w["Win"]).reshape(B, S, -1) + (dout if cfg.residual else 0.0)

    dZ = drop.grad(dx, "enc.l1")
    C1 = cache["C1"]
    if "enc.mix.W" in trainable:
        grads["enc.mix.W"] += dZ.reshape(B * S, d).T @ C1.reshape(B * S, 2 * d)
        grads["enc.mix.b"] += dZ.reshape(B * S, d).sum(axis=0)
    dC1 = (dZ.reshape(B * S, d) @ model.tensor("enc.mix.W")).reshape(B, S, 2 * d)

    dX0 = np.zeros_like(cache["X0"])
    for direction, rev in (("fwd", False), ("bwd", True)):
        key = f"enc.l1.{direction}"
        w = _cell_weights(model, key)
        entry = cache["enc"][key]
        dH = dC1[:, :, :d] if direction == "fwd" else dC1[:, :, d:]
        carry = np.zeros((B, d))
        carry_cell = np.zeros((B, d))
        dP = np.zeros((B, S, w["Wres"].shape[0]))
        # gradient flows opposite to the recurrence direction
        steps = range(S) if rev else range(S - 1, -1, -1)
        for t in steps:
            dh = dH[:, t] + carry
            dh_prev, dc_prev, dp = _cell_backward(key, w, entry["caches"][t], dh, carry_cell)
            carry = dh_prev
            if lstm:
                carry_cell = dc_prev
            dP[:, t] = dp
        dP_flat = dP.reshape(B * S, -1)
        if f"{key}.Win" in trainable:
            grads[f"{key}.Win"] += dP_flat.T @ cache["X0"].reshape(B * S, -1)
        dX0 += (dP_flat @ w["Win"]).reshape(B, S, -1)

    dE = drop.grad(dX0, "src_emb")
    if "emb" in trainable:
        grads["emb"] += L.embed_backward(cfg.vocab_size, cfg.input_dim, cache["src"], dE)

    for name, val in scalar_grads.items():
        grads[name] = np.float64(val).reshape(())
    return grads


def greedy_decode(model: EsnmtModel, src_ids, max_len: int):
    """Autoregressive argmax decode; returns one id list per sequence,
    stopping at the end symbol (which is not included)."""
    if max_len <= 0:
        raise ValueError(f"max_len must be positive, got {max_len}")
    cfg = model.config
    d = cfg.hidden_dim
    lstm = cfg.cell_type == "lstm"
    src = np.asarray(src_ids, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    B = src.shape[0]
    drop = _Drop(0.0, None, False)
    memory, smask, _ = _encode(model, src, drop)
    K = L.attention_keys(memory, model.tensor("attn.Wk"))
    Wq, v = model.tensor("attn.Wq"), model.tensor("attn.v")
    emb = model.tensor("emb")
    mixW, mixb = model.tensor("out_mix.W"), model.tensor("out_mix.b")
    projW, projb = model.tensor("proj.W"), model.tensor("proj.b")
    w1 = _cell_weights(model, "dec.l1")
    upper = [_cell_weights(model, f"dec.l{l}") for l in range(2, cfg.num_decoder_layers + 1)]

    h = [np.zeros((B, d)) for _ in range(cfg.num_decoder_layers)]
    c = [np.zeros((B, d)) for _ in range(cfg.num_decoder_layers)]
    tokens = np.full((B,), BOS_ID, dtype=np.int64)
    finished = np.zeros(B, dtype=bool)
    outputs = [[] for _ in range(B)]
    for _ in range(max_len):
        y = L.embed(emb, tokens)
        p1 = y @ w1["Win"].T
        if lstm:
            h[0], c[0], _ = L.esn_lstm_step(h[0], c[0], p1, w1["Wres"], w1["b"],
                                            w1["rho"], w1["gamma"])
        else:
            h[0], _ = L.esn_step(h[0], p1, w1["Wres"], w1["rho"], w1["gamma"])
        ctx, _, _ = L.attention(h[0], memory, K, smask, Wq, v)
        x = h[0]
        for li, w in enumerate(upper, start=1):
            inp = np.concatenate([x, ctx], axis=1)
            p = inp @ w["Win"].T
            if lstm:
                h[li], c[li], _ = L.esn_lstm_step(h[li], c[li], p, w["Wres"], w["b"],
                                                  w["rho"], w["gamma"])
            else:
                h[li], _ = L.esn_step(h[li], p, w["Wres"], w["rho"], w["gamma"])
            x = h[li] + x if cfg.residual else h[li]
        s = np.concatenate([x, ctx], axis=1)
        logits = (s @ mixW.T + mixb) @ projW.T + projb
        tokens = logits.argmax(axis=1)
        for b in range(B):
            if not finished[b]:
                if tokens[b] == EOS_ID:
                    finished[b] = True
                else:
                    outputs[b].append(int(tokens[b]))
        if finished.all():
            break
    return outputs
