"""Seed-derived frozen matrices for every recurrent layer.

A ReservoirSpec fully determines every frozen matrix: draws are uniform
[-1, 1), a seed-determined subset of entries is pruned to exact zero until the
target density is reached, and each recurrent (square) matrix is rescaled so
its measured spectral radius equals radius_norm_target. Input matrices are
pruned but not spectrally normalized (they are rectangular; their scale is
absorbed by the learnable per-layer input gain downstream). Regeneration from
the same spec is bit-identical, which is what makes seed-based checkpoint
compression possible.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .tensor_core import Rng, SparseMatrix, spectral_radius

LSTM_GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class ReservoirSpec:
    seed: int
    cell_type: str = "simple_rnn"  # simple_rnn | lstm
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    hidden_dim: int = 64
    input_dim: int = 64
    density: float = 0.775
    radius_norm_target: float = 1.0

    def __post_init__(self):
        if self.cell_type not in ("simple_rnn", "lstm"):
            raise ValueError(f"unknown cell_type {self.cell_type!r}")
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        for name in ("num_encoder_layers", "num_decoder_layers", "hidden_dim", "input_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def recurrent_layer_keys(spec: ReservoirSpec) -> List[str]:
    """All recurrent layer identifiers, bottom encoder layer split by direction."""
    keys = ["enc.l1.fwd", "enc.l1.bwd"]
    keys += [f"enc.l{l}" for l in range(2, spec.num_encoder_layers + 1)]
    keys += [f"dec.l{l}" for l in range(1, spec.num_decoder_layers + 1)]
    return keys


def layer_input_dim(spec: ReservoirSpec, layer_key: str) -> int:
    """Input width seen by a layer's input transformation matrix."""
    if layer_key in ("enc.l1.fwd", "enc.l1.bwd") or layer_key == "dec.l1":
        return spec.input_dim
    if layer_key.startswith("enc."):
        return spec.hidden_dim
    # upper decoder layers consume [hidden, attention context]
    return 2 * spec.hidden_dim


@dataclass
class ReservoirSet:
    """Frozen matrices for every recurrent layer, plus the spec that made them.

    matrices maps "<layer>.Wres[.<gate>]" / "<layer>.Win[.<gate>]" to pruned
    SparseMatrix values; biases maps "<layer>.b.<gate>" to vectors (lstm only).
    """

    spec: ReservoirSpec
    matrices: Dict[str, SparseMatrix] = field(default_factory=dict)
    biases: Dict[str, np.ndarray] = field(default_factory=dict)

    def stacked(self, layer_key: str) -> Dict[str, np.ndarray]:
        """Dense compute view of one layer: Wres (G*d, d), Win (G*d, in), b (G*d,)."""
        if self.spec.cell_type == "simple_rnn":
            return {
                "Wres": self.matrices[f"{layer_key}.Wres"].toarray(),
                "Win": self.matrices[f"{layer_key}.Win"].toarray(),
            }
        wres = np.concatenate(
            [self.matrices[f"{layer_key}.Wres.{g}"].toarray() for g in LSTM_GATES]
        )
        win = np.concatenate(
            [self.matrices[f"{layer_key}.Win.{g}"].toarray() for g in LSTM_GATES]
        )
        b = np.concatenate([self.biases[f"{layer_key}.b.{g}"] for g in LSTM_GATES])
        return {"Wres": wres, "Win": win, "b": b}


def _draw_pruned(rng: Rng, rows: int, cols: int, density: float) -> np.ndarray:
    flat = rng.uniform((rows * cols,), -1.0, 1.0)
    keep = int(round(density * rows * cols))
    perm = rng.permutation(rows * cols)
    flat[perm[keep:]] = 0.0
    return flat.reshape(rows, cols)


def _generate_square(spec: ReservoirSpec, label: str) -> SparseMatrix:
    """Draw, prune and spectrally normalize one recurrent matrix.

    A pathological zero-radius draw is retried on a fresh sub-stream; more
    than 3 retries is a hard error.
    """
    d = spec.hidden_dim
    for attempt in range(4):
        stream = label if attempt == 0 else f"{label}.retry{attempt}"
        w = _draw_pruned(Rng(spec.seed, stream), d, d, spec.density)
        est = spectral_radius(w, tol=1e-9, max_iters=5000)
        # power iteration stalls when several eigenvalue moduli are nearly
        # degenerate; the normalization target is a hard invariant, so fall
        # back to the dense eigensolver rather than scale by a bad estimate
        radius = est.value if est.converged else float(
            np.max(np.abs(np.linalg.eigvals(w))))
        if radius > 0.0:
            w *= spec.radius_norm_target / radius
            return SparseMatrix(d, d, w)
    raise RuntimeError(f"spectral radius estimated as 0 for {label} after 3 retries")


def generate_layer(spec: ReservoirSpec, layer_key: str) -> Tuple[Dict[str, SparseMatrix], Dict[str, np.ndarray]]:
    """Frozen matrices (and lstm biases) for a single recurrent layer."""
    in_dim = layer_input_dim(spec, layer_key)
    d = spec.hidden_dim
    matrices: Dict[str, SparseMatrix] = {}
    biases: Dict[str, np.ndarray] = {}
    if spec.cell_type == "simple_rnn":
        matrices[f"{layer_key}.Wres"] = _generate_square(spec, f"{layer_key}.Wres")
        win = _draw_pruned(Rng(spec.seed, f"{layer_key}.Win"), d, in_dim, spec.density)
        matrices[f"{layer_key}.Win"] = SparseMatrix(d, in_dim, win)
    else:
        for g in LSTM_GATES:
            matrices[f"{layer_key}.Wres.{g}"] = _generate_square(spec, f"{layer_key}.Wres.{g}")
            win = _draw_pruned(Rng(spec.seed, f"{layer_key}.Win.{g}"), d, in_dim, spec.density)
            matrices[f"{layer_key}.Win.{g}"] = SparseMatrix(d, in_dim, win)
            biases[f"{layer_key}.b.{g}"] = Rng(spec.seed, f"{layer_key}.b.{g}").uniform(
                (d,), -0.1, 0.1
            )
    return matrices, biases


def generate_reservoirs(spec: ReservoirSpec) -> ReservoirSet:
    """Generate every frozen recurrent matrix of the model from the spec."""
    rset = ReservoirSet(spec)
    for key in recurrent_layer_keys(spec):
        matrices, biases = generate_layer(spec, key)
        rset.matrices.update(matrices)
        rset.biases.update(biases)
    return rset


def frozen_fraction(spec: ReservoirSpec, vocab_size: int, attention_dim: int = 0) -> float:
    """Fraction of parameters recoverable from the seed alone.

    Counts the standard frozen-recurrent configuration: embeddings, attention,
    output projection and the per-layer scaling factors are trainable; all
    recurrent matrices plus the bidirectional-encoder mixing map are frozen.
    """
    if vocab_size <= 0:
        raise ValueError(f"vocab_size must be positive, got {vocab_size}")
    from .model import ModelConfig, TrainabilityMask, parameter_shapes

    cfg = ModelConfig(
        cell_type=spec.cell_type,
        hidden_dim=spec.hidden_dim,
        input_dim=spec.input_dim,
        num_encoder_layers=spec.num_encoder_layers,
        num_decoder_layers=spec.num_decoder_layers,
        vocab_size=vocab_size,
        attention_dim=attention_dim if attention_dim > 0 else None,
        density=spec.density,
        radius_norm_target=spec.radius_norm_target,
        seed=spec.seed,
    )
    shapes = parameter_shapes(cfg)
    mask = TrainabilityMask.preset("plus_attention")
    frozen = total = 0
    for name, (shape, component) in shapes.items():
        count = int(np.prod(shape)) if shape else 1
        total += count
        if not mask.component_trainable(component):
            frozen += count
    return frozen / total
