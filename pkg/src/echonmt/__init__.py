"""Frozen-reservoir sequence-to-sequence translation models.

Recurrent encoder/decoder weights are randomly generated, spectrally
normalized and frozen; only embeddings, attention, the output projection and
per-layer scaling factors train. Because every frozen tensor is a
deterministic function of one seed, trained models compress to the seed plus
the trainable tensors.
"""

from .data_eval import ParallelCorpus, ToyTask, Vocab, corpus_bleu, make_toy_task
from .model import (
    EsnmtModel,
    ModelConfig,
    TrainabilityMask,
    backward,
    build_model,
    forward,
    greedy_decode,
    loss,
)
from .reservoir import ReservoirSet, ReservoirSpec, frozen_fraction, generate_reservoirs
from .tensor_core import Rng, SparseMatrix, matvec, seeded_uniform, spectral_radius
from .training import MetricsLog, TrainConfig, train

__all__ = [
    "EsnmtModel", "MetricsLog", "ModelConfig", "ParallelCorpus", "ReservoirSet",
    "ReservoirSpec", "Rng", "SparseMatrix", "ToyTask", "TrainConfig",
    "TrainabilityMask", "Vocab", "backward", "build_model", "corpus_bleu",
    "forward", "frozen_fraction", "generate_reservoirs", "greedy_decode", "loss",
    "make_toy_task", "matvec", "seeded_uniform", "spectral_radius", "train",
]

__version__ = "0.1.0"
