"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from echonmt.model import ModelConfig, TrainabilityMask, build_model


def tiny_config(cell_type="simple_rnn", **overrides):
    """Small but structurally complete model configuration (bidirectional
    bottom encoder layer, one upper layer on each side, attention)."""
    kwargs = dict(
        vocab_size=11,
        cell_type=cell_type,
        hidden_dim=8,
        num_encoder_layers=2,
        num_decoder_layers=2,
        seed=5,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def tiny_model(cell_type="simple_rnn", preset="plus_attention", **overrides):
    return build_model(tiny_config(cell_type, **overrides), TrainabilityMask.preset(preset))


def healthy_operating_point(model, seed=7):
    """Move a freshly built model to a numerically well-conditioned state for
    finite-difference checks: re-randomize the trainable non-scalar tensors to
    uniform(-0.5, 0.5) and set every layer scale to rho=0.9, gamma=1.0.

    The builder's defaults (tiny +-0.05 weights, gamma=10 on frozen layers)
    are fine for training but drive many gradient components below the
    float64 finite-difference noise floor, which makes relative comparisons
    meaningless.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if p.shape:
            model.params[name] = rng.uniform(-0.5, 0.5, p.shape)
    for store in (model.params, model.frozen):
        for name in list(store):
            if name.endswith(".gamma"):
                store[name] = np.array(1.0)
            elif name.endswith(".rho"):
                store[name] = np.array(0.9)
    return model


def toy_batch():
    """Fixed (src, tgt) id batch with one padded row in each."""
    src = np.array([[4, 5, 6, 7, 0], [8, 9, 10, 4, 5]])
    tgt = np.array([[5, 4, 7, 2, 0], [10, 9, 8, 4, 2]])
    return src, tgt


def relative_error(analytic, numeric, floor=1e-6):
    """Gradient-check metric: true relative error for any gradient whose
    magnitude is above the finite-difference noise floor, absolute error
    scaled by the floor below it."""
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def fd_gradient_check(model, grads, loss_fn, samples_per_tensor=8, eps=1e-5, seed=11):
    """Worst relative error between analytic gradients and central finite
    differences over a random sample of entries of every trainable tensor."""
    rng = np.random.default_rng(seed)
    worst = (0.0, None)
    for name in sorted(model.params):
        analytic = np.asarray(grads[name]).reshape(-1)
        p = model.params[name]
        if p.shape:
            flat = p.reshape(-1)
            picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        else:
            flat, picks = None, [0]
        for i in picks:
            if flat is None:
                orig = float(model.params[name])
                model.params[name] = np.array(orig + eps)
                lp = loss_fn()
                model.params[name] = np.array(orig - eps)
                lm = loss_fn()
                model.params[name] = np.array(orig)
            else:
                orig = flat[i]
                flat[i] = orig + eps
                lp = loss_fn()
                flat[i] = orig - eps
                lm = loss_fn()
                flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            rel = relative_error(analytic[i], numeric)
            if rel > worst[0]:
                worst = (rel, name)
    return worst


@pytest.fixture
def tmp_run_dir(tmp_path):
    return tmp_path / "run"
