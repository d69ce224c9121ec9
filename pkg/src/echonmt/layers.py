"""Forward and analytic backward passes for every layer type.

All step functions are batched: states are (B, d) arrays, inputs (B, k).
The convention for every linear map is y = x @ W.T with W of shape (out, in).
Recurrent input projections are precomputed where possible: the cells take
p_t = x_t @ Win.T instead of x_t itself, so a whole sequence's input
transformations become one matmul.

Backward functions return gradients for the recurrent state, the input
projection, and the two scaling factors only; gradients with respect to the
(usually frozen) weight matrices are produced by the separate *_param_grads
helpers and are never allocated on the frozen path.
"""

from typing import Dict, NamedTuple, Tuple

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class EsnStepCache(NamedTuple):
    h_prev: np.ndarray
    u: np.ndarray  # h_prev @ Wres.T
    p: np.ndarray  # x_t @ Win.T (unscaled)
    h_full: np.ndarray  # tanh activation before state masking
    mask: np.ndarray  # (B, 1) validity mask
    rho: float
    gamma: float


def esn_step(h_prev, p_t, Wres, rho, gamma, mask=None):
    """One adaptive echo-state step: h = tanh(rho*Wres@h_prev + gamma*Win@x).

    p_t is the precomputed input projection x_t @ Win.T. mask (B, 1) zeroes
    the new state at padded positions so right-padded batches and the
    reversed-direction encoder behave as if each sequence ran alone.
    """
    if mask is None:
        mask = np.ones((h_prev.shape[0], 1))
    u = h_prev @ Wres.T
    h_full = np.tanh(rho * u + gamma * p_t)
    h = h_full * mask
    return h, EsnStepCache(h_prev, u, p_t, h_full, mask, float(rho), float(gamma))


def esn_step_backward(cache: EsnStepCache, dh, Wres):
    """Gradients for (h_prev, p_t, rho, gamma) only; never for Wres/Win."""
    da = (dh * cache.mask) * (1.0 - cache.h_full**2)
    drho = float(np.sum(da * cache.u))
    dgamma = float(np.sum(da * cache.p))
    dh_prev = cache.rho * (da @ Wres)
    dp = cache.gamma * da
    return dh_prev, dp, drho, dgamma, da


def esn_step_param_grads(cache: EsnStepCache, da):
    """Weight gradients for the trainable-recurrent variants.

    da is the pre-activation gradient returned by esn_step_backward; the Win
    gradient is recovered from the accumulated dp outside (p = x @ Win.T).
    """
    return cache.rho * (da.T @ cache.h_prev)


class LstmStepCache(NamedTuple):
    h_prev: np.ndarray
    c_prev: np.ndarray
    u: np.ndarray  # (B, 4d) recurrent pre-projection
    p: np.ndarray  # (B, 4d) input pre-projection
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_full: np.ndarray
    tc: np.ndarray  # tanh(c_full)
    mask: np.ndarray
    rho: float
    gamma: float


def esn_lstm_step(h_prev, c_prev, p_t, Wres, b, rho, gamma, mask=None):
    """Adaptive frozen-LSTM step.

    Standard gate equations with every recurrent pre-activation scaled by rho
    and every input pre-activation by gamma; gate order in the stacked (4d,)
    axis is input, forget, candidate, output. b may be None (trainable cells
    initialize it to zero and pass it explicitly).
    """
    B = h_prev.shape[0]
    d = h_prev.shape[1]
    if mask is None:
        mask = np.ones((B, 1))
    u = h_prev @ Wres.T
    a = rho * u + gamma * p_t
    if b is not None:
        a = a + b
    i = _sigmoid(a[:, :d])
    f = _sigmoid(a[:, d : 2 * d])
    g = np.tanh(a[:, 2 * d : 3 * d])
    o = _sigmoid(a[:, 3 * d :])
    c_full = f * c_prev + i * g
    tc = np.tanh(c_full)
    h = (o * tc) * mask
    c = c_full * mask
    return h, c, LstmStepCache(h_prev, c_prev, u, p_t, i, f, g, o, c_full, tc, mask, float(rho), float(gamma))


def esn_lstm_step_backward(cache: LstmStepCache, dh, dc, Wres):
    """Gradients for (h_prev, c_prev, p_t, rho, gamma); no weight gradients."""
    i, f, g, o, tc = cache.i, cache.f, cache.g, cache.o, cache.tc
    dh = dh * cache.mask
    dc_full = dc * cache.mask + dh * o * (1.0 - tc**2)
    do = dh * tc
    di = dc_full * g
    dg = dc_full * i
    df = dc_full * cache.c_prev
    dc_prev = dc_full * f
    da = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g**2), do * o * (1.0 - o)],
        axis=1,
    )
    drho = float(np.sum(da * cache.u))
    dgamma = float(np.sum(da * cache.p))
    dh_prev = cache.rho * (da @ Wres)
    dp = cache.gamma * da
    return dh_prev, dc_prev, dp, drho, dgamma, da


def lstm_step_param_grads(cache: LstmStepCache, da):
    """(dWres, db) for trainable-recurrent lstm variants."""
    return cache.rho * (da.T @ cache.h_prev), da.sum(axis=0)


class AttentionCache(NamedTuple):
    query_in: np.ndarray  # (B, d) raw query state
    q: np.ndarray  # (B, a)
    z: np.ndarray  # (B, S, a) tanh scores
    w: np.ndarray  # (B, S) attention weights


def attention_keys(memory, Wk):
    """Precompute key projections (B, S, a) for a whole source batch."""
    B, S, d = memory.shape
    return (memory.reshape(B * S, d) @ Wk.T).reshape(B, S, -1)


def attention(query, memory, keys, source_mask, Wq, v):
    """Single-head additive attention.

    score(b, s) = v . tanh(Wq q_b + K_bs); weights are a masked softmax over
    source positions, context the weighted sum of memory vectors. Weights are
    exactly zero at masked positions. Raises if a batch row has every
    position masked.
    """
    if memory.shape[1] == 0:
        raise ValueError("attention memory must be nonempty")
    if not np.all(source_mask.sum(axis=1) > 0):
        raise ValueError("attention: all source positions masked for some batch row")
    q = query @ Wq.T
    z = np.tanh(q[:, None, :] + keys)
    e = z @ v
    e = np.where(source_mask > 0, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    ex = np.exp(e)
    w = ex / ex.sum(axis=1, keepdims=True)
    context = np.einsum("bs,bsd->bd", w, memory)
    return context, w, AttentionCache(query, q, z, w)


def attention_backward(cache: AttentionCache, dcontext, memory, Wq, v):
    """Backward through one attention query.

    Returns (dquery, dmemory, dkeys, dWq, dv); dmemory/dkeys are per-call
    contributions the caller accumulates across decoder timesteps, and the
    key-projection weight gradient is recovered from the accumulated dkeys.
    """
    w, z = cache.w, cache.z
    dw = np.einsum("bd,bsd->bs", dcontext, memory)
    dmemory = w[:, :, None] * dcontext[:, None, :]
    de = w * (dw - np.sum(dw * w, axis=1, keepdims=True))
    dv = np.einsum("bsa,bs->a", z, de)
    dz = de[:, :, None] * v[None, None, :]
    dkeys = dz * (1.0 - z**2)
    dq = dkeys.sum(axis=1)
    dWq = dq.T @ cache.query_in
    dquery = dq @ Wq
    return dquery, dmemory, dkeys, dWq, dv


def embed(table, ids):
    """Row lookup; ids outside the table are a hard error."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"token id out of range: ids in [{ids.min()}, {ids.max()}], vocab {table.shape[0]}"
        )
    return table[ids]


def embed_backward(vocab_size, dim, ids, dout):
    """Scatter-add gradient for an embedding table."""
    grad = np.zeros((vocab_size, dim))
    np.add.at(grad, np.asarray(ids).reshape(-1), dout.reshape(-1, dim))
    return grad


def project_logits(hidden, W, b):
    """Affine map to vocabulary logits."""
    return hidden @ W.T + b


def project_logits_backward(hidden, dlogits, W):
    """Backward for the affine vocab projection; hidden/dlogits are 2-D."""
    dW = dlogits.T @ hidden
    db = dlogits.sum(axis=0)
    dhidden = dlogits @ W
    return dhidden, dW, db


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: entries are 0 or 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep
