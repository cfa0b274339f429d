"""Pure-numpy implementations of the two hot kernels.

This module is self-contained on purpose: it is the reference the compiled
kernel is checked against, and the fallback selected at import when the
extension is not built. The heavy pieces are

  * `pav_pool`          - weighted pool-adjacent-violators isotonic fit,
  * `train_step_inplace`- one fused adversarial training step (both
                          objectives, momentum SGD, batchnorm bookkeeping).

The loss/gradient helpers are exposed separately so finite-difference
tests can probe the analytic gradients directly.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

BN_EPS = 1e-5
PROB_CLAMP = 1e-7

ENC_PARAMS = ("enc_w", "enc_b", "bn_gamma", "bn_beta")
DEC_PARAMS = ("dec_w", "dec_b")
ADV_PARAMS = ("adv_w1", "adv_b1", "adv_w2", "adv_b2")


def pav_pool(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted isotonic (non-decreasing) least-squares fit.

    `values` must already be ordered by the regressor; ties in the
    regressor are expected to be pre-pooled into single weighted entries.
    Returns the fitted value for every entry.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = values.shape[0]
    level = np.empty(n)
    wsum = np.empty(n)
    count = np.empty(n, dtype=np.intp)
    top = -1
    for i in range(n):
        top += 1
        level[top] = values[i]
        wsum[top] = weights[i]
        count[top] = 1
        while top > 0 and level[top - 1] > level[top]:
            merged = wsum[top - 1] + wsum[top]
            level[top - 1] = (level[top - 1] * wsum[top - 1]
                              + level[top] * wsum[top]) / merged
            wsum[top - 1] = merged
            count[top - 1] += count[top]
            top -= 1
    fitted = np.empty(n)
    pos = 0
    for b in range(top + 1):
        fitted[pos:pos + count[b]] = level[b]
        pos += count[b]
    return fitted


def _encoder_forward(params, X):
    """Dense + ReLU + train-mode batchnorm. Returns every intermediate."""
    pre = X @ params["enc_w"].T + params["enc_b"]
    act = np.maximum(pre, 0.0)
    mu = act.mean(axis=0)
    var = act.var(axis=0)  # biased convention
    inv = 1.0 / np.sqrt(var + BN_EPS)
    norm = (act - mu) * inv
    z = params["bn_gamma"] * norm + params["bn_beta"]
    return pre, act, mu, var, inv, norm, z


def _adversary_forward(params, Z):
    hpre = Z @ params["adv_w1"].T + params["adv_b1"]
    h = np.maximum(hpre, 0.0)
    logit = h @ params["adv_w2"] + params["adv_b2"][0]
    return hpre, h, expit(logit)


def _decoder_forward(params, Z, w_cond):
    zw = np.concatenate([Z, w_cond[:, None]], axis=1)
    q = zw @ params["dec_w"].T + params["dec_b"]
    t = np.tanh(q)
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    xhat = t / norms
    return zw, t, norms, xhat


def adversary_objective(params, X, y, want_grads=True):
    """Mean negative log true-class probability (encoder frozen).

    Returns (loss, grads) where grads covers the adversary parameters
    only; grads is None when `want_grads` is false.
    """
    m = X.shape[0]
    *_, Z = _encoder_forward(params, X)
    hpre, h, yhat = _adversary_forward(params, Z)
    p_true = np.where(y == 1, yhat, 1.0 - yhat)
    loss = float(-np.mean(np.log(np.clip(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP))))
    if not want_grads:
        return loss, None
    # the clamp keeps the reported loss finite; the true-loss gradient is
    # already bounded, so it is never masked
    dlogit = (yhat - y) / m
    dh = np.outer(dlogit, params["adv_w2"])
    dh[hpre <= 0.0] = 0.0
    grads = {
        "adv_w2": h.T @ dlogit,
        "adv_b2": np.array([dlogit.sum()]),
        "adv_w1": dh.T @ Z,
        "adv_b1": dh.sum(axis=0),
    }
    return loss, grads


def autoencoder_objective(params, X, y, w_cond, want_grads=True):
    """Reconstruction-plus-fooling objective (adversary frozen).

    loss = mean_i [ (1 - cos(xhat_i, x_i)) - log(1 - p_true_i) ], where
    p_true is the adversary's probability of the true class. Gradients
    cover encoder, batchnorm affine and decoder parameters.
    """
    m = X.shape[0]
    pre, act, mu, var, inv, norm, Z = _encoder_forward(params, X)
    zw, t, norms, xhat = _decoder_forward(params, Z, w_cond)
    hpre, h, yhat = _adversary_forward(params, Z)

    xnorm = np.linalg.norm(X, axis=1)
    cos = np.einsum("ij,ij->i", xhat, X) / xnorm
    recon = 1.0 - cos
    p_true = np.where(y == 1, yhat, 1.0 - yhat)
    fool = 1.0 - p_true
    loss = float(np.mean(
        recon - np.log(np.clip(fool, PROB_CLAMP, 1.0 - PROB_CLAMP))))
    if not want_grads:
        return loss, None

    # reconstruction path: through length-norm then tanh
    dxhat = -X / (xnorm[:, None] * m)
    dt = (dxhat - np.einsum("ij,ij->i", dxhat, xhat)[:, None] * xhat) / norms
    dq = dt * (1.0 - t * t)
    dzw = dq @ params["dec_w"]
    dz = dzw[:, :-1].copy()

    # fooling path: through the frozen adversary into z (bounded gradient,
    # not masked by the loss-side clamp)
    dlogit = (yhat - (1.0 - y)) / m
    dh = np.outer(dlogit, params["adv_w2"])
    dh[hpre <= 0.0] = 0.0
    dz += dh @ params["adv_w1"]

    # batchnorm backward (train mode, biased variance)
    dnorm = dz * params["bn_gamma"]
    dact = inv / m * (m * dnorm - dnorm.sum(axis=0)
                      - norm * (dnorm * norm).sum(axis=0))
    dpre = np.where(pre > 0.0, dact, 0.0)

    grads = {
        "dec_w": dq.T @ zw,
        "dec_b": dq.sum(axis=0),
        "bn_gamma": (dz * norm).sum(axis=0),
        "bn_beta": dz.sum(axis=0),
        "enc_w": dpre.T @ X,
        "enc_b": dpre.sum(axis=0),
    }
    return loss, grads


def _sgd(params, velocity, grads, lr, momentum):
    for name, g in grads.items():
        v = velocity[name]
        v *= momentum
        v += g
        params[name] -= lr * v


def train_step_inplace(params, velocity, X, y, w_cond, lr, adv_lr, momentum,
                       bn_momentum, update_running=True):
    """One adversarial step on a batch; mutates params/velocity/BN stats.

    Order: adversary first (encoder frozen, stepped at adv_lr), then
    encoder-decoder against the just-updated adversary (stepped at lr),
    both on the same batch. Returns the two loss values (each evaluated
    before its player's update).
    """
    if update_running:
        _, act, mu, var, *_ = _encoder_forward(params, X)
        params["bn_run_mean"] *= 1.0 - bn_momentum
        params["bn_run_mean"] += bn_momentum * mu
        params["bn_run_var"] *= 1.0 - bn_momentum
        params["bn_run_var"] += bn_momentum * var
        np.maximum(params["bn_run_var"], BN_EPS, out=params["bn_run_var"])

    loss_d, g_adv = adversary_objective(params, X, y, want_grads=True)
    _sgd(params, velocity, g_adv, adv_lr, momentum)
    loss_ae, g_enc = autoencoder_objective(params, X, y, w_cond,
                                           want_grads=True)
    _sgd(params, velocity, g_enc, lr, momentum)
    return loss_d, loss_ae
