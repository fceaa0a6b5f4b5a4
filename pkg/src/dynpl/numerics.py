"""Dense numerical core with hand-derived gradients.

Arrays keep their floating dtype (float64 unless the caller passes float32);
integer inputs are promoted to float64. Sequence tensors use a ``(batch, positions,
channels)`` layout internally; the single-instance helpers
(:func:`conv1d_same`) accept the column-per-token layout ``(channels, N)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7

ACTIVATIONS = ("tanh", "linear")


def sigmoid(x):
    return expit(x)


def _as_float(a):
    a = np.asarray(a)
    return a if a.dtype in (np.float32, np.float64) else a.astype(np.float64)


def softmax(v, mask=None, axis=-1):
    """Masked, max-shifted softmax.

    Masked-out positions (``mask == False``) receive exactly zero weight.
    Raises ``ValueError`` if every position along ``axis`` is masked.
    """
    v = _as_float(v)
    if mask is None:
        shifted = v - v.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("softmax over an all-masked slice")
    filled = np.where(mask, v, -np.inf)
    shifted = filled - filled.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(alpha, grad_alpha, axis=-1):
    """Gradient of a softmax w.r.t. its logits given d(loss)/d(alpha)."""
    inner = (alpha * grad_alpha).sum(axis=axis, keepdims=True)
    return alpha * (grad_alpha - inner)


def bce(p, y, eps: float = BCE_EPS):
    """Binary cross-entropy on probabilities, clamped to ``[eps, 1 - eps]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def bce_with_logits(z, y):
    """BCE evaluated from the logit; equals ``bce(sigmoid(z), y)`` away from the clamp."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.logaddexp(0.0, z) - y * z


def dropout_mask(rng: np.random.Generator, shape, p: float, dtype=np.float64):
    """Inverted-dropout mask: zeros with probability ``p``, survivors scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    dtype = np.dtype(dtype)
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape, dtype=dtype) >= p
    return keep * dtype.type(1.0 / (1.0 - p))


def dropout(x, p: float, rng: np.random.Generator | None, train: bool = True):
    if not train or p == 0.0:
        return x
    return x * dropout_mask(rng, np.shape(x), p)


def scatter_add(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``target[idx] += rows`` with repeated indices accumulated (faster than ``np.add.at``)."""
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    uniq, starts = np.unique(sorted_idx, return_index=True)
    target[uniq] += np.add.reduceat(rows[order], starts, axis=0)


# --------------------------------------------------------------------------
# convolution


def _activate(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _unfold(X, k):
    """(B, n, d) -> (B*n, k*d): row t holds inputs t .. t+k-1, zeros past the end."""
    B, n, d = X.shape
    cols = np.zeros((B, n, k, d), dtype=X.dtype)
    for j in range(min(k, n)):
        cols[:, : n - j, j, :] = X[:, j:]
    return cols.reshape(B * n, k * d)


def conv_forward(X, W, b, cols=None):
    """Width-k convolution with stride 1 and right zero padding.

    X: (B, n, d_in), W: (d_out, k, d_in), b: (d_out,) -> pre-activation (B, n, d_out).
    Output position t sees inputs t .. t+k-1; inputs past n are zero.
    ``cols`` may carry a precomputed :func:`_unfold` of ``X``.
    """
    d_out, k, d_in = W.shape
    if k <= 0:
        raise ValueError("filter width must be positive")
    B, n, _ = X.shape
    if cols is None:
        cols = _unfold(X, k)
    Z = cols @ W.reshape(d_out, k * d_in).T + b
    return Z.reshape(B, n, d_out)


def conv_backward(dZ, X, W, cols=None):
    """Returns (dX, dW, db) for :func:`conv_forward`."""
    d_out, k, d_in = W.shape
    B, n, _ = X.shape
    if cols is None:
        cols = _unfold(X, k)
    dZ2 = dZ.reshape(B * n, d_out)
    dW = (dZ2.T @ cols).reshape(d_out, k, d_in)
    dcols = (dZ2 @ W.reshape(d_out, k * d_in)).reshape(B, n, k, d_in)
    dX = np.zeros_like(X)
    for j in range(min(k, n)):
        dX[:, j:] += dcols[:, : n - j, j, :]
    db = dZ2.sum(axis=0)
    return dX, dW, db


def conv1d_same(X, weights, bias, activation: str = "tanh"):
    """Single-instance convolution in column layout.

    X is ``(d_e, N)`` (one embedding per column), ``weights`` is
    ``(d_f, k, d_e)``; the result is ``(d_f, N)``.
    """
    X = np.asarray(X, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[1] <= 0:
        raise ValueError("weights must have shape (d_f, k, d_e) with k >= 1")
    if X.shape[1] < 1:
        raise ValueError("need at least one position")
    Z = conv_forward(X.T[None], weights, np.asarray(bias, dtype=np.float64))[0]
    return _activate(Z, activation).T


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState) -> dict:
    """One bias-corrected Adam update, in place.

    Only parameters present in ``grads`` move; their moment buffers are the
    only ones touched, so a parameter left out of ``grads`` stays bit-identical.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------
# gradient verification


def grad_check(
    loss_and_grad: Callable[[dict], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-6,
    skip: Callable[[str, tuple], bool] | None = None,
) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return ``(loss, grads)`` and be deterministic.
    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = loss_and_grad(params)
    worst = 0.0
    for name, value in params.items():
        a = np.asarray(analytic.get(name, np.zeros_like(value)))
        flat = value.reshape(-1)
        for i in range(flat.size):
            if skip is not None and skip(name, np.unravel_index(i, value.shape)):
                continue
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_and_grad(params)
            flat[i] = orig - h
            down, _ = loss_and_grad(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - numeric) / max(abs(ai), abs(numeric), floor)
            if err > worst:
                worst = err
                logger.debug("grad_check %s[%d]: analytic %.3e numeric %.3e", name, i, ai, numeric)
    return worst
