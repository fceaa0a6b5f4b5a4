"""Convolutional per-problem attention network, outcome head, baselines and the logistic oracle.

Shapes used throughout (batched path):

* tokens ``(B, n)``, embeddings ``X`` ``(B, n, d_e)``
* conv outputs ``H`` ``(B, 3n, d_f)``: position ``i`` belongs to filter width
  ``i // n + 1`` and starts at token ``i % n``
* per-problem attention ``alpha`` ``(B, 3n, L)``

Pad positions (``t >= length``) of every filter block are masked out of
attention and max-pooling. Parameters live in a flat ``dict[str, ndarray]``;
names starting with ``outcome.`` form the outcome head.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import minimize

from . import numerics as nx
from .corpus import PAD_ID, Narrative
from .errors import DataError

logger = logging.getLogger(__name__)

MODEL_KINDS = ("dynpl", "cnn_max", "conv_attn")
CHECKPOINT_VERSION = 1

ModelParams = dict  # name -> np.ndarray


@dataclass
class ModelConfig:
    kind: str = "dynpl"
    vocab_size: int = 0
    n_labels: int = 0
    embed_dim: int = 100
    n_filters: int = 64
    widths: tuple = (1, 2, 3)
    embed_dropout: float = 0.2
    conv_dropout: float = 0.3
    activation: str = "tanh"
    dtype: str = "float64"  # compute precision for batched training and inference

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.widths = tuple(int(w) for w in self.widths)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator, embeddings: np.ndarray | None = None) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; embeddings copied if given."""
    d_e, d_f, L = cfg.embed_dim, cfg.n_filters, cfg.n_labels
    p: ModelParams = {}
    if embeddings is not None:
        if embeddings.shape != (cfg.vocab_size, d_e):
            raise ValueError(f"embedding shape {embeddings.shape} != ({cfg.vocab_size}, {d_e})")
        p["embedding"] = np.array(embeddings, dtype=np.float64)
    else:
        p["embedding"] = _uniform(rng, (cfg.vocab_size, d_e), d_e)
    p["embedding"][PAD_ID] = 0.0
    for k in cfg.widths:
        p[f"conv{k}.weight"] = _uniform(rng, (d_f, k, d_e), k * d_e)
        p[f"conv{k}.bias"] = np.zeros(d_f)
    if cfg.kind == "dynpl":
        p["attention.query"] = _uniform(rng, (L, d_f), d_f)
        p["problem.weight"] = _uniform(rng, (L, d_f), d_f)
        p["problem.bias"] = np.zeros(L)
        p["outcome.weight"] = _uniform(rng, (L,), L)
    elif cfg.kind == "conv_attn":
        p["attention.query"] = _uniform(rng, (1, d_f), d_f)
        p["outcome.weight"] = _uniform(rng, (d_f,), d_f)
    else:
        n_feat = len(cfg.widths) * d_f
        p["outcome.weight"] = _uniform(rng, (n_feat,), n_feat)
    p["outcome.bias"] = np.zeros(1)
    return p


def is_outcome_param(name: str) -> bool:
    return name.startswith("outcome.")


def cast_params(params: Mapping, dtype) -> ModelParams:
    """Parameters in the compute dtype; the model functions follow the dtype of what they are given."""
    dtype = np.dtype(dtype)
    return {k: v if v.dtype == dtype else v.astype(dtype) for k, v in params.items()}


# --------------------------------------------------------------------------
# dropout masks


def draw_masks(rng: np.random.Generator, length: int, cfg: ModelConfig) -> dict:
    """Per-instance inverted-dropout masks for a sequence of ``length`` tokens."""
    return {
        "embed": nx.dropout_mask(rng, (length, cfg.embed_dim), cfg.embed_dropout, cfg.dtype),
        "conv": nx.dropout_mask(rng, (len(cfg.widths), length, cfg.n_filters), cfg.conv_dropout, cfg.dtype),
    }


def batch_masks(masks: list[dict], n: int, cfg: ModelConfig) -> dict:
    """Stack per-instance masks into ``(B, n, d_e)`` and ``(B, 3n, d_f)`` arrays (pads get 1)."""
    B, K = len(masks), len(cfg.widths)
    emb = np.ones((B, n, cfg.embed_dim), dtype=cfg.dtype)
    conv = np.ones((B, K, n, cfg.n_filters), dtype=cfg.dtype)
    for b, m in enumerate(masks):
        ln = m["embed"].shape[0]
        emb[b, :ln] = m["embed"]
        conv[b, :, :ln] = m["conv"]
    return {"embed": emb, "conv": conv.reshape(B, K * n, cfg.n_filters)}


# --------------------------------------------------------------------------
# shared trunk


def pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if np.any(lengths == 0):
        raise DataError("empty narrative in batch")
    n = int(lengths.max())
    tokens = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for b, s in enumerate(seqs):
        tokens[b, : len(s)] = s
    return tokens, lengths


def trunk_forward(params: Mapping, tokens, lengths, cfg: ModelConfig, masks: dict | None):
    B, n = tokens.shape
    valid = np.arange(n)[None, :] < lengths[:, None]
    nonpad = (tokens != PAD_ID) & valid
    if not valid[:, 0].all():
        raise DataError("narrative with zero tokens")
    X = params["embedding"][tokens] * nonpad[..., None]
    if masks is not None:
        X = X * masks["embed"]
    # one unfold at the widest filter serves every width (its first k*d_e columns)
    k_max = max(cfg.widths)
    cols = nx._unfold(X, k_max)
    d_e = X.shape[-1]
    Hs = []
    for k in cfg.widths:
        Z = nx.conv_forward(X, params[f"conv{k}.weight"], params[f"conv{k}.bias"], cols[:, : k * d_e])
        Hs.append(nx._activate(Z, cfg.activation))
    H_raw = np.concatenate(Hs, axis=1)
    H = H_raw * masks["conv"] if masks is not None else H_raw
    pos_valid = np.tile(valid, (1, len(cfg.widths)))
    cache = {"tokens": tokens, "nonpad": nonpad, "X": X, "cols": cols, "H_raw": H_raw, "masks": masks, "n": n}
    return H, pos_valid, cache


def trunk_backward(dH, params: Mapping, cache: dict, cfg: ModelConfig, grads: dict) -> None:
    masks, n = cache["masks"], cache["n"]
    if masks is not None:
        dH = dH * masks["conv"]
    X, cols = cache["X"], cache["cols"]
    B, _, d_e = X.shape
    k_max = max(cfg.widths)
    dcols = np.zeros((B * n, k_max * d_e), dtype=X.dtype)
    for j, k in enumerate(cfg.widths):
        Hk = cache["H_raw"][:, j * n : (j + 1) * n]
        dZ = dH[:, j * n : (j + 1) * n]
        if cfg.activation == "tanh":
            dZ = dZ * (1.0 - Hk * Hk)
        W = params[f"conv{k}.weight"]
        d_f = W.shape[0]
        dZ2 = dZ.reshape(B * n, d_f)
        grads[f"conv{k}.weight"] = (dZ2.T @ cols[:, : k * d_e]).reshape(W.shape)
        grads[f"conv{k}.bias"] = dZ2.sum(axis=0)
        dcols[:, : k * d_e] += dZ2 @ W.reshape(d_f, k * d_e)
    dcols = dcols.reshape(B, n, k_max, d_e)
    dX = np.zeros_like(X)
    for j in range(min(k_max, n)):
        dX[:, j:] += dcols[:, : n - j, j, :]
    if masks is not None:
        dX = dX * masks["embed"]
    dX = dX * cache["nonpad"][..., None]
    dE = np.zeros_like(params["embedding"])
    sel = cache["nonpad"].ravel()
    nx.scatter_add(dE, cache["tokens"].ravel()[sel], dX.reshape(-1, dX.shape[-1])[sel])
    grads["embedding"] = dE


# --------------------------------------------------------------------------
# heads (batched)


def _outcome_logit(S, w, b):
    # elementwise product + row sum: identical rounding for any batch size
    return (S * w).sum(axis=-1) + b[0]


def dynpl_forward(params, tokens, lengths, cfg: ModelConfig, masks=None):
    H, pos_valid, trunk = trunk_forward(params, tokens, lengths, cfg, masks)
    d_f = H.shape[-1]
    Q = params["attention.query"]
    B, P, _ = H.shape
    A = (H.reshape(B * P, d_f) @ Q.T).reshape(B, P, -1) / math.sqrt(d_f)
    alpha = nx.softmax(A, pos_valid[..., None], axis=1)
    V = alpha.transpose(0, 2, 1) @ H
    S = (V * params["problem.weight"]).sum(axis=-1) + params["problem.bias"]
    o = _outcome_logit(S, params["outcome.weight"], params["outcome.bias"])
    cache = {"trunk": trunk, "H": H, "alpha": alpha, "V": V, "S": S}
    return {"scores": S, "outcome_logit": o, "attention": alpha}, cache


def dynpl_backward(params, cache, cfg: ModelConfig, d_scores, d_outcome):
    """Gradients given d(loss)/d(problem logits) ``(B, L)`` and d(loss)/d(outcome logit) ``(B,)`` or None."""
    grads = {}
    S, V, H, alpha = cache["S"], cache["V"], cache["H"], cache["alpha"]
    dS = np.array(d_scores, dtype=H.dtype)
    if d_outcome is not None:
        grads["outcome.weight"] = d_outcome @ S
        grads["outcome.bias"] = np.array([d_outcome.sum()])
        dS = dS + d_outcome[:, None] * params["outcome.weight"][None, :]
    grads["problem.weight"] = (dS[..., None] * V).sum(axis=0)
    grads["problem.bias"] = dS.sum(axis=0)
    dV = dS[..., None] * params["problem.weight"][None]
    d_alpha = H @ dV.transpose(0, 2, 1)
    dH = alpha @ dV
    dA = nx.softmax_backward(alpha, d_alpha, axis=1)
    scale = 1.0 / math.sqrt(H.shape[-1])
    B, P, d_f = H.shape
    dH += (dA.reshape(B * P, -1) @ params["attention.query"]).reshape(B, P, d_f) * scale
    grads["attention.query"] = (dA.reshape(-1, dA.shape[-1]).T @ H.reshape(-1, H.shape[-1])) * scale
    trunk_backward(dH, params, cache["trunk"], cfg, grads)
    return grads


def conv_attn_forward(params, tokens, lengths, cfg: ModelConfig, masks=None):
    H, pos_valid, trunk = trunk_forward(params, tokens, lengths, cfg, masks)
    q = params["attention.query"][0]
    a = (H @ q) / math.sqrt(H.shape[-1])
    alpha = nx.softmax(a, pos_valid, axis=1)
    v = (alpha[:, None, :] @ H)[:, 0, :]
    o = _outcome_logit(v, params["outcome.weight"], params["outcome.bias"])
    cache = {"trunk": trunk, "H": H, "alpha": alpha, "v": v}
    return {"outcome_logit": o, "attention": alpha}, cache


def conv_attn_backward(params, cache, cfg: ModelConfig, d_scores, d_outcome):
    grads = {}
    H, alpha, v = cache["H"], cache["alpha"], cache["v"]
    grads["outcome.weight"] = d_outcome @ v
    grads["outcome.bias"] = np.array([d_outcome.sum()])
    dv = d_outcome[:, None] * params["outcome.weight"][None]
    d_alpha = H @ dv[:, :, None]
    dH = alpha[..., None] * dv[:, None, :]
    da = nx.softmax_backward(alpha, d_alpha[..., 0], axis=1)
    scale = 1.0 / math.sqrt(H.shape[-1])
    q = params["attention.query"][0]
    dH += da[..., None] * q[None, None, :] * scale
    grads["attention.query"] = (da.reshape(1, -1) @ H.reshape(-1, H.shape[-1])) * scale
    trunk_backward(dH, params, cache["trunk"], cfg, grads)
    return grads


def cnn_max_forward(params, tokens, lengths, cfg: ModelConfig, masks=None):
    H, pos_valid, trunk = trunk_forward(params, tokens, lengths, cfg, masks)
    B, P, d_f = H.shape
    K = len(cfg.widths)
    n = P // K
    Hb = H.reshape(B, K, n, d_f)
    valid = pos_valid.reshape(B, K, n)[..., None]
    filled = np.where(valid, Hb, -np.inf)
    arg = filled.argmax(axis=2)  # (B, K, d_f)
    pooled = np.take_along_axis(Hb, arg[:, :, None, :], axis=2)[:, :, 0, :]
    feat = pooled.reshape(B, K * d_f)
    o = _outcome_logit(feat, params["outcome.weight"], params["outcome.bias"])
    cache = {"trunk": trunk, "arg": arg, "feat": feat, "shape": (B, K, n, d_f)}
    return {"outcome_logit": o, "pooled": feat, "argmax": arg}, cache


def cnn_max_backward(params, cache, cfg: ModelConfig, d_scores, d_outcome):
    grads = {}
    B, K, n, d_f = cache["shape"]
    grads["outcome.weight"] = d_outcome @ cache["feat"]
    grads["outcome.bias"] = np.array([d_outcome.sum()])
    dfeat = (d_outcome[:, None] * params["outcome.weight"][None]).reshape(B, K, 1, d_f)
    dHb = np.zeros((B, K, n, d_f), dtype=cache["feat"].dtype)
    np.put_along_axis(dHb, cache["arg"][:, :, None, :], dfeat, axis=2)
    trunk_backward(dHb.reshape(B, K * n, d_f), params, cache["trunk"], cfg, grads)
    return grads


_FORWARD = {"dynpl": dynpl_forward, "conv_attn": conv_attn_forward, "cnn_max": cnn_max_forward}
_BACKWARD = {"dynpl": dynpl_backward, "conv_attn": conv_attn_backward, "cnn_max": cnn_max_backward}


def forward_batch(params, tokens, lengths, cfg: ModelConfig, masks=None):
    return _FORWARD[cfg.kind](params, tokens, lengths, cfg, masks)


def backward_batch(params, cache, cfg: ModelConfig, d_scores, d_outcome):
    return _BACKWARD[cfg.kind](params, cache, cfg, d_scores, d_outcome)


# --------------------------------------------------------------------------
# single-instance operations


def attend(H, q, mask=None):
    """Scaled dot-product attention of one query over the columns of ``H`` (d_f x P).

    Returns ``(alpha, v)`` with ``alpha`` over the P positions (masked ones
    exactly zero) and ``v = H @ alpha``.
    """
    H = np.asarray(H, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    alpha = nx.softmax(H.T @ q / math.sqrt(H.shape[0]), mask)
    return alpha, H @ alpha


def problem_heads(H, mask, params: Mapping):
    """Raw scores ``s``, probabilities and attention ``(L, P)`` for every problem."""
    Q, W, b = params["attention.query"], params["problem.weight"], params["problem.bias"]
    alphas, scores = [], []
    for l in range(Q.shape[0]):
        alpha, v = attend(H, Q[l], mask)
        alphas.append(alpha)
        scores.append(W[l] @ v + b[l])
    s = np.array(scores)
    return s, nx.sigmoid(s), np.array(alphas)


def outcome_head(s, params: Mapping) -> float:
    s = np.asarray(s, dtype=np.float64)
    logit = _outcome_logit(s[None, :], params["outcome.weight"], params["outcome.bias"])[0]
    return float(nx.sigmoid(logit))


def decode_position(i: int, n: int) -> tuple[int, int]:
    """Attention index -> (filter width, start token) for a narrative of true length ``n``."""
    if not 0 <= i < 3 * n:
        raise IndexError(f"attention index {i} outside [0, {3 * n})")
    return i // n + 1, i % n


@dataclass
class PredictionBundle:
    stay_id: str
    probabilities: np.ndarray  # (L,)
    scores: np.ndarray  # (L,)
    attention: np.ndarray  # (L, 3N), N = true narrative length
    outcome_probability: float
    length: int

    def decode(self, i: int) -> tuple[int, int]:
        return decode_position(i, self.length)


def _single(narrative: Narrative | np.ndarray):
    ids = narrative.ids if isinstance(narrative, Narrative) else np.asarray(narrative)
    stay = narrative.stay_id if isinstance(narrative, Narrative) else ""
    if ids.size == 0:
        raise DataError(f"narrative {stay!r} has no tokens")
    tokens, lengths = pad_batch([ids])
    return stay, tokens, lengths


def forward(narrative, params, cfg: ModelConfig, mode: str = "eval", rng: np.random.Generator | None = None) -> PredictionBundle:
    """Full problem-list forward pass for one narrative (dropout only in ``train`` mode)."""
    if cfg.kind != "dynpl":
        raise ValueError("forward() builds problem lists; use the baseline functions for baselines")
    stay, tokens, lengths = _single(narrative)
    masks = None
    if mode == "train":
        rng = rng or np.random.default_rng()
        masks = batch_masks([draw_masks(rng, int(lengths[0]), cfg)], tokens.shape[1], cfg)
    elif mode != "eval":
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    out, _ = dynpl_forward(params, tokens, lengths, cfg, masks)
    s = out["scores"][0]
    return PredictionBundle(
        stay_id=stay,
        probabilities=nx.sigmoid(s),
        scores=s,
        attention=out["attention"][0].T.copy(),
        outcome_probability=float(nx.sigmoid(out["outcome_logit"][0])),
        length=int(lengths[0]),
    )


def baseline_cnn_max(narrative, params, cfg: ModelConfig) -> float:
    _, tokens, lengths = _single(narrative)
    out, _ = cnn_max_forward(params, tokens, lengths, cfg)
    return float(nx.sigmoid(out["outcome_logit"][0]))


def baseline_conv_attn(narrative, params, cfg: ModelConfig) -> tuple[float, np.ndarray]:
    _, tokens, lengths = _single(narrative)
    out, _ = conv_attn_forward(params, tokens, lengths, cfg)
    return float(nx.sigmoid(out["outcome_logit"][0])), out["attention"][0]


# --------------------------------------------------------------------------
# logistic-regression oracle


@dataclass
class LogisticOracle:
    weight: np.ndarray
    bias: float
    l2: float = 1e-4

    def predict_proba(self, X) -> np.ndarray:
        return nx.sigmoid(np.asarray(X, dtype=np.float64) @ self.weight + self.bias)


def oracle_logreg(X, y, l2: float = 1e-4, tol: float = 1e-10, max_iter: int = 5000) -> LogisticOracle:
    """L2-regularized logistic regression on ground-truth label vectors.

    Minimizes mean BCE + ``l2/2 * ||w||^2`` (intercept unpenalized) with
    L-BFGS on the analytic gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(np.unique(y)) < 2:
        raise DataError("oracle training set has a single outcome class")
    n, d = X.shape

    def fg(theta):
        w, b = theta[:d], theta[d]
        z = X @ w + b
        loss = nx.bce_with_logits(z, y).mean() + 0.5 * l2 * (w @ w)
        r = (nx.sigmoid(z) - y) / n
        return loss, np.r_[X.T @ r + l2 * w, r.sum()]

    base = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    theta0 = np.r_[np.zeros(d), math.log(base / (1 - base))]
    res = minimize(fg, theta0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15})
    return LogisticOracle(res.x[:d].copy(), float(res.x[d]), l2)


# --------------------------------------------------------------------------
# checkpoints


def params_digest(params: Mapping, names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """``np.savez``-compatible archive with fixed timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    label_space_hash: str = ""
    vocab_hash: str = ""
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "label_space_hash": self.label_space_hash,
            "vocab_hash": self.vocab_hash,
            "extra": self.extra,
        }
        arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
        arrays.update({f"param/{k}": self.params[k] for k in sorted(self.params)})
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path, label_space_hash: str | None = None, vocab_hash: str | None = None) -> "Checkpoint":
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            params = {k[len("param/") :]: z[k].copy() for k in z.files if k.startswith("param/")}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")
        if label_space_hash is not None and meta["label_space_hash"] != label_space_hash:
            raise DataError("checkpoint label space does not match")
        if vocab_hash is not None and meta["vocab_hash"] != vocab_hash:
            raise DataError("checkpoint vocabulary does not match")
        cfg = meta["config"]
        cfg["widths"] = tuple(cfg["widths"])
        return cls(params, ModelConfig(**cfg), meta["label_space_hash"], meta["vocab_hash"], meta.get("extra", {}))
