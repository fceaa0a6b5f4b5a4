"""Gated multi-task training, the frozen-extractor ablation and the k-fold harness."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .corpus import split_patients
from .errors import DataError
from .model import ModelConfig, backward_batch, batch_masks, cast_params, draw_masks, forward_batch, is_outcome_param, pad_batch

logger = logging.getLogger(__name__)

OBJECTIVES = ("gated", "problems", "outcome")


@dataclass
class TrainConfig:
    batch_size: int = 32
    micro_batch: int = 32
    lr: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    threshold_p: float = 0.90
    objective: str = "gated"
    freeze_extractor: bool = False
    seed: int = 0
    fold: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        for name in ("batch_size", "micro_batch", "max_epochs", "patience", "eval_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.threshold_p < 0:
            raise ValueError("threshold_p must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochReport:
    epoch: int
    loss_problem: float
    loss_outcome: float
    val_p: float
    val_outcome_auroc: float
    gate_open: bool
    outcome_loss_active: bool
    val_outcome_auprc: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class EncodedDataset:
    stay_ids: list[str]
    patient_ids: list[str]
    seqs: list[np.ndarray]
    labels: np.ndarray
    outcomes: np.ndarray

    def __len__(self):
        return len(self.seqs)

    def subset(self, idx) -> "EncodedDataset":
        idx = list(idx)
        return EncodedDataset(
            [self.stay_ids[i] for i in idx],
            [self.patient_ids[i] for i in idx],
            [self.seqs[i] for i in idx],
            self.labels[idx],
            self.outcomes[idx],
        )


# --------------------------------------------------------------------------
# losses


def loss_problem(p_hat, y) -> float:
    """Sum of per-problem BCE; mean over instances for a 2-D batch."""
    per = nx.bce(p_hat, y).sum(axis=-1)
    return float(np.mean(per))


def loss_outcome(p_hat, y) -> float:
    return float(np.mean(nx.bce(p_hat, y)))


def gated_loss(l_p: float, l_o: float, val_p: float, threshold_p: float) -> float:
    return l_p + l_o if val_p >= threshold_p else l_p


# --------------------------------------------------------------------------
# gradients


def instance_masks(cfg: ModelConfig, seed: int, epoch: int, index: int, length: int) -> dict:
    """Dropout masks for one training instance; independent of batch composition."""
    return draw_masks(np.random.default_rng([seed, 1, epoch, index]), length, cfg)


def batch_gradient(params, cfg: ModelConfig, ds: EncodedDataset, idx: Sequence[int], use_problem: bool, use_outcome: bool, masks=None, outcome_only: bool = False):
    """Summed (not averaged) loss terms and float64 gradients over instances ``idx``.

    Forward and backward run in ``cfg.dtype``.
    """
    dt = np.dtype(cfg.dtype)
    cp = cast_params(params, dt)
    seqs = [ds.seqs[i] for i in idx]
    tokens, lengths = pad_batch(seqs)
    bm = batch_masks(masks, tokens.shape[1], cfg) if masks is not None else None
    out, cache = forward_batch(cp, tokens, lengths, cfg, bm)
    y_o = ds.outcomes[idx].astype(dt)
    o = out["outcome_logit"]
    l_o = float(nx.bce_with_logits(o, y_o).sum())
    d_o = (nx.sigmoid(o) - y_o) if use_outcome else None
    l_p = 0.0
    d_s = None
    if cfg.kind == "dynpl":
        S = out["scores"]
        Y = ds.labels[idx].astype(dt)
        l_p = float(nx.bce_with_logits(S, Y).sum())
        d_s = (nx.sigmoid(S) - Y) if use_problem else np.zeros_like(S)
    if outcome_only:
        feat = cache["S"] if cfg.kind == "dynpl" else cache.get("v", cache.get("feat"))
        grads = {"outcome.weight": d_o @ feat, "outcome.bias": np.array([d_o.sum()])}
    else:
        grads = backward_batch(cp, cache, cfg, d_s, d_o)
    return l_p, l_o, {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}


def accumulated_gradient(params, cfg, ds, idx, tcfg: TrainConfig, epoch: int, use_problem: bool, use_outcome: bool, outcome_only: bool = False, train_mode: bool = True):
    """Mean gradient over one effective batch, accumulated over micro-batches."""
    total = None
    l_p = l_o = 0.0
    for start in range(0, len(idx), tcfg.micro_batch):
        mid = idx[start : start + tcfg.micro_batch]
        masks = [instance_masks(cfg, tcfg.seed, epoch, int(i), len(ds.seqs[i])) for i in mid] if train_mode else None
        p, o, g = batch_gradient(params, cfg, ds, mid, use_problem, use_outcome, masks, outcome_only)
        l_p += p
        l_o += o
        if total is None:
            total = g
        else:
            for k, v in g.items():
                total[k] += v
    n = len(idx)
    return l_p / n, l_o / n, {k: v / n for k, v in total.items()}


def epoch_batches(lengths: Sequence[int], batch_size: int, seed: int, epoch: int, pool: int = 16) -> list[np.ndarray]:
    """Seeded shuffle into batches of similar length.

    The shuffled order is cut into pools of ``pool`` batches; each pool is
    sorted by length before batching, and the batch order is shuffled again.
    Composition depends only on ``(seed, epoch)``.
    """
    rng = np.random.default_rng([seed, 0, epoch])
    perm = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    batches = []
    step = batch_size * pool
    for start in range(0, len(perm), step):
        chunk = perm[start : start + step]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# --------------------------------------------------------------------------
# inference


def predict(params, cfg: ModelConfig, ds: EncodedDataset, batch: int = 64) -> dict:
    """Eval-mode predictions: problem scores/probabilities (dynpl) and outcome probabilities."""
    order = np.argsort([len(s) for s in ds.seqs], kind="stable")
    params = cast_params(params, cfg.dtype)
    n = len(ds)
    outcome = np.zeros(n)
    scores = np.zeros((n, cfg.n_labels)) if cfg.kind == "dynpl" else None
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        tokens, lengths = pad_batch([ds.seqs[i] for i in idx])
        out, _ = forward_batch(params, tokens, lengths, cfg, None)
        outcome[idx] = nx.sigmoid(out["outcome_logit"])
        if scores is not None:
            scores[idx] = out["scores"]
    res = {"outcome_prob": outcome}
    if scores is not None:
        res["scores"] = scores
        res["problem_prob"] = nx.sigmoid(scores)
    return res


def evaluate(params, cfg: ModelConfig, ds: EncodedDataset, batch: int = 64) -> dict:
    pred = predict(params, cfg, ds, batch)
    out = {
        "outcome_auroc": metrics.au_roc(pred["outcome_prob"], ds.outcomes),
        "outcome_auprc": metrics.au_pr(pred["outcome_prob"], ds.outcomes),
    }
    if cfg.kind == "dynpl":
        mm = metrics.micro_macro(pred["problem_prob"], ds.labels)
        out.update({f"extraction_{k}": v for k, v in mm.items()})
    return out, pred


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    reports: list[EpochReport]
    best_epoch: int
    diverged: bool = False
    final_params: dict = field(default_factory=dict, repr=False)


def _better(a, b):
    a = -math.inf if a is None or math.isnan(a) else a
    b = -math.inf if b is None or math.isnan(b) else b
    return a > b


def train(
    params: dict,
    cfg: ModelConfig,
    train_ds: EncodedDataset,
    val_ds: EncodedDataset,
    tcfg: TrainConfig,
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> TrainResult:
    """Train with the gated objective (or problems-only / outcome-only) and early stopping.

    The gate for epoch ``e`` uses the validation extraction micro AU-ROC from
    epoch ``e - 1`` (0 before the first epoch). Model selection uses the
    validation outcome AU-ROC among epochs whose extraction AU-ROC clears
    the threshold; the problems-only objective selects on extraction
    AU-ROC instead. ``params`` is updated in place; the returned result holds
    a copy of the selected epoch's parameters.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise DataError("empty training or validation split")
    is_dynpl = cfg.kind == "dynpl"
    if tcfg.objective != "outcome" and not is_dynpl:
        raise ValueError(f"objective {tcfg.objective!r} needs the dynpl model")
    state = nx.AdamState(lr=tcfg.lr)
    val_p = 0.0
    reports: list[EpochReport] = []
    best_key, best_epoch, best_params = None, 0, {k: v.copy() for k, v in params.items()}
    fb_key, fb_epoch, fb_params = None, 0, best_params
    diverged = False
    n = len(train_ds)
    lengths = [len(x) for x in train_ds.seqs]
    for epoch in range(1, tcfg.max_epochs + 1):
        if tcfg.freeze_extractor:
            use_problem, use_outcome = False, True
        elif tcfg.objective == "gated":
            use_problem, use_outcome = True, val_p >= tcfg.threshold_p
        elif tcfg.objective == "problems":
            use_problem, use_outcome = True, False
        else:
            use_problem, use_outcome = False, True
        sum_p = sum_o = 0.0
        t_epoch = time.perf_counter()
        try:
            for idx in epoch_batches(lengths, tcfg.batch_size, tcfg.seed, epoch):
                l_p, l_o, grads = accumulated_gradient(params, cfg, train_ds, idx, tcfg, epoch, use_problem, use_outcome, outcome_only=tcfg.freeze_extractor)
                if not (math.isfinite(l_p) and math.isfinite(l_o)):
                    raise FloatingPointError("non-finite loss")
                sum_p += l_p * len(idx)
                sum_o += l_o * len(idx)
                if not use_outcome:
                    grads = {k: v for k, v in grads.items() if not is_outcome_param(k)}
                nx.adam_step(params, grads, state)
        except FloatingPointError as exc:
            logger.error("epoch %d diverged (%s); keeping the last good checkpoint", epoch, exc)
            diverged = True
            break
        ev, _ = evaluate(params, cfg, val_ds, tcfg.eval_batch)
        new_val_p = ev.get("extraction_micro_auroc", float("nan"))
        rep = EpochReport(
            epoch=epoch,
            loss_problem=sum_p / n,
            loss_outcome=sum_o / n,
            val_p=new_val_p,
            val_outcome_auroc=ev["outcome_auroc"],
            gate_open=bool(is_dynpl and new_val_p >= tcfg.threshold_p),
            outcome_loss_active=bool(use_outcome),
            val_outcome_auprc=ev["outcome_auprc"],
        )
        reports.append(rep)
        if on_epoch:
            on_epoch(rep)
        logger.info(
            "epoch %d  L_p %.4f  L_o %.4f  val_p %.4f  val_auroc %.4f  gate %s  (%.1fs)",
            epoch, rep.loss_problem, rep.loss_outcome, rep.val_p, rep.val_outcome_auroc, rep.gate_open, time.perf_counter() - t_epoch,
        )
        if is_dynpl:
            val_p = new_val_p if not math.isnan(new_val_p) else 0.0

        if tcfg.objective == "problems":
            key = new_val_p
        elif tcfg.objective == "gated" and not tcfg.freeze_extractor:
            key = ev["outcome_auroc"] if rep.gate_open else None
        else:
            key = ev["outcome_auroc"]
        if best_key is None and (fb_key is None or _better(new_val_p, fb_key)):
            fb_key, fb_epoch = new_val_p, epoch
            fb_params = {k: v.copy() for k, v in params.items()}
        if key is not None and (best_key is None or _better(key, best_key)):
            best_key, best_epoch = key, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if best_key is not None and epoch - best_epoch >= tcfg.patience:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
            break
    if best_key is None and reports:
        # extraction never cleared the threshold: fall back to the best extraction epoch
        logger.warning("no epoch reached threshold_p=%.3f; selecting by extraction AU-ROC", tcfg.threshold_p)
        best_epoch, best_params = fb_epoch, fb_params
    return TrainResult(best_params, reports, best_epoch, diverged, {k: v.copy() for k, v in params.items()})


def pretrain_extractor(params, cfg, train_ds, val_ds, tcfg: TrainConfig, **kw) -> TrainResult:
    """Problems-only training (outcome head untouched), used before freezing."""
    t = TrainConfig(**{**asdict(tcfg), "objective": "problems", "freeze_extractor": False})
    return train(params, cfg, train_ds, val_ds, t, **kw)


def train_frozen(pretrained: dict, cfg, train_ds, val_ds, tcfg: TrainConfig, **kw) -> TrainResult:
    """Fit only the outcome head on top of a frozen, pretrained extractor."""
    params = {k: v.copy() for k, v in pretrained.items()}
    t = TrainConfig(**{**asdict(tcfg), "objective": "outcome", "freeze_extractor": True})
    return train(params, cfg, train_ds, val_ds, t, **kw)


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    folds: list[dict]
    per_fold: list[dict]
    aggregate: dict


def run_cv(
    patient_ids: Sequence[str],
    fold_fn: Callable[[int, dict], dict],
    k: int = 5,
    seed: int = 0,
    val_fraction: float = 0.1,
    folds: Sequence[int] | None = None,
) -> CVResult:
    """Patient-level k-fold cross-validation.

    ``fold_fn(fold_index, split)`` receives ``{"train", "val", "test"}`` patient
    lists and returns a dict of numeric metrics for that fold's test split.
    """
    splits = split_patients(patient_ids, k, seed, val_fraction)
    chosen = list(range(k)) if folds is None else list(folds)
    per_fold = [fold_fn(f, splits[f]) for f in chosen]
    agg = metrics.aggregate_folds(per_fold) if len(per_fold) >= 2 else {}
    return CVResult(splits, per_fold, agg)
