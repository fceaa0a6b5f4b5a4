"""Stage orchestration over a work directory.

Layout under ``work``::

    cohort.jsonl  tokens.jsonl  splits.json  ingest.json  [phecode_map.csv code_names.csv]
    fold<f>/vocab-<key>.tsv  fold<f>/embed-<key>.txt  fold<f>/labels-<key>.json
    runs/<model>-<outcome>-<problems>/fold<f>/{checkpoint.npz, epochs.jsonl, metrics.json, manifest.json}
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import explain as ex
from . import metrics
from .corpus import (
    DEID_PATTERN,
    MAX_LEN,
    OUTCOMES,
    CohortRecord,
    Vocabulary,
    assemble_narrative,
    build_cohort,
    build_vocab,
    read_cohort,
    read_tables,
    split_patients,
    tokenize_notes,
    write_cohort,
)
from .embed import EmbeddingMatrix, load_word2vec, train_cbow
from .errors import DataError
from .labels import PROBLEM_SETS, LabelSpace, build_label_space, label_matrix, load_code_names, load_phecode_map
from .model import Checkpoint, ModelConfig, baseline_conv_attn, forward, init_params, oracle_logreg, params_digest, save_arrays
from .train import EncodedDataset, TrainConfig, evaluate, pretrain_extractor, train, train_frozen

logger = logging.getLogger(__name__)

MODELS = ("dynpl", "cnn_max", "conv_attn", "frozen_dynpl", "lr_oracle")
REPORT_METRICS = ("outcome_auroc", "outcome_auprc")
EXTRACTION_METRICS = ("extraction_micro_auroc", "extraction_macro_auroc", "extraction_micro_auprc", "extraction_macro_auprc")


@dataclass
class RunConfig:
    model: str = "dynpl"
    outcome: str = "readmit30"
    problems: str = "R-ICD"
    k_folds: int = 5
    folds: list | None = None
    split_seed: int = 0
    val_fraction: float = 0.1
    min_docs: int = 5
    min_count: int = 50
    max_len: int = MAX_LEN
    embed_dim: int = 100
    n_filters: int = 64
    cbow_epochs: int = 5
    cbow_window: int = 5
    cbow_negatives: int = 5
    oracle_l2: float = 1e-4
    precision: str = "float32"
    # training
    batch_size: int = 32
    micro_batch: int = 32
    lr: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    threshold_p: float = 0.90
    seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {OUTCOMES}")
        if self.problems not in PROBLEM_SETS:
            raise ValueError(f"problems must be one of {tuple(PROBLEM_SETS)}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        for name in ("min_docs", "min_count", "max_len", "embed_dim", "n_filters", "cbow_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.train_config()  # validates the training fields

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def train_config(self, fold: int = 0) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            micro_batch=self.micro_batch,
            lr=self.lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            threshold_p=self.threshold_p,
            seed=self.seed,
            fold=fold,
            eval_batch=self.eval_batch,
        )

    @property
    def run_name(self) -> str:
        return f"{self.model}-{self.outcome}-{self.problems}"

    def fold_list(self) -> list[int]:
        return list(range(self.k_folds)) if self.folds is None else [int(f) for f in self.folds]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# ingest


INPUT_FILES = ("notes.csv", "stays.csv", "codes.csv", "phecode_map.csv", "code_names.csv")


def ingest(data_dir, work, k_folds: int = 5, split_seed: int = 0, val_fraction: float = 0.1) -> dict:
    """Cohort extraction, note tokenization and the patient-level fold partition."""
    data_dir, work = Path(data_dir), Path(work)
    work.mkdir(parents=True, exist_ok=True)
    tables = read_tables(data_dir)
    result = build_cohort(tables)
    if not result.records:
        raise DataError("cohort is empty after exclusions")
    write_cohort(result.records, work / "cohort.jsonl")
    refs = {r for rec in result.records for r in rec.note_refs}
    tokens = tokenize_notes(tables, refs, DEID_PATTERN)
    with open(work / "tokens.jsonl", "w", encoding="utf-8") as fh:
        for nid in sorted(tokens):
            fh.write(json.dumps({"note_id": nid, "tokens": tokens[nid]}) + "\n")
    splits = split_patients([r.patient_id for r in result.records], k_folds, split_seed, val_fraction)
    with open(work / "splits.json", "w") as fh:
        json.dump({"k": k_folds, "seed": split_seed, "val_fraction": val_fraction, "folds": splits}, fh, indent=1, sort_keys=True)
    for name in ("phecode_map.csv", "code_names.csv"):
        if (data_dir / name).exists():
            shutil.copyfile(data_dir / name, work / name)
    inputs = {name: file_sha256(data_dir / name) for name in INPUT_FILES if (data_dir / name).exists()}
    info = {
        "n_records": len(result.records),
        "n_patients": len({r.patient_id for r in result.records}),
        "exclusions": dict(sorted(result.exclusions.items())),
        "outcome_rates": {o: float(np.mean([r.outcomes[o] for r in result.records])) for o in OUTCOMES},
        "inputs": inputs,
    }
    with open(work / "ingest.json", "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
    logger.info("ingested %d stays (%d patients); exclusions %s", info["n_records"], info["n_patients"], info["exclusions"])
    return info


@dataclass
class Workspace:
    root: Path
    records: list[CohortRecord]
    tokens: dict[str, list[str]]
    splits: list[dict]
    phecode_map: dict | None = None
    names: dict | None = None
    by_stay: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.by_stay = {r.stay_id: r for r in self.records}

    @classmethod
    def open(cls, root) -> "Workspace":
        root = Path(root)
        if not (root / "cohort.jsonl").exists():
            raise DataError(f"{root} has no cohort; run the ingest stage first")
        records = read_cohort(root / "cohort.jsonl")
        tokens = {}
        with open(root / "tokens.jsonl", encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                tokens[d["note_id"]] = d["tokens"]
        with open(root / "splits.json") as fh:
            splits = json.load(fh)["folds"]
        pmap = load_phecode_map(root / "phecode_map.csv") if (root / "phecode_map.csv").exists() else None
        names = load_code_names(root / "code_names.csv") if (root / "code_names.csv").exists() else None
        return cls(root, records, tokens, splits, pmap, names)

    def split_records(self, fold: int) -> dict[str, list[CohortRecord]]:
        if not 0 <= fold < len(self.splits):
            raise DataError(f"fold {fold} outside 0..{len(self.splits) - 1}")
        sp = {k: set(v) for k, v in self.splits[fold].items()}
        return {k: [r for r in self.records if r.patient_id in pats] for k, pats in sp.items()}

    def fold_dir(self, fold: int) -> Path:
        d = self.root / f"fold{fold}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def notes_of(self, records) -> list[tuple[str, list[str]]]:
        return [(r.patient_id, self.tokens[n]) for r in records for n in r.note_refs]


# --------------------------------------------------------------------------
# per-fold preparation


def fold_vocab(ws: Workspace, fold: int, cfg: RunConfig) -> Vocabulary:
    path = ws.fold_dir(fold) / f"vocab-{_key(cfg.min_docs)}.tsv"
    if path.exists():
        return Vocabulary.load(path)
    sp = ws.split_records(fold)
    vocab = build_vocab([t for _, t in ws.notes_of(sp["train"] + sp["val"])], cfg.min_docs)
    vocab.save(path)
    return vocab


def fold_embeddings(ws: Workspace, fold: int, cfg: RunConfig, vocab: Vocabulary) -> EmbeddingMatrix:
    key = _key(vocab.digest(), cfg.embed_dim, cfg.cbow_epochs, cfg.cbow_window, cfg.cbow_negatives, cfg.seed)
    path = ws.fold_dir(fold) / f"embed-{key}.txt"
    if path.exists():
        return load_word2vec(path, vocab, cfg.seed)
    sp = ws.split_records(fold)
    t0 = time.perf_counter()
    emb = train_cbow(
        ws.notes_of(sp["train"] + sp["val"]),
        vocab,
        dim=cfg.embed_dim,
        window=cfg.cbow_window,
        negatives=cfg.cbow_negatives,
        epochs=cfg.cbow_epochs,
        seed=cfg.seed,
        exclude_patients=ws.splits[fold]["test"],
    )
    logger.info("fold %d: CBOW embeddings trained in %.1fs", fold, time.perf_counter() - t0)
    emb.save_word2vec(path)
    # reload so cached and fresh runs see the same (text-rounded) values
    return load_word2vec(path, vocab, cfg.seed)


def fold_labels(ws: Workspace, fold: int, cfg: RunConfig) -> LabelSpace:
    path = ws.fold_dir(fold) / f"labels-{_key(cfg.problems, cfg.min_count)}.json"
    if path.exists():
        return LabelSpace.load(path)
    space = build_label_space(ws.split_records(fold)["train"], cfg.problems, ws.phecode_map, cfg.min_count, ws.names)
    space.save(path)
    return space


def encode(records, ws: Workspace, vocab: Vocabulary, space: LabelSpace, outcome: str, max_len: int) -> EncodedDataset:
    seqs = []
    for r in records:
        toks: list[str] = []
        for n in r.note_refs:
            toks.extend(ws.tokens[n])
        if not toks:
            raise DataError(f"stay {r.stay_id} has only empty notes")
        seqs.append(vocab.encode(toks[-max_len:]))
    return EncodedDataset(
        [r.stay_id for r in records],
        [r.patient_id for r in records],
        seqs,
        label_matrix(records, space, ws.phecode_map).astype(np.float64),
        np.array([float(r.outcomes[outcome]) for r in records]),
    )


def narrative_for(ws: Workspace, stay_id: str, vocab: Vocabulary, max_len: int):
    return assemble_narrative(ws.by_stay[stay_id], vocab, ws.tokens, max_len)


# --------------------------------------------------------------------------
# training / evaluation


def run_dir(ws: Workspace, cfg: RunConfig, fold: int) -> Path:
    d = ws.root / "runs" / cfg.run_name / f"fold{fold}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _model_config(cfg: RunConfig, kind: str, vocab: Vocabulary, space: LabelSpace) -> ModelConfig:
    return ModelConfig(kind=kind, vocab_size=len(vocab), n_labels=len(space), embed_dim=cfg.embed_dim, n_filters=cfg.n_filters, dtype=cfg.precision)


def train_fold(ws: Workspace, cfg: RunConfig, fold: int) -> dict:
    """Train and test one fold; writes checkpoint, epoch log and metrics. Returns test metrics."""
    out = run_dir(ws, cfg, fold)
    sp = ws.split_records(fold)
    space = fold_labels(ws, fold, cfg)
    if cfg.model == "lr_oracle":
        return _oracle_fold(ws, cfg, fold, sp, space, out)
    vocab = fold_vocab(ws, fold, cfg)
    emb = fold_embeddings(ws, fold, cfg, vocab)
    data = {k: encode(v, ws, vocab, space, cfg.outcome, cfg.max_len) for k, v in sp.items()}
    kind = "dynpl" if cfg.model in ("dynpl", "frozen_dynpl") else cfg.model
    mcfg = _model_config(cfg, kind, vocab, space)
    params = init_params(mcfg, np.random.default_rng([cfg.seed, fold, 7]), emb.vectors)
    tcfg = cfg.train_config(fold)
    log_path = out / "epochs.jsonl"
    log = open(log_path, "w")

    def on_epoch(rep):
        log.write(rep.to_json() + "\n")
        log.flush()

    t0 = time.perf_counter()
    try:
        if cfg.model == "frozen_dynpl":
            pre = pretrain_extractor(params, mcfg, data["train"], data["val"], tcfg, on_epoch=on_epoch)
            result = train_frozen(pre.params, mcfg, data["train"], data["val"], tcfg, on_epoch=on_epoch)
        elif kind == "dynpl":
            result = train(params, mcfg, data["train"], data["val"], tcfg, on_epoch=on_epoch)
        else:
            tcfg.objective = "outcome"
            result = train(params, mcfg, data["train"], data["val"], tcfg, on_epoch=on_epoch)
    finally:
        log.close()
    logger.info("fold %d: %s trained in %.1fs (best epoch %d)", fold, cfg.model, time.perf_counter() - t0, result.best_epoch)
    ckpt = Checkpoint(result.params, mcfg, space.digest(), vocab.digest(), {"fold": fold, "best_epoch": result.best_epoch, "diverged": result.diverged})
    ckpt.save(out / "checkpoint.npz")
    return evaluate_fold(ws, cfg, fold, ckpt)


def evaluate_fold(ws: Workspace, cfg: RunConfig, fold: int, ckpt: Checkpoint | None = None) -> dict:
    out = run_dir(ws, cfg, fold)
    space = fold_labels(ws, fold, cfg)
    vocab = fold_vocab(ws, fold, cfg)
    if ckpt is None:
        ckpt = Checkpoint.load(out / "checkpoint.npz", space.digest(), vocab.digest())
    test = encode(ws.split_records(fold)["test"], ws, vocab, space, cfg.outcome, cfg.max_len)
    res, pred = evaluate(ckpt.params, ckpt.config, test, cfg.eval_batch)
    res = {k: float(v) for k, v in res.items() if not k.startswith("extraction_skipped")}
    res.update({"fold": fold, "n_test": len(test), "n_labels": len(space), "best_epoch": ckpt.extra.get("best_epoch", 0)})
    _write_json(out / "metrics.json", res)
    arrays = {"outcome_prob": pred["outcome_prob"]}
    if "problem_prob" in pred:
        arrays["problem_prob"] = pred["problem_prob"]
    save_arrays(out / "predictions.npz", arrays)
    return res


def _oracle_fold(ws, cfg, fold, sp, space, out) -> dict:
    X = {k: label_matrix(v, space, ws.phecode_map).astype(np.float64) for k, v in sp.items()}
    y = {k: np.array([float(r.outcomes[cfg.outcome]) for r in v]) for k, v in sp.items()}
    oracle = oracle_logreg(np.vstack([X["train"], X["val"]]), np.r_[y["train"], y["val"]], cfg.oracle_l2)
    p = oracle.predict_proba(X["test"])
    res = {
        "outcome_auroc": metrics.au_roc(p, y["test"]),
        "outcome_auprc": metrics.au_pr(p, y["test"]),
        "fold": fold,
        "n_test": len(p),
        "n_labels": len(space),
    }
    save_arrays(out / "oracle.npz", {"weight": oracle.weight, "bias": np.array([oracle.bias])})
    _write_json(out / "metrics.json", res)
    return res


def run_folds(ws: Workspace, cfg: RunConfig) -> dict:
    per_fold = [train_fold(ws, cfg, f) for f in cfg.fold_list()]
    root = ws.root / "runs" / cfg.run_name
    keys = [k for k in (*REPORT_METRICS, *EXTRACTION_METRICS) if k in per_fold[0]]
    metrics.write_fold_csv(root / "folds.csv", per_fold, keys)
    agg = metrics.aggregate_folds(per_fold, keys) if len(per_fold) >= 2 else {}
    metrics.write_aggregate_json(root / "aggregate.json", agg)
    return {"per_fold": per_fold, "aggregate": agg}


# --------------------------------------------------------------------------
# explanations


def _load_fold(ws: Workspace, cfg: RunConfig, fold: int):
    space = fold_labels(ws, fold, cfg)
    vocab = fold_vocab(ws, fold, cfg)
    ckpt = Checkpoint.load(run_dir(ws, cfg, fold) / "checkpoint.npz", space.digest(), vocab.digest())
    return space, vocab, ckpt


def explain_fold(ws: Workspace, cfg: RunConfig, fold: int, stays=None, limit: int = 10, k: int = ex.N_PROBLEMS) -> list[Path]:
    """Problem-list reports (markdown + HTML) for test stays of one fold."""
    space, vocab, ckpt = _load_fold(ws, cfg, fold)
    out = run_dir(ws, cfg, fold) / "reports"
    if stays is None:
        stays = [r.stay_id for r in ws.split_records(fold)["test"]][:limit]
    written = []
    for sid in stays:
        if sid not in ws.by_stay:
            raise DataError(f"unknown stay {sid!r}")
        narr = narrative_for(ws, sid, vocab, cfg.max_len)
        if ckpt.config.kind == "dynpl":
            bundle = forward(narr, ckpt.params, ckpt.config)
            entries = ex.build_problem_list(bundle, narr, space, ckpt.params["outcome.weight"], k)
            written += ex.write_reports(entries, sid, out, outcome=cfg.outcome, outcome_probability=bundle.outcome_probability)
        elif ckpt.config.kind == "conv_attn":
            p, alpha = baseline_conv_attn(narr, ckpt.params, ckpt.config)
            spans = ex.baseline_spans(alpha[: 3 * narr.true_length], narr)
            (out).mkdir(parents=True, exist_ok=True)
            path = out / f"{sid}.md"
            lines = [f"# Attended text for stay {sid}", "", f"Predicted {cfg.outcome} risk: {p:.3f}", ""]
            lines += [f"{i}. {ex._md_span(s)} ({s.weight:.3f})" for i, s in enumerate(spans, 1)]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)
        else:
            raise DataError(f"model {ckpt.config.kind} has no attention to explain")
    return written


def false_positives_fold(ws: Workspace, cfg: RunConfig, fold: int, k: int = 50) -> Path:
    space, vocab, ckpt = _load_fold(ws, cfg, fold)
    if ckpt.config.kind != "dynpl":
        raise DataError("false-positive export needs a problem-extraction model")
    recs = ws.split_records(fold)["test"]
    test = encode(recs, ws, vocab, space, cfg.outcome, cfg.max_len)
    res, pred = evaluate(ckpt.params, ckpt.config, test, cfg.eval_batch)

    def span_fn(row, label):
        narr = narrative_for(ws, test.stay_ids[row], vocab, cfg.max_len)
        bundle = forward(narr, ckpt.params, ckpt.config)
        return ex.top_spans(bundle.attention[label], narr)

    fps = ex.export_false_positives(pred["problem_prob"], test.labels, test.stay_ids, space, k, span_fn)
    path = run_dir(ws, cfg, fold) / "false_positives.jsonl"
    ex.write_jsonl(fps, path)
    return path


def report(ws: Workspace, cfg: RunConfig) -> Path:
    """Run-level summary: aggregate metrics and (for dynpl models) the global risk-factor table."""
    root = ws.root / "runs" / cfg.run_name
    folds = [f for f in cfg.fold_list() if (root / f"fold{f}" / "metrics.json").exists()]
    if not folds:
        raise DataError(f"no finished folds under {root}")
    per_fold = [json.loads((root / f"fold{f}" / "metrics.json").read_text()) for f in folds]
    lines = [f"# {cfg.run_name}", "", "| Metric | Mean | Std |", "|---|---:|---:|"]
    keys = [k for k in (*REPORT_METRICS, *EXTRACTION_METRICS) if k in per_fold[0]]
    if len(per_fold) >= 2:
        for key, v in metrics.aggregate_folds(per_fold, keys).items():
            lines.append(f"| {key} | {v['mean']:.4f} | {v['std']:.4f} |")
    else:
        for key in keys:
            lines.append(f"| {key} | {per_fold[0][key]:.4f} | - |")
    lines.append("")
    if cfg.model in ("dynpl", "frozen_dynpl") and len(folds) >= 2:
        weights, hashes = [], []
        space = None
        for f in folds:
            s, _, ckpt = _load_fold(ws, cfg, f)
            space = space or s
            weights.append(ckpt.params["outcome.weight"])
            hashes.append(ckpt.label_space_hash)
        try:
            factors = ex.global_risk_factors(weights, hashes, space)
            lines.append(ex.render_risk_table(factors, cfg.outcome))
        except DataError as exc:
            # folds build their own label spaces; they only agree if every fold keeps the same codes
            lines.append(f"_Risk factors unavailable: {exc}_\n")
    path = root / "report.md"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def params_fingerprint(ckpt: Checkpoint) -> str:
    return params_digest(ckpt.params)
