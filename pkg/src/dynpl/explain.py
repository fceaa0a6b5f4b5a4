"""Per-stay problem lists, global risk factors, attended spans and report rendering."""

from __future__ import annotations

import html
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Narrative
from .errors import DataError
from .labels import LabelSpace
from .model import PredictionBundle

logger = logging.getLogger(__name__)

CONTEXT = 2
MIN_SPAN_TOKENS = 5
N_PROBLEMS = 14
N_SPANS = 2
N_BASELINE_SPANS = 14


@dataclass
class Span:
    text: str  # n-gram with context, tokens joined by single spaces
    ngram: str
    weight: float
    width: int
    start: int
    before: str = ""
    after: str = ""


@dataclass
class ProblemListEntry:
    index: int
    code: str
    kind: str
    name: str
    probability: float
    scaled_weight: float
    spans: list[Span] = field(default_factory=list)


@dataclass
class RiskFactor:
    index: int
    code: str
    name: str
    mean: float
    std: float


def scale_weights(w) -> np.ndarray:
    """Divide by the largest magnitude so the strongest weight is +-1."""
    w = np.asarray(w, dtype=np.float64)
    top = np.abs(w).max() if w.size else 0.0
    if top == 0.0:
        logger.warning("all outcome weights are zero; scaled weights are zero")
        return np.zeros_like(w)
    return w / top


def _span(tokens: Sequence[str], start: int, width: int, weight: float, context: int) -> Span:
    n = len(tokens)
    end = min(start + width, n)
    lo, hi = max(0, start - context), min(n, end + context)
    # near either end of the narrative, borrow context from the other side
    short = MIN_SPAN_TOKENS - (hi - lo)
    if short > 0:
        if lo == 0:
            hi = min(n, hi + short)
        else:
            lo = max(0, lo - short)
    before = " ".join(tokens[lo:start])
    ngram = " ".join(tokens[start:end])
    after = " ".join(tokens[end:hi])
    return Span(" ".join(tokens[lo:hi]), ngram, float(weight), width, start, before, after)


def top_spans(alpha, narrative: Narrative, n: int = N_SPANS, context: int = CONTEXT, widths=(1, 2, 3)) -> list[Span]:
    """The ``n`` most attended positions, decoded to n-grams with surrounding context.

    ``alpha`` is laid out filter block by filter block (``len(widths)``
    blocks of equal size). Positions past the narrative's true length are
    ignored. When several filters attend to the same start token only the
    highest-weight one is kept. Ties are broken by position index.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    block = alpha.size // len(widths)
    if block * len(widths) != alpha.size:
        raise ValueError("attention length is not a multiple of the number of filters")
    tokens = narrative.tokens
    true_len = min(narrative.true_length, len(tokens)) if tokens else narrative.true_length
    out: list[Span] = []
    used: set[int] = set()
    for i in np.argsort(-alpha, kind="stable"):
        width, start = widths[i // block], int(i % block)
        if start >= true_len or start in used:
            continue
        used.add(start)
        out.append(_span(tokens, start, width, alpha[i], context))
        if len(out) == n:
            break
    return out


def baseline_spans(alpha, narrative: Narrative, n: int = N_BASELINE_SPANS, context: int = CONTEXT) -> list[Span]:
    """Most attended spans of the single-query attention baseline."""
    return top_spans(alpha, narrative, n=n, context=context)


def build_problem_list(
    bundle: PredictionBundle,
    narrative: Narrative,
    space: LabelSpace,
    outcome_weights,
    k: int = N_PROBLEMS,
    n_spans: int = N_SPANS,
) -> list[ProblemListEntry]:
    """Top-``k`` problems by extraction probability (ties: lower label index first)."""
    p = np.asarray(bundle.probabilities, dtype=np.float64)
    L = p.size
    if k > L:
        logger.warning("requested %d problems but the label space has %d; clamping", k, L)
        k = L
    scaled = scale_weights(outcome_weights)
    order = np.lexsort((np.arange(L), -p))[:k]
    entries = []
    for l in order:
        code = space.codes[l]
        entries.append(
            ProblemListEntry(
                index=int(l),
                code=code.code,
                kind=code.kind,
                name=code.label,
                probability=float(p[l]),
                scaled_weight=float(scaled[l]),
                spans=top_spans(bundle.attention[l], narrative, n=n_spans),
            )
        )
    return entries


# --------------------------------------------------------------------------
# global risk factors


def global_risk_factors(fold_weights: Sequence[np.ndarray], fold_hashes: Sequence[str], space: LabelSpace) -> list[RiskFactor]:
    """Per-problem mean and sample std of the raw outcome weights across folds, sorted by mean."""
    if len(fold_weights) < 2:
        raise DataError("need at least two folds for risk-factor statistics")
    want = space.digest()
    for f, h in enumerate(fold_hashes):
        if h != want:
            raise DataError(f"fold {f} was trained on a different label space")
    W = np.vstack([np.asarray(w, dtype=np.float64) for w in fold_weights])
    if W.shape[1] != len(space):
        raise DataError("outcome weight length does not match the label space")
    mean, std = W.mean(axis=0), W.std(axis=0, ddof=1)
    order = np.lexsort((np.arange(len(space)), -mean))
    return [RiskFactor(int(l), space.codes[l].code, space.codes[l].label, float(mean[l]), float(std[l])) for l in order]


def render_risk_table(factors: Sequence[RiskFactor], outcome: str, top: int = 5) -> str:
    lines = [f"## Risk factors: {outcome}", "", "| Problem | Weight |", "|---|---|"]
    for rf in factors[:top]:
        lines.append(f"| {_md(rf.name)} | {rf.mean:.2f} ± {rf.std:.2f} |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# false positives


def export_false_positives(
    probs,
    labels,
    stay_ids: Sequence[str],
    space: LabelSpace,
    k: int = 50,
    span_fn: Callable[[int, int], list[Span]] | None = None,
    threshold: float = 0.5,
) -> list[dict]:
    """The ``k`` most confident false positives: (stay, problem) pairs with label 0 and score >= ``threshold``.

    Ties are broken by stay order, then label index. ``span_fn(row, label)``
    supplies attended spans when available.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    rows, cols = np.nonzero((labels == 0) & (probs >= threshold))
    scores = probs[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:k]
    if len(order) < k:
        logger.info("only %d false-positive candidates (asked for %d)", len(order), k)
    out = []
    for rank, j in enumerate(order, start=1):
        r, c = int(rows[j]), int(cols[j])
        code = space.codes[c]
        rec = {
            "rank": rank,
            "stay_id": str(stay_ids[r]),
            "kind": code.kind,
            "code": code.code,
            "name": code.label,
            "score": float(scores[j]),
        }
        if span_fn is not None:
            rec["spans"] = [asdict(s) for s in span_fn(r, c)]
        out.append(rec)
    return out


def write_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# reports


def _md(s: str) -> str:
    return s.replace("\\", "\\\\").replace("|", "\\|").replace("*", "\\*").replace("_", "\\_")


def _md_span(sp: Span) -> str:
    parts = [_md(sp.before), f"**{_md(sp.ngram)}**", _md(sp.after)]
    return "... " + " ".join(p for p in parts if p) + " ..."


def _html_span(sp: Span) -> str:
    before = html.escape(sp.before + " ") if sp.before else ""
    after = html.escape(" " + sp.after) if sp.after else ""
    return f'<span class="span">{before}<b>{html.escape(sp.ngram)}</b>{after}</span>'


def render_report(entries: Sequence[ProblemListEntry], stay_id: str, fmt: str = "markdown", outcome: str | None = None, outcome_probability: float | None = None) -> str:
    """Deterministic markdown or HTML problem-list document."""
    if fmt not in ("markdown", "html"):
        raise ValueError(f"unknown report format {fmt!r}")
    risk = None
    if outcome is not None and outcome_probability is not None:
        risk = f"Predicted {outcome} risk: {outcome_probability:.3f}"
    headers = ("Problem", "Extraction Probability", "Problem Weight", "Top Spans of Attended Text")
    if fmt == "markdown":
        lines = [f"# Problem list for stay {_md(str(stay_id))}", ""]
        if risk:
            lines += [risk, ""]
        if not entries:
            lines.append("_No problems to report for this stay._")
            return "\n".join(lines) + "\n"
        lines += ["| " + " | ".join(headers) + " |", "|---|---:|---:|---|"]
        for e in entries:
            spans = "<br>".join(_md_span(s) for s in e.spans)
            lines.append(f"| {_md(e.name)} | {e.probability:.2f} | {e.scaled_weight:.2f} | {spans} |")
        return "\n".join(lines) + "\n"

    title = html.escape(f"Problem list for stay {stay_id}")
    out = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>{title}</title>",
        "</head><body>",
        f"<h1>{title}</h1>",
    ]
    if risk:
        out.append(f"<p>{html.escape(risk)}</p>")
    if not entries:
        out.append('<p class="notice">No problems to report for this stay.</p>')
    else:
        out.append("<table>")
        out.append("<tr>" + "".join(f"<th>{h}</th>" for h in headers) + "</tr>")
        for e in entries:
            spans = "<br>".join(_html_span(s) for s in e.spans)
            out.append(
                f"<tr><td>{html.escape(e.name)}</td><td>{e.probability:.2f}</td>"
                f"<td>{e.scaled_weight:.2f}</td><td>{spans}</td></tr>"
            )
        out.append("</table>")
    out.append("</body></html>")
    return "\n".join(out) + "\n"


def write_reports(entries, stay_id: str, out_dir, **kw) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = out_dir / f"{stay_id}.md"
    ht = out_dir / f"{stay_id}.html"
    md.write_text(render_report(entries, stay_id, "markdown", **kw), encoding="utf-8")
    ht.write_text(render_report(entries, stay_id, "html", **kw), encoding="utf-8")
    return md, ht
