"""Note/stay/code ingestion, cohort construction, text normalization and narratives."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

PAD = "⟨pad⟩"
UNK = "⟨unk⟩"
NUM = "⟨num⟩"
DEID = "⟨deid⟩"
RESERVED = (PAD, UNK, NUM, DEID)
PAD_ID, UNK_ID, NUM_ID, DEID_ID = range(4)

MAX_LEN = 8000
MIN_NOTES = 3
MIN_AGE = 18
OUTCOMES = ("bounceback", "readmit30", "mortality_inhosp", "mortality30")

DEID_PATTERN = r"\[\*\*.*?\*\*\]"

_CHAR_MAP = str.maketrans(
    {
        "‘": "'",
        "’": "'",
        "‚": "'",
        "‛": "'",
        "“": '"',
        "”": '"',
        "„": '"',
        "′": "'",
        "″": '"',
        "‐": "-",
        "‑": "-",
        "‒": "-",
        "–": "-",
        "—": "-",
        "―": "-",
        "−": "-",
        "…": "...",
    }
)

NOTE_COLUMNS = ("patient_id", "stay_or_admission_id", "chart_time", "text")
STAY_COLUMNS = (
    "patient_id",
    "stay_id",
    "admission_id",
    "hosp_admit",
    "hosp_disch",
    "icu_in",
    "icu_out",
    "age_years",
    "death_time",
)
CODE_COLUMNS = ("admission_id", "code", "kind")


# --------------------------------------------------------------------------
# text


def _token_regex(deid_pattern: str) -> re.Pattern:
    reserved = "|".join(re.escape(t) for t in RESERVED)
    return re.compile(rf"(?P<deid>{deid_pattern})|(?P<res>{reserved})|(?P<num>\d+)|(?P<word>[^\W\d_]+)|(?P<punct>\S)")


_DEFAULT_RE = _token_regex(DEID_PATTERN)


def normalize_text(raw, deid_pattern: str | None = None) -> list[str]:
    """Lowercase, map digits and de-identification brackets to generic tokens, split punctuation.

    Consecutive identical punctuation tokens collapse to one. The function is
    idempotent on ``" ".join(output)``.
    """
    if raw is None:
        return []
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    rx = _DEFAULT_RE if deid_pattern is None else _token_regex(deid_pattern)
    text = unicodedata.normalize("NFKC", raw).translate(_CHAR_MAP)
    out: list[str] = []
    for m in rx.finditer(text):
        kind = m.lastgroup
        if kind == "deid":
            tok = DEID
        elif kind == "num":
            tok = NUM
        elif kind == "res":
            tok = m.group()
        elif kind == "word":
            tok = m.group().lower()
        else:
            tok = m.group()
            if out and out[-1] == tok:
                continue
        out.append(tok)
    return out


# --------------------------------------------------------------------------
# raw tables


@dataclass
class RawTables:
    notes: pd.DataFrame
    stays: pd.DataFrame
    codes: pd.DataFrame

    def __post_init__(self):
        for name, cols in (("notes", NOTE_COLUMNS), ("stays", STAY_COLUMNS), ("codes", CODE_COLUMNS)):
            df = getattr(self, name)
            missing = [c for c in cols if c not in df.columns]
            if missing:
                raise DataError(f"{name} table missing columns {missing}")
        if "note_id" not in self.notes.columns:
            self.notes = self.notes.assign(note_id=np.arange(len(self.notes)).astype(str))
        for name in ("notes", "stays", "codes"):
            df = getattr(self, name)
            id_cols = [c for c in df.columns if c.endswith("_id") or c == "stay_or_admission_id" or c == "code"]
            setattr(self, name, df.astype({c: str for c in id_cols}))


def read_tables(data_dir, column_map: dict | None = None) -> RawTables:
    """Read ``notes.csv``, ``stays.csv`` and ``codes.csv`` from ``data_dir``.

    ``column_map`` is ``{"notes": {"SRC_COL": "dst_col"}, "files": {"notes": "NOTEEVENTS.csv"}, ...}``
    and adapts exports such as MIMIC-III to the expected schema.
    """
    from pathlib import Path

    data_dir = Path(data_dir)
    column_map = column_map or {}
    files = column_map.get("files", {})
    frames = {}
    for name in ("notes", "stays", "codes"):
        sources = files.get(name, f"{name}.csv")
        if isinstance(sources, str):
            sources = [sources]
        parts = []
        for src in sources:
            df = pd.read_csv(data_dir / src, dtype=str, keep_default_na=False, encoding="utf-8")
            rename = column_map.get(name, {})
            if isinstance(rename, dict) and src in rename:
                rename = rename[src]
            df = df.rename(columns=rename)
            if name == "codes" and "kind" not in df.columns:
                kind = column_map.get("code_kinds", {}).get(src)
                if kind is None:
                    raise DataError(f"codes file {src} has no kind column and no code_kinds entry")
                df["kind"] = kind
            parts.append(df)
        frames[name] = pd.concat(parts, ignore_index=True)
    return RawTables(**frames)


def write_tables(tables: RawTables, data_dir) -> None:
    from pathlib import Path

    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    tables.notes.to_csv(data_dir / "notes.csv", index=False)
    tables.stays.to_csv(data_dir / "stays.csv", index=False)
    tables.codes.to_csv(data_dir / "codes.csv", index=False)


# --------------------------------------------------------------------------
# cohort


@dataclass
class CohortRecord:
    patient_id: str
    stay_id: str
    admission_id: str
    cutoff: pd.Timestamp
    note_refs: list[str]
    outcomes: dict[str, bool]
    codes: list[tuple[str, str]] = field(default_factory=list)
    age_years: float = float("nan")
    problem_labels: list[int] | None = None

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "stay_id": self.stay_id,
            "admission_id": self.admission_id,
            "cutoff": self.cutoff.isoformat(),
            "note_refs": list(self.note_refs),
            "outcomes": {k: bool(v) for k, v in self.outcomes.items()},
            "codes": [list(c) for c in self.codes],
            "age_years": self.age_years,
            "problem_labels": self.problem_labels,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CohortRecord":
        return cls(
            patient_id=d["patient_id"],
            stay_id=d["stay_id"],
            admission_id=d["admission_id"],
            cutoff=pd.Timestamp(d["cutoff"]),
            note_refs=list(d["note_refs"]),
            outcomes=dict(d["outcomes"]),
            codes=[tuple(c) for c in d.get("codes", [])],
            age_years=d.get("age_years", float("nan")),
            problem_labels=d.get("problem_labels"),
        )


@dataclass
class CohortResult:
    records: list[CohortRecord]
    exclusions: Counter
    diagnostics: list[str]


def _parse_times(series: pd.Series):
    """Parse a timestamp column; returns (parsed, missing, malformed) masks."""
    s = series.fillna("").astype(str).str.strip()
    missing = s.eq("") | s.str.lower().isin(["nan", "nat", "none"])
    parsed = pd.to_datetime(s.where(~missing), errors="coerce", format="mixed")
    malformed = parsed.isna() & ~missing
    return parsed, missing, malformed


def build_cohort(tables: RawTables) -> CohortResult:
    """Apply the cohort exclusions and derive the four outcome labels from timestamps.

    Exclusion reasons (counted in ``exclusions``): ``malformed_timestamp``,
    ``missing_icu_times``, ``minor``, ``died_in_icu``, ``too_few_notes``,
    ``missing_admission``.
    """
    stays = tables.stays.copy()
    excl = Counter()
    diagnostics = []

    parsed = {}
    malformed_any = np.zeros(len(stays), dtype=bool)
    for col in ("hosp_admit", "hosp_disch", "icu_in", "icu_out", "death_time"):
        p, missing, bad = _parse_times(stays[col])
        parsed[col] = p
        parsed[col + "_missing"] = missing
        malformed_any |= bad.to_numpy()
        for idx in np.nonzero(bad.to_numpy())[0]:
            diagnostics.append(f"stay {stays['stay_id'].iat[idx]}: malformed {col} {stays[col].iat[idx]!r}")
    for col in ("hosp_admit", "hosp_disch", "icu_in", "icu_out", "death_time"):
        stays[col] = parsed[col]
    stays["age_years"] = pd.to_numeric(stays["age_years"], errors="coerce")

    notes = tables.notes
    note_time, note_missing, note_bad = _parse_times(notes["chart_time"])
    for idx in np.nonzero((note_bad | note_missing).to_numpy())[0]:
        diagnostics.append(f"note {notes['note_id'].iat[idx]}: unusable chart_time {notes['chart_time'].iat[idx]!r}")
    notes = notes.assign(_t=note_time)[~(note_bad | note_missing).to_numpy()]
    notes_by_key = {k: g.sort_values(["_t", "note_id"], kind="mergesort") for k, g in notes.groupby("stay_or_admission_id")}

    codes_by_adm = {
        k: sorted(set(zip(g["code"].str.replace(".", "", regex=False).str.strip(), g["kind"].str.strip())))
        for k, g in tables.codes.groupby("admission_id")
    }

    # every ICU entry with a valid in-time counts as a potential readmission
    valid_in = stays[stays["icu_in"].notna()]
    entries_by_patient = {k: g for k, g in valid_in.groupby("patient_id")}

    stays["malformed_ts"] = malformed_any
    records = []
    for row in stays.itertuples(index=False):
        if row.malformed_ts:
            excl["malformed_timestamp"] += 1
            continue
        if row.admission_id in ("", "nan"):
            excl["missing_admission"] += 1
            continue
        if pd.isna(row.icu_in) or pd.isna(row.icu_out) or not row.icu_in < row.icu_out:
            excl["missing_icu_times"] += 1
            continue
        if pd.isna(row.age_years) or row.age_years < MIN_AGE:
            excl["minor"] += 1
            continue
        death = row.death_time
        if pd.notna(death) and row.icu_in <= death <= row.icu_out:
            excl["died_in_icu"] += 1
            continue
        cutoff = row.icu_out
        cand = []
        for key in (row.admission_id, row.stay_id):
            g = notes_by_key.get(key)
            if g is not None:
                cand.append(g[g["_t"] <= cutoff])
        note_refs = []
        if cand:
            sel = pd.concat(cand).drop_duplicates("note_id").sort_values(["_t", "note_id"], kind="mergesort")
            note_refs = sel["note_id"].tolist()
        if len(note_refs) < MIN_NOTES:
            excl["too_few_notes"] += 1
            continue

        disch = row.hosp_disch
        horizon = cutoff + timedelta(days=30)
        others = entries_by_patient.get(row.patient_id)
        bounce = readmit = False
        if others is not None:
            later = others[(others["stay_id"] != row.stay_id) & (others["icu_in"] > cutoff)]
            same_adm = later["admission_id"] == row.admission_id
            if pd.notna(disch):
                same_adm &= later["icu_in"] <= disch
            bounce = bool(same_adm.any())
            readmit = bool((later["icu_in"] <= horizon).any())
        died_after = pd.notna(death) and death > cutoff
        outcomes = {
            "bounceback": bounce,
            "readmit30": readmit,
            "mortality_inhosp": bool(died_after and pd.notna(disch) and death <= disch),
            "mortality30": bool(died_after and death <= horizon),
        }
        records.append(
            CohortRecord(
                patient_id=row.patient_id,
                stay_id=row.stay_id,
                admission_id=row.admission_id,
                cutoff=cutoff,
                note_refs=note_refs,
                outcomes=outcomes,
                codes=list(codes_by_adm.get(row.admission_id, [])),
                age_years=float(row.age_years),
            )
        )
    records.sort(key=lambda r: (r.patient_id, r.stay_id))
    for r in records:
        check_record(r)
    logger.info("cohort: %d stays from %d patients; exclusions %s", len(records), len({r.patient_id for r in records}), dict(excl))
    return CohortResult(records=records, exclusions=excl, diagnostics=diagnostics)


def check_record(r: CohortRecord) -> None:
    if len(r.note_refs) < MIN_NOTES:
        raise AssertionError(f"stay {r.stay_id} has fewer than {MIN_NOTES} notes")
    if not r.age_years >= MIN_AGE:
        raise AssertionError(f"stay {r.stay_id} is a minor")
    if set(r.outcomes) != set(OUTCOMES):
        raise AssertionError(f"stay {r.stay_id} outcome keys {sorted(r.outcomes)}")


def write_cohort(records: Iterable[CohortRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_cohort(path) -> list[CohortRecord]:
    with open(path) as fh:
        return [CohortRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]
    doc_freq: list[int]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("reserved tokens must occupy the first ids")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.index.get(t, UNK_ID) for t in tokens), dtype=np.int64, count=len(tokens))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (t, df) in enumerate(zip(self.tokens, self.doc_freq)):
                fh.write(f"{t}\t{i}\t{df}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, idx, df = line.rstrip("\n").split("\t")
                rows.append((int(idx), tok, int(df)))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise DataError(f"vocabulary ids in {path} are not contiguous from 0")
        return cls([r[1] for r in rows], [r[2] for r in rows])


def build_vocab(notes: Iterable[Sequence[str]], min_docs: int = 5) -> Vocabulary:
    """Vocabulary of tokens appearing in at least ``min_docs`` notes.

    Reserved tokens take ids 0-3; remaining tokens are ordered by descending
    document frequency, then lexicographically.
    """
    if min_docs < 1:
        raise ValueError("min_docs must be >= 1")
    df = Counter()
    for toks in notes:
        df.update(set(toks))
    kept = sorted((t for t, c in df.items() if c >= min_docs and t not in RESERVED), key=lambda t: (-df[t], t))
    tokens = list(RESERVED) + kept
    return Vocabulary(tokens, [df.get(t, 0) for t in tokens])


# --------------------------------------------------------------------------
# narratives


@dataclass
class Narrative:
    stay_id: str
    token_ids: np.ndarray
    pad_mask: np.ndarray
    true_length: int
    tokens: list[str] = field(default_factory=list, repr=False)

    @property
    def ids(self) -> np.ndarray:
        """Unpadded token ids."""
        return self.token_ids[: self.true_length]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def assemble_narrative(
    record: CohortRecord,
    vocab: Vocabulary,
    note_tokens: dict[str, list[str]],
    max_len: int = MAX_LEN,
) -> Narrative:
    """Concatenate a stay's notes (already in chart order) into one fixed-length sequence.

    Sequences longer than ``max_len`` keep their last ``max_len`` tokens.
    """
    if not record.note_refs:
        raise DataError(f"stay {record.stay_id} has no notes")
    toks: list[str] = []
    for ref in record.note_refs:
        toks.extend(note_tokens[ref])
    if not toks:
        raise DataError(f"stay {record.stay_id} has only empty notes")
    if len(toks) > max_len:
        toks = toks[-max_len:]
    n = len(toks)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[:n] = vocab.encode(toks)
    mask = np.zeros(max_len, dtype=bool)
    mask[n:] = True
    return Narrative(record.stay_id, ids, mask, n, toks)


def tokenize_notes(tables: RawTables, note_ids=None, deid_pattern: str | None = None) -> dict[str, list[str]]:
    notes = tables.notes
    if note_ids is not None:
        notes = notes[notes["note_id"].isin(set(note_ids))]
    return {nid: normalize_text(text, deid_pattern) for nid, text in zip(notes["note_id"], notes["text"])}


def split_patients(patient_ids: Sequence[str], k: int = 5, seed: int = 0, val_fraction: float = 0.1) -> list[dict]:
    """Patient-level k-fold partition.

    Fold f tests on partition f; ``val_fraction`` of all patients is drawn from
    the remaining partitions as validation, the rest is training.
    """
    uniq = sorted(set(patient_ids))
    if len(uniq) < k:
        raise DataError(f"{len(uniq)} patients cannot form {k} folds")
    rng = np.random.default_rng(seed)
    perm = [uniq[i] for i in rng.permutation(len(uniq))]
    parts = [perm[f::k] for f in range(k)]
    folds = []
    for f in range(k):
        test = sorted(parts[f])
        rest = [p for g in range(k) if g != f for p in parts[g]]
        n_val = max(1, int(round(val_fraction * len(uniq))))
        r = np.random.default_rng([seed, f])
        order = r.permutation(len(rest))
        val = sorted(rest[i] for i in order[:n_val])
        train = sorted(rest[i] for i in order[n_val:])
        folds.append({"train": train, "val": val, "test": test})
    return folds
