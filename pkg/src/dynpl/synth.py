"""Seeded synthetic ICU corpus with planted token -> problem -> outcome structure.

Each planted problem owns a trigger n-gram (width 1-3) that appears in at
least one pre-discharge note of every stay where the problem is present,
and an ICD9 stem whose full codes are billed on that admission. The target
outcome is ``sigmoid((w . z + w_h * h + b) / temperature)`` over the true
problem indicators ``z`` and an optional hidden marker ``h`` that is not
tied to any problem; it is realized through timestamps (readmissions,
deaths), so the cohort builder recovers it from the tables alone.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .corpus import OUTCOMES, RawTables, write_tables
from .errors import DataError

logger = logging.getLogger(__name__)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_TIME_FMT = "%Y-%m-%d %H:%M:%S"
LEAK_WORD = "zzleak"


@dataclass
class GenSpec:
    seed: int = 0
    n_stays: int = 2000
    vocab_size: int = 500
    n_problems: int = 50
    n_proc_problems: int = 15
    prevalence: tuple[float, float] = (0.06, 0.30)
    emission_prob: float = 0.35
    decoy_prob: float = 0.03
    notes_per_stay: tuple[int, int] = (3, 6)
    note_length: tuple[int, int] = (20, 60)
    outcome: str = "readmit30"
    n_risk_problems: int = 6
    risk_weight: tuple[float, float] = (2.0, 3.5)
    outcome_rate: float = 0.10
    temperature: float = 0.5
    hidden_weight: float = 0.0
    hidden_prevalence: float = 0.3
    label_noise: float = 0.0
    multi_stay_frac: float = 0.1
    exclusion_frac: float = 0.05
    rare_codes: int = 20
    rare_prob: float = 0.004
    post_cutoff_note_prob: float = 0.3
    distractor_prob: float = 0.05

    def validate(self) -> None:
        if self.outcome not in OUTCOMES:
            raise DataError(f"unknown outcome {self.outcome!r}")
        if not 0 <= self.n_proc_problems <= self.n_problems or self.n_problems < 1:
            raise DataError("problem counts inconsistent")
        n_trigger = sum(_widths(self.n_problems))
        if self.vocab_size - n_trigger - 2 < 50:
            raise DataError(f"vocab_size {self.vocab_size} cannot hold {n_trigger} trigger words plus background")
        if self.n_risk_problems > self.n_problems:
            raise DataError("more risk problems than problems")
        if self.n_risk_problems > 16:
            raise DataError("at most 16 risk problems (exact outcome-rate enumeration)")
        lo, hi = self.notes_per_stay
        if lo < 3 or hi < lo:
            raise DataError("notes_per_stay must be (>=3, >=lo)")
        if not 0 < self.outcome_rate < 1:
            raise DataError("outcome_rate must be in (0, 1)")
        if self.temperature < 0:
            raise DataError("temperature must be >= 0")


def _widths(n):
    return [1 + (i % 3) for i in range(n)]


def _pseudo_words(rng, n):
    words = set()
    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        if rng.random() < 0.4:
            w += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        if w not in words and w != LEAK_WORD:
            words.add(w)
            out.append(w)
    return out


def _event_prob(logit, temperature):
    if temperature == 0:
        return (np.asarray(logit) > 0).astype(np.float64)
    return expit(np.asarray(logit) / temperature)


def expected_outcome_rate(weights, prevalence, intercept, temperature, hidden_weight=0.0, hidden_prevalence=0.0) -> float:
    """Exact expected event rate by enumerating the risk problems (nonzero weights) and the hidden marker."""
    weights = np.asarray(weights, dtype=np.float64)
    prevalence = np.asarray(prevalence, dtype=np.float64)
    idx = np.nonzero(weights)[0]
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(idx)):
        z = np.array(bits, dtype=np.float64)
        pz = float(np.prod(np.where(z == 1, prevalence[idx], 1 - prevalence[idx])))
        base = float(weights[idx] @ z) + intercept
        for h, ph in ((0, 1 - hidden_prevalence), (1, hidden_prevalence)):
            if ph == 0:
                continue
            total += pz * ph * float(_event_prob(base + hidden_weight * h, temperature))
    return total


def _solve_intercept(weights, prevalence, spec: GenSpec) -> float:
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = expected_outcome_rate(weights, prevalence, mid, spec.temperature, spec.hidden_weight, spec.hidden_prevalence if spec.hidden_weight else 0.0)
        if r > spec.outcome_rate:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@dataclass
class Problem:
    index: int
    kind: str
    stem: str
    variants: list[str]
    phecode: str | None
    trigger: list[str]
    prevalence: float
    outcome_weight: float


@dataclass
class Synthetic:
    tables: RawTables
    spec: GenSpec
    problems: list[Problem]
    intercept: float
    hidden_words: list[str]
    truth: list[dict]
    phecode_rows: list[tuple[str, str]]
    code_names: list[tuple[str, str, str]]
    expected_rate: float = 0.0
    truth_by_stay: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.truth_by_stay = {t["stay_id"]: t for t in self.truth}

    def truth_indicators(self, stay_ids) -> np.ndarray:
        """True (noise-free) problem indicators for the given stays, in problem order."""
        Z = np.zeros((len(stay_ids), len(self.problems)), dtype=np.int8)
        for i, s in enumerate(stay_ids):
            Z[i, self.truth_by_stay[s]["problems"]] = 1
        return Z

    def phecode_map(self) -> dict[str, list[str]]:
        m: dict[str, list[str]] = {}
        for icd, phe in self.phecode_rows:
            m.setdefault(icd, []).append(phe)
        return m

    def names(self) -> dict[tuple[str, str], str]:
        return {(k, c): n for k, c, n in self.code_names}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        write_tables(self.tables, out)
        pd.DataFrame(self.phecode_rows, columns=["icd9", "phecode"]).to_csv(out / "phecode_map.csv", index=False)
        pd.DataFrame(self.code_names, columns=["kind", "code", "name"]).to_csv(out / "code_names.csv", index=False)
        with open(out / "truth.jsonl", "w") as fh:
            fh.write(json.dumps(self.meta(), sort_keys=True) + "\n")
            for t in self.truth:
                fh.write(json.dumps({"type": "stay", **t}, sort_keys=True) + "\n")

    def meta(self) -> dict:
        return {
            "type": "spec",
            "genspec": asdict(self.spec),
            "problems": [asdict(p) for p in self.problems],
            "intercept": self.intercept,
            "hidden_words": self.hidden_words,
            "expected_rate": self.expected_rate,
        }


def read_truth(path) -> tuple[dict, dict[str, dict]]:
    meta, stays = None, {}
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            if d.pop("type") == "spec":
                meta = d
            else:
                stays[d["stay_id"]] = d
    return meta, stays


def _fmt(t: datetime) -> str:
    return t.strftime(_TIME_FMT)


class _Writer:
    """Accumulates table rows while generating."""

    def __init__(self, rng, background, bg_p, length_range):
        self.rng = rng
        self.length_range = length_range
        self.background = background
        self.bg_p = bg_p
        self.notes, self.stays, self.codes = [], [], []
        self.n_notes = 0

    def note_text(self, inserts: list[str]) -> str:
        rng = self.rng
        n = int(rng.integers(*self.length_range, endpoint=True))
        units = list(rng.choice(self.background, size=n, p=self.bg_p))
        for i, u in enumerate(units):
            r = rng.random()
            if r < 0.04:
                units[i] = str(int(rng.integers(1, 200)))
            elif r < 0.05:
                units[i] = f"{int(rng.integers(90, 180))}/{int(rng.integers(50, 100))}"
            elif r < 0.06:
                units[i] = "[**Hospital1 18**]" if rng.random() < 0.5 else f"[**2101-{int(rng.integers(1, 13))}-{int(rng.integers(1, 29))}**]"
        for ins in inserts:
            units.insert(int(rng.integers(0, len(units) + 1)), ins)
        out = []
        start = True
        for i, u in enumerate(units):
            if start and u[:1].isalpha():
                u = u[:1].upper() + u[1:]
            start = False
            if rng.random() < 0.04:
                u += ","
            out.append(u)
            if rng.random() < 0.12 or i == len(units) - 1:
                out[-1] += "!!" if rng.random() < 0.02 else "."
                start = True
        return " ".join(out)

    def add_note(self, patient, admission, t, inserts):
        self.n_notes += 1
        self.notes.append(
            {
                "note_id": f"N{self.n_notes:07d}",
                "patient_id": patient,
                "stay_or_admission_id": admission,
                "chart_time": _fmt(t),
                "text": self.note_text(inserts),
            }
        )


def generate(spec: GenSpec | None = None) -> Synthetic:
    """Build a deterministic synthetic corpus (same spec -> identical tables)."""
    spec = spec or GenSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    widths = _widths(spec.n_problems)
    n_trigger = sum(widths)
    words = _pseudo_words(rng, spec.vocab_size)
    trigger_words, hidden_words, background = words[:n_trigger], words[n_trigger : n_trigger + 2], words[n_trigger + 2 :]
    ranks = np.arange(len(background))
    bg_p = 1.0 / (ranks + 2.0)
    bg_p /= bg_p.sum()

    # problem definitions
    n_diag = spec.n_problems - spec.n_proc_problems
    diag_nums = rng.choice(np.arange(1, 1000), size=n_diag + spec.rare_codes, replace=False)
    diag_stems = [f"{d:03d}" for d in diag_nums]
    if n_diag >= 3:
        diag_stems[1] = "V45"
        diag_stems[2] = "E87"
    proc_stems = [f"{d:03d}" for d in rng.choice(np.arange(10, 1000), size=spec.n_proc_problems, replace=False)]
    phe_ints = [int(x) for x in rng.choice(np.arange(8, 1000), size=n_diag + spec.rare_codes, replace=False)]

    risk = rng.choice(spec.n_problems, size=spec.n_risk_problems, replace=False)
    weights = np.zeros(spec.n_problems)
    weights[risk] = rng.uniform(*spec.risk_weight, size=spec.n_risk_problems)
    prevalence = rng.uniform(*spec.prevalence, size=spec.n_problems)

    problems: list[Problem] = []
    phecode_rows: list[tuple[str, str]] = []
    code_names: list[tuple[str, str, str]] = []
    pos = 0
    for i in range(spec.n_problems):
        trig = trigger_words[pos : pos + widths[i]]
        pos += widths[i]
        nvar = int(rng.integers(1, 4))
        if i < n_diag:
            stem = diag_stems[i]
            if stem.startswith("E"):
                variants = [f"{stem}{s:02d}" for s in sorted(rng.choice(np.arange(10, 100), size=nvar, replace=False))]
            else:
                variants = [f"{stem}{s}" for s in sorted(rng.choice(10, size=nvar, replace=False))]
            phe = str(phe_ints[i])
            for j, v in enumerate(variants):
                phecode_rows.append((v, f"{phe}.{j + 1}"))
                code_names.append(("icd_diag", v, f"problem {i:02d} variant {j + 1}"))
                code_names.append(("phecode", f"{phe}.{j + 1}", f"problem {i:02d} subtype {j + 1}"))
            if i == 0:
                phecode_rows.append((variants[0], f"{phe}.9"))
                code_names.append(("phecode", f"{phe}.9", f"problem {i:02d} secondary"))
            code_names.append(("icd_diag", stem, f"problem {i:02d} [{' '.join(trig)}]"))
            code_names.append(("phecode", phe, f"problem {i:02d} [{' '.join(trig)}]"))
            kind = "diagnosis"
        else:
            stem = proc_stems[i - n_diag]
            suffixes = sorted(int(s) for s in rng.choice(10, size=nvar, replace=False))
            variants = [f"{stem}{s}" for s in suffixes]
            phe = None
            for j, v in enumerate(variants):
                code_names.append(("icd_proc", v, f"procedure {i:02d} variant {j + 1}"))
            code_names.append(("icd_proc", stem, f"procedure {i:02d} [{' '.join(trig)}]"))
            kind = "procedure"
        problems.append(Problem(i, kind, stem, variants, phe, list(trig), float(prevalence[i]), float(weights[i])))
    rare = []
    for r in range(spec.rare_codes):
        code = diag_stems[n_diag + r] + "9"
        rare.append(code)
        phecode_rows.append((code, f"{phe_ints[n_diag + r]}.1"))

    intercept = _solve_intercept(weights, prevalence, spec)
    expected = expected_outcome_rate(weights, prevalence, intercept, spec.temperature, spec.hidden_weight, spec.hidden_prevalence if spec.hidden_weight else 0.0)

    w = _Writer(rng, np.array(background), bg_p, spec.note_length)
    truth: list[dict] = []
    base = datetime(2100, 1, 1)
    counters = {"patient": 0, "stay": 0, "adm": 0}

    def nid(kind, prefix, width):
        counters[kind] += 1
        return f"{prefix}{counters[kind]:0{width}d}"

    def hours(a, b):
        return timedelta(hours=float(rng.uniform(a, b)))

    def draw_problems():
        return np.nonzero(rng.random(spec.n_problems) < prevalence)[0]

    def make_admission(patient, t0, age, z, h, n_notes=None):
        """One admission with one index ICU stay; returns timing dict."""
        adm = nid("adm", "H", 6)
        stay = nid("stay", "S", 6)
        icu_in = t0 + hours(2, 48)
        icu_out = icu_in + hours(24, 144)
        disch = icu_out + hours(24, 240)
        lo, hi = spec.notes_per_stay
        n = int(rng.integers(lo, hi + 1)) if n_notes is None else n_notes
        # note times strictly inside (t0, icu_out)
        span = (icu_out - t0).total_seconds()
        times = sorted(t0 + timedelta(seconds=float(s)) for s in rng.uniform(60, span - 60, size=n))
        inserts: list[list[str]] = [[] for _ in range(n)]
        flipped = []
        for l in z:
            trig = " ".join(problems[l].trigger)
            inserts[int(rng.integers(n))].append(trig)
            for k in range(n):
                if rng.random() < spec.emission_prob:
                    inserts[k].append(trig)
        zset = set(int(l) for l in z)
        for l in range(spec.n_problems):
            if l not in zset and len(problems[l].trigger) > 1 and rng.random() < spec.decoy_prob:
                inserts[int(rng.integers(n))].append(problems[l].trigger[int(rng.integers(len(problems[l].trigger)))])
        if h:
            marker = " ".join(hidden_words)
            inserts[int(rng.integers(n))].append(marker)
            if rng.random() < 0.5:
                inserts[int(rng.integers(n))].append(marker)
        for k in range(n):
            w.add_note(patient, adm, times[k], inserts[k])
        for l in z:
            if rng.random() < spec.label_noise:
                flipped.append(int(l))
                continue
            p = problems[l]
            k = int(rng.integers(1, min(2, len(p.variants)) + 1))
            for code in rng.choice(p.variants, size=k, replace=False):
                w.codes.append({"admission_id": adm, "code": str(code), "kind": p.kind})
        for code in rare:
            if rng.random() < spec.rare_prob:
                w.codes.append({"admission_id": adm, "code": code, "kind": "diagnosis"})
        row = {
            "patient_id": patient,
            "stay_id": stay,
            "admission_id": adm,
            "hosp_admit": t0,
            "hosp_disch": disch,
            "icu_in": icu_in,
            "icu_out": icu_out,
            "age_years": age,
            "death_time": None,
        }
        return row, flipped

    def add_icu_only_admission(patient, icu_in, age):
        adm = nid("adm", "H", 6)
        stay = nid("stay", "S", 6)
        row = {
            "patient_id": patient,
            "stay_id": stay,
            "admission_id": adm,
            "hosp_admit": icu_in - hours(1, 6),
            "hosp_disch": icu_in + hours(72, 200),
            "icu_in": icu_in,
            "icu_out": icu_in + hours(20, 70),
            "age_years": age,
            "death_time": None,
        }
        return row

    index_remaining = spec.n_stays
    stay_rows: list[dict] = []
    while index_remaining > 0:
        patient = nid("patient", "P", 5)
        t0 = base + timedelta(days=float(rng.uniform(0, 3000)))
        age = float(np.round(rng.uniform(18, 90), 1))
        n_index = 2 if (index_remaining >= 2 and rng.random() < spec.multi_stay_frac) else 1
        patient_rows: list[dict] = []
        death = None
        for j in range(n_index):
            z = draw_problems()
            h = int(spec.hidden_weight != 0 and rng.random() < spec.hidden_prevalence)
            logit = float(weights[z].sum()) + spec.hidden_weight * h + intercept
            p_event = float(_event_prob(logit, spec.temperature))
            event = int(rng.random() < p_event) if spec.temperature > 0 else int(p_event)
            row, flipped = make_admission(patient, t0, age, z, h)
            patient_rows.append(row)
            index_remaining -= 1
            cut, disch = row["icu_out"], row["hosp_disch"]
            roles = []
            if event:
                if spec.outcome == "readmit30":
                    icu_in = cut + timedelta(hours=float(rng.uniform((disch - cut).total_seconds() / 3600 + 6, 29 * 24)))
                    patient_rows.append(add_icu_only_admission(patient, icu_in, age))
                    roles.append(("readmission", patient_rows[-1]["stay_id"]))
                elif spec.outcome == "bounceback":
                    gap = (disch - cut).total_seconds() / 3600
                    icu_in = cut + timedelta(hours=float(rng.uniform(6, max(7.0, gap - 12))))
                    f_row = dict(row)
                    f_row["stay_id"] = nid("stay", "S", 6)
                    f_row["icu_in"] = icu_in
                    f_row["icu_out"] = icu_in + hours(12, 72)
                    row["hosp_disch"] = f_row["hosp_disch"] = max(disch, f_row["icu_out"] + hours(24, 96))
                    patient_rows.append(f_row)
                    roles.append(("followup", f_row["stay_id"]))
                elif spec.outcome == "mortality_inhosp":
                    death = disch
                elif spec.outcome == "mortality30":
                    death = disch + timedelta(hours=float(rng.uniform(2, max(3.0, 30 * 24 - (disch - cut).total_seconds() / 3600 - 2))))
            elif rng.random() < spec.distractor_prob:
                patient_rows.append(add_icu_only_admission(patient, cut + timedelta(days=float(rng.uniform(40, 90))), age))
                roles.append(("distractor", patient_rows[-1]["stay_id"]))
            if spec.post_cutoff_note_prob and rng.random() < spec.post_cutoff_note_prob:
                t_late = cut + timedelta(seconds=float(rng.uniform(600, max(1200, (row["hosp_disch"] - cut).total_seconds() - 600))))
                w.add_note(patient, row["admission_id"], t_late, [LEAK_WORD] if event else [])
            truth.append(
                {
                    "stay_id": row["stay_id"],
                    "patient_id": patient,
                    "admission_id": row["admission_id"],
                    "role": "index",
                    "problems": [int(x) for x in z],
                    "flipped": flipped,
                    "hidden": h,
                    "outcome_prob": p_event,
                    "event": event,
                }
            )
            for role, sid in roles:
                truth.append({"stay_id": sid, "patient_id": patient, "role": role, "problems": [int(x) for x in z] if role == "followup" else [], "flipped": [], "hidden": 0, "outcome_prob": 0.0, "event": 0})
            if death is not None:
                break
            t0 = max(r["hosp_disch"] for r in patient_rows) + timedelta(days=float(rng.uniform(120, 400)))
        for r in patient_rows:
            r["death_time"] = death
        stay_rows.extend(patient_rows)

    # stays that the cohort builder must exclude
    reasons = ["minor", "died_in_icu", "missing_icu_times", "too_few_notes", "malformed_timestamp"]
    n_excl = int(round(spec.exclusion_frac * spec.n_stays))
    for e in range(n_excl):
        reason = reasons[e % len(reasons)]
        patient = nid("patient", "P", 5)
        t0 = base + timedelta(days=float(rng.uniform(0, 3000)))
        age = float(rng.uniform(2, 17.9)) if reason == "minor" else float(np.round(rng.uniform(18, 90), 1))
        z = draw_problems()
        row, _ = make_admission(patient, t0, age, z, 0, n_notes=int(rng.integers(1, 3)) if reason == "too_few_notes" else None)
        if reason == "died_in_icu":
            row["death_time"] = row["icu_in"] + (row["icu_out"] - row["icu_in"]) / 2
        stay_rows.append(row)
        truth.append({"stay_id": row["stay_id"], "patient_id": patient, "role": "excluded", "exclusion": reason, "problems": [int(x) for x in z], "flipped": [], "hidden": 0, "outcome_prob": 0.0, "event": 0})
        if reason == "missing_icu_times":
            row["icu_out"] = None
        if reason == "malformed_timestamp":
            row["icu_in"] = "2101-13-45 25:61:00"

    def cell(v):
        if v is None:
            return ""
        return _fmt(v) if isinstance(v, datetime) else v

    stays = pd.DataFrame([{k: cell(v) for k, v in r.items()} for r in stay_rows])
    stays["age_years"] = stays["age_years"].astype(str)
    notes = pd.DataFrame(w.notes)
    codes = pd.DataFrame(w.codes, columns=["admission_id", "code", "kind"])
    tables = RawTables(notes=notes, stays=stays.astype(str), codes=codes)
    logger.info("synth: %d stay rows, %d notes, %d codes (expected event rate %.3f)", len(stays), len(notes), len(codes), expected)
    return Synthetic(tables, spec, problems, intercept, hidden_words, truth, phecode_rows, code_names, expected)
