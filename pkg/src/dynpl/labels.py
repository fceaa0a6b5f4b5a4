"""Problem label spaces: full/rolled ICD9 diagnosis and procedure codes and phecodes."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

LABEL_SPACE_VERSION = 1
MIN_COUNT = 50

KINDS = ("icd_diag", "icd_proc", "phecode")
_RAW_KIND = {"diagnosis": "icd_diag", "procedure": "icd_proc"}

# Table-1 problem configurations: (kind, rolled) per component
PROBLEM_SETS: dict[str, tuple[tuple[str, bool], ...]] = {
    "F-ICD": (("icd_diag", False), ("icd_proc", False)),
    "F-Phe+R-ICD-proc": (("phecode", False), ("icd_proc", True)),
    "R-ICD": (("icd_diag", True), ("icd_proc", True)),
    "R-Phe+R-ICD-proc": (("phecode", True), ("icd_proc", True)),
    "R-ICD-diag": (("icd_diag", True),),
    "R-ICD-proc": (("icd_proc", True),),
    "R-Phe": (("phecode", True),),
}


@dataclass(frozen=True)
class ProblemCode:
    code: str
    kind: str
    rolled: bool
    display_name: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.kind, self.code)

    @property
    def label(self) -> str:
        return self.display_name or f"{self.kind}:{self.code}"


def normalize_icd9(code: str) -> str:
    return str(code).replace(".", "").strip().upper()


def rollup_icd9(code: str) -> str:
    """First three characters of a dotless ICD9 code."""
    code = normalize_icd9(code)
    if len(code) < 3:
        logger.warning("ICD9 code %r shorter than three characters; left unchanged", code)
        return code
    return code[:3]


def rollup_phecode(code: str) -> str:
    return str(code).split(".", 1)[0]


def load_phecode_map(path) -> dict[str, list[str]]:
    """Read an ``icd9,phecode`` CSV into ``{dotless icd9: [phecodes]}`` (row order kept)."""
    mapping: dict[str, list[str]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            icd = normalize_icd9(row["icd9"])
            phe = row["phecode"].strip()
            if phe and phe not in mapping[icd]:
                mapping[icd].append(phe)
    return dict(mapping)


def load_code_names(path) -> dict[tuple[str, str], str]:
    """Read ``kind,code,name`` rows (kind is one of ``KINDS``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["kind"], r["code"]): r["name"] for r in csv.DictReader(fh)}


def map_phecode(icd: str, mapping: Mapping[str, Sequence[str]], rolled: bool = False, unmapped: Counter | None = None) -> list[str]:
    phecodes = list(mapping.get(normalize_icd9(icd), ()))
    if not phecodes:
        if unmapped is not None:
            unmapped[normalize_icd9(icd)] += 1
        return []
    if rolled:
        return list(dict.fromkeys(rollup_phecode(p) for p in phecodes))
    return phecodes


def record_problem_keys(
    codes: Iterable[tuple[str, str]],
    config: Sequence[tuple[str, bool]],
    phecode_map: Mapping[str, Sequence[str]] | None = None,
    unmapped: Counter | None = None,
) -> set[tuple[str, str]]:
    """All ``(kind, code)`` problem keys an admission's raw codes produce under ``config``."""
    keys = set()
    for raw_code, raw_kind in codes:
        kind = _RAW_KIND.get(raw_kind, raw_kind)
        for want, rolled in config:
            if want == "phecode":
                if kind != "icd_diag":
                    continue
                if phecode_map is None:
                    raise DataError("phecode configuration requires a phecode mapping")
                for p in map_phecode(raw_code, phecode_map, rolled, unmapped):
                    keys.add(("phecode", p))
            elif want == kind:
                c = rollup_icd9(raw_code) if rolled else normalize_icd9(raw_code)
                keys.add((kind, c))
    return keys


@dataclass
class LabelSpace:
    codes: list[ProblemCode]
    counts: list[int]
    config: tuple[tuple[str, bool], ...] = ()
    index: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {c.key: i for i, c in enumerate(self.codes)}

    def __len__(self):
        return len(self.codes)

    def to_json(self) -> dict:
        return {
            "version": LABEL_SPACE_VERSION,
            "config": [list(c) for c in self.config],
            "codes": [
                {"code": c.code, "kind": c.kind, "rolled": c.rolled, "display_name": c.display_name, "count": n}
                for c, n in zip(self.codes, self.counts)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "LabelSpace":
        if d.get("version") != LABEL_SPACE_VERSION:
            raise DataError(f"unsupported label space version {d.get('version')!r}")
        codes = [ProblemCode(c["code"], c["kind"], c["rolled"], c.get("display_name")) for c in d["codes"]]
        return cls(codes, [c["count"] for c in d["codes"]], tuple((k, bool(r)) for k, r in d["config"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LabelSpace":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def digest(self) -> str:
        payload = json.dumps([[c.kind, c.code, c.rolled] for c in self.codes])
        return hashlib.sha256(payload.encode()).hexdigest()


def build_label_space(
    records: Iterable,
    config: Sequence[tuple[str, bool]] | str,
    phecode_map: Mapping[str, Sequence[str]] | None = None,
    min_count: int = MIN_COUNT,
    names: Mapping[tuple[str, str], str] | None = None,
) -> LabelSpace:
    """Codes occurring in at least ``min_count`` training stays, ordered by kind then code.

    ``records`` are cohort records (anything with a ``codes`` list of
    ``(code, raw_kind)``); a code counts once per stay.
    """
    if isinstance(config, str):
        config = PROBLEM_SETS[config]
    config = tuple((k, bool(r)) for k, r in config)
    counts = Counter()
    unmapped = Counter()
    for rec in records:
        counts.update(record_problem_keys(rec.codes, config, phecode_map, unmapped))
    if unmapped:
        logger.info("%d distinct diagnosis codes have no phecode", len(unmapped))
    kind_order = {k: i for i, k in enumerate(KINDS)}
    rolled_of = dict(config)
    kept = sorted((key for key, n in counts.items() if n >= min_count), key=lambda k: (kind_order[k[0]], k[1]))
    if not kept:
        raise DataError(f"no problem code reaches {min_count} training occurrences for config {config}")
    names = names or {}
    codes = [ProblemCode(c, kind, rolled_of[kind], names.get((kind, c))) for kind, c in kept]
    return LabelSpace(codes, [counts[k] for k in kept], config)


def label_vector(record, space: LabelSpace, phecode_map: Mapping[str, Sequence[str]] | None = None) -> np.ndarray:
    y = np.zeros(len(space), dtype=np.int8)
    for key in record_problem_keys(record.codes, space.config, phecode_map):
        i = space.index.get(key)
        if i is not None:
            y[i] = 1
    return y


def label_matrix(records, space: LabelSpace, phecode_map=None) -> np.ndarray:
    if not records:
        return np.zeros((0, len(space)), dtype=np.int8)
    return np.stack([label_vector(r, space, phecode_map) for r in records])
