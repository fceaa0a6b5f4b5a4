"""Command-line entry point: ``dynpl <stage> [options]``.

Exit status is 0 on success, 1 on a data error and 2 on a usage error.
The data directory defaults to ``$DYNPL_DATA`` (else ``./data``) and the
work directory to ``$DYNPL_WORK`` (else ``./work``). A JSON ``--config``
file supplies defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .corpus import OUTCOMES
from .errors import DataError
from .labels import PROBLEM_SETS
from .synth import GenSpec, generate

logger = logging.getLogger("dynpl")

STAGES = ("ingest", "vocab", "embed", "labels", "train", "eval", "explain", "oracle", "fps", "synth", "report")
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--model", choices=pl.MODELS)
    g.add_argument("--outcome", choices=OUTCOMES)
    g.add_argument("--problems", choices=tuple(PROBLEM_SETS))
    g.add_argument("--folds", type=int, nargs="+", help="fold indices (default: all)")
    g.add_argument("--k-folds", type=int)
    g.add_argument("--split-seed", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--micro-batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--threshold-p", type=float)
    g.add_argument("--embed-dim", type=int)
    g.add_argument("--n-filters", type=int)
    g.add_argument("--cbow-epochs", type=int)
    g.add_argument("--min-docs", type=int)
    g.add_argument("--min-count", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--precision", choices=("float32", "float64"), help="compute precision for training and batched inference")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynpl", description="Dynamic problem lists from clinical narratives.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    common.add_argument("--data", type=Path, help="raw table directory (env DYNPL_DATA)")
    common.add_argument("--work", type=Path, help="work directory (env DYNPL_WORK)")
    common.add_argument("--config", type=Path, help="JSON file with default option values")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--out", type=Path, help="output directory (default: the data directory)")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-stays", type=int)
    s.add_argument("--vocab-size", type=int)
    s.add_argument("--n-problems", type=int)
    s.add_argument("--outcome", choices=OUTCOMES)
    s.add_argument("--outcome-rate", type=float)
    s.add_argument("--temperature", type=float)
    s.add_argument("--hidden-weight", type=float)
    s.add_argument("--label-noise", type=float)

    s = sub.add_parser("ingest", parents=[common], help="cohort extraction, tokenization, fold split")
    s.add_argument("--k-folds", type=int)
    s.add_argument("--split-seed", type=int)

    for name, help_ in (("vocab", "build fold vocabularies"), ("embed", "train fold CBOW embeddings"), ("labels", "build fold label spaces")):
        s = sub.add_parser(name, parents=[common], help=help_)
        _run_flags(s)

    for name, help_ in (("train", "train and test a model"), ("oracle", "logistic regression on true labels"), ("eval", "re-evaluate saved checkpoints"), ("report", "aggregate metrics and risk factors")):
        s = sub.add_parser(name, parents=[common], help=help_)
        _run_flags(s)

    s = sub.add_parser("explain", parents=[common], help="render problem-list reports")
    _run_flags(s)
    s.add_argument("--stays", nargs="+")
    s.add_argument("--limit", type=int, default=10)
    s.add_argument("--top", type=int, default=14)

    s = sub.add_parser("fps", parents=[common], help="export confident false positives")
    _run_flags(s)
    s.add_argument("--top", type=int, default=50)

    s = sub.add_parser("replay", help="re-run a command from its manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--work", type=Path, help="write outputs here instead of the recorded work directory")
    return p


# --------------------------------------------------------------------------
# configuration


def _dirs(args, cfg_file: dict) -> tuple[Path, Path]:
    data = args.data or cfg_file.get("data") or os.environ.get("DYNPL_DATA") or "data"
    work = args.work or cfg_file.get("work") or os.environ.get("DYNPL_WORK") or "work"
    return Path(data), Path(work)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(d, dict):
        raise UsageError("config file must hold a JSON object")
    return d


def run_config(args, cfg_file: dict, model: str | None = None) -> pl.RunConfig:
    known = {f.name for f in fields(pl.RunConfig)}
    values = {k: v for k, v in cfg_file.items() if k in known}
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if model is not None:
        values["model"] = model
    try:
        return pl.RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _gen_spec(args, cfg_file: dict) -> GenSpec:
    known = {f.name for f in fields(GenSpec)}
    values = dict(cfg_file.get("synth", {}))
    bad = set(values) - known
    if bad:
        raise UsageError(f"unknown synth keys: {sorted(bad)}")
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for k in ("prevalence", "notes_per_stay", "note_length", "risk_weight"):
        if k in values:
            values[k] = tuple(values[k])
    return GenSpec(**values)


# --------------------------------------------------------------------------
# manifests


def _manifest_path(work: Path, command: str, cfg: pl.RunConfig | None) -> Path:
    d = work / "manifests"
    d.mkdir(parents=True, exist_ok=True)
    return d / (f"{command}-{cfg.run_name}.json" if cfg is not None else f"{command}.json")


def write_manifest(work: Path, command: str, data: Path, cfg: pl.RunConfig | None, extra: dict | None = None) -> Path:
    inputs = {n: pl.file_sha256(data / n) for n in pl.INPUT_FILES if (data / n).exists()}
    doc = {
        "version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "data": str(data),
        "work": str(work),
        "inputs": inputs,
        "config": asdict(cfg) if cfg is not None else None,
        "seeds": {"seed": cfg.seed, "split_seed": cfg.split_seed} if cfg is not None else None,
        "extra": extra or {},
    }
    path = _manifest_path(work, command, cfg)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------
# commands


def _workspace(data: Path, work: Path, cfg: pl.RunConfig) -> pl.Workspace:
    if not (work / "cohort.jsonl").exists():
        if not (data / "stays.csv").exists():
            raise DataError(f"no cohort in {work} and no raw tables in {data}")
        pl.ingest(data, work, cfg.k_folds, cfg.split_seed, cfg.val_fraction)
    return pl.Workspace.open(work)


def execute(command: str, data: Path, work: Path, cfg: pl.RunConfig | None, extra: dict) -> dict:
    """Run one stage with a fully resolved configuration."""
    if command == "synth":
        spec = GenSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in extra["genspec"].items()})
        out = Path(extra.get("out") or data)
        out.mkdir(parents=True, exist_ok=True)
        syn = generate(spec)
        syn.write(out)
        print(json.dumps({"out": str(out), "stay_rows": len(syn.tables.stays), "notes": len(syn.tables.notes), "expected_rate": syn.expected_rate}))
        return {}
    if command == "ingest":
        info = pl.ingest(data, work, cfg.k_folds, cfg.split_seed, cfg.val_fraction)
        print(json.dumps({k: info[k] for k in ("n_records", "n_patients", "exclusions")}, sort_keys=True))
        return {}
    ws = _workspace(data, work, cfg)
    folds = cfg.fold_list()
    if command == "vocab":
        for f in folds:
            print(json.dumps({"fold": f, "vocab_size": len(pl.fold_vocab(ws, f, cfg))}))
    elif command == "embed":
        for f in folds:
            emb = pl.fold_embeddings(ws, f, cfg, pl.fold_vocab(ws, f, cfg))
            print(json.dumps({"fold": f, "rows": emb.vectors.shape[0], "dim": emb.dim}))
    elif command == "labels":
        for f in folds:
            print(json.dumps({"fold": f, "n_labels": len(pl.fold_labels(ws, f, cfg))}))
    elif command in ("train", "oracle"):
        res = pl.run_folds(ws, cfg)
        print(json.dumps(res["aggregate"] or res["per_fold"], sort_keys=True))
    elif command == "eval":
        for f in folds:
            print(json.dumps(pl.evaluate_fold(ws, cfg, f), sort_keys=True))
    elif command == "explain":
        for f in folds:
            paths = pl.explain_fold(ws, cfg, f, extra.get("stays"), extra.get("limit", 10), extra.get("top", 14))
            print(json.dumps({"fold": f, "reports": len(paths)}))
    elif command == "fps":
        for f in folds:
            print(json.dumps({"fold": f, "export": str(pl.false_positives_fold(ws, cfg, f, extra.get("top", 50)))}))
    elif command == "report":
        print(pl.report(ws, cfg))
    return {}


def replay(manifest: Path, work: Path | None) -> None:
    with open(manifest) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('version')!r}")
    data = Path(doc["data"])
    for name, digest in doc["inputs"].items():
        if not (data / name).exists() or pl.file_sha256(data / name) != digest:
            raise DataError(f"input {data / name} differs from the manifest")
    work = Path(work or doc["work"])
    cfg = pl.RunConfig.from_dict(doc["config"]) if doc["config"] is not None else None
    execute(doc["command"], data, work, cfg, doc["extra"])
    if doc["command"] != "synth":
        write_manifest(work, doc["command"], data, cfg, doc["extra"])


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='ts=%(asctime)s level=%(levelname)s logger=%(name)s msg="%(message)s"',
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_logging(args.verbose)
        if args.command == "replay":
            replay(args.manifest, args.work)
            return 0
        cfg_file = _load_config_file(args.config)
        data, work = _dirs(args, cfg_file)
        extra: dict = {}
        cfg = None
        if args.command == "synth":
            spec = _gen_spec(args, cfg_file)
            try:
                spec.validate()
            except DataError as exc:
                raise UsageError(str(exc))
            extra = {"genspec": asdict(spec), "out": str(args.out) if args.out else None}
        else:
            cfg = run_config(args, cfg_file, "lr_oracle" if args.command == "oracle" else None)
            for key in ("stays", "limit", "top"):
                if getattr(args, key, None) is not None:
                    extra[key] = getattr(args, key)
        execute(args.command, data, work, cfg, extra)
        if args.command != "synth":
            write_manifest(work, args.command, data, cfg, extra)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
