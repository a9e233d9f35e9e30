"""Command-line entry point.

Subcommands::

    gen-data             synthetic admissions (records.jsonl, truth.json, schema)
    split                patient-grouped train/validation/test partition
    preprocess           fitted statistics and encoded tensors
    train                fit a model (model.pdm, train_log.csv)
    eval                 metrics of a saved model, or repeated-run experiments
    interpret            three-panel case report for one admission
    export-interactions  course-by-cohort interaction matrix
    gradcheck            finite-difference check of the composite objective

Every subcommand writes ``<subcommand>.manifest.json`` into ``--out`` with
the resolved config hash and the sha256 of each artifact. Failures print a
single line ``error: <category>: <message>`` and exit 2 (config), 3 (data)
or 4 (numeric).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import torch

from . import __version__
from .archive import load_model, save_model, write_tensors
from .config import TrainConfig, load_config, synthetic_section
from .data import (DatasetSplit, encode_partitions, preprocess_record, read_records, split_dataset,
                   stack_records, write_records)
from .errors import ConfigError, ContractError, NumericError, ProtoDoctorError, SchemaError
from .evaluation import ABLATIONS, auroc, auprc, results_json, run_experiment, summary_csv
from .interpretation import (build_case_report, export_interaction_matrix, panel_b_csv, project_all,
                             sidecar_json)
from .schema import default_schema, load_schema, synthetic_schema
from .synthetic import SyntheticSpec, generate_synthetic_dataset

log = logging.getLogger("protodoctor")

SCHEMA_FILE = "schema.schema"
GRADCHECK_TOLERANCE = {"linear": 1e-6, "prototypes": 1e-4, "recurrent": 1e-3, "demographic": 1e-3}


class GradientCheckError(NumericError):
    def __init__(self, groups):
        FloatingPointError.__init__(self, f"gradient check over tolerance for {', '.join(groups)}")
        self.stage = "gradient check"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message.replace("\n", " "))


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _manifest(out: Path, command: str, config_hash: str, files: list[Path], extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash,
        "artifacts": {p.name: _sha256(p) for p in sorted(files)},
    }
    doc.update(extra or {})
    _write(out / f"{command}.manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# shared resolution


def _overrides(args) -> dict:
    values = {}
    for item in args.overrides or []:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        values[key.strip()] = val.strip()
    return values


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then ``key=value`` overrides, then
    dedicated flags (highest precedence)."""
    cfg = load_config(getattr(args, "config", None), _overrides(args))
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "T", None) is not None:
        flags["hours"] = args.T
    if getattr(args, "enable_par", None) is not None:
        flags["enable_par"] = args.enable_par
    if getattr(args, "enable_dci", None) is not None:
        flags["enable_dci"] = args.enable_dci
    try:
        return replace(cfg, **flags)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _schema_for(args, data_path: Path | None):
    if getattr(args, "schema", None):
        return load_schema(args.schema)
    if data_path is not None and (data_path.parent / SCHEMA_FILE).exists():
        return load_schema(data_path.parent / SCHEMA_FILE)
    return default_schema()


def _read_records(path) -> list:
    try:
        return read_records(path)
    except OSError as exc:
        raise SchemaError(f"cannot read records {path}: {exc}") from exc


def _read_split(args, records, seed: int) -> DatasetSplit:
    if getattr(args, "split", None):
        try:
            return DatasetSplit.from_json(Path(args.split).read_text())
        except (OSError, KeyError, ValueError) as exc:
            raise SchemaError(f"cannot read split {args.split}: {exc}") from exc
    return split_dataset(records, _fractions(args), seed)


def _fractions(args):
    raw = getattr(args, "fractions", None) or "0.7,0.15,0.15"
    try:
        fr = tuple(float(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --fractions {raw!r}") from exc
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"--fractions must be three non-negative numbers summing to 1, got {raw!r}")
    return fr


def _partitions(args, cfg: TrainConfig):
    data = Path(args.data)
    records = _read_records(data)
    schema = _schema_for(args, data)
    split = _read_split(args, records, cfg.seed)
    stats, tr, va, te = encode_partitions(records, split, schema, cfg.hours)
    return records, schema, split, stats, tr, va, te


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, out: Path) -> None:
    params = {"n_records": 2000, "t": 8, "separation": 4.0, "n_physio": 6, "seed": 0}
    for source in (synthetic_section(args.config), _overrides(args)):
        params.update({k.lower(): v for k, v in source.items()})
    if args.seed is not None:
        params["seed"] = args.seed
    if args.T is not None:
        params["t"] = args.T
    try:
        n_physio = int(params.pop("n_physio"))
        separation = float(params.pop("separation"))
        typed = {"n_records": int(params.pop("n_records")), "T": int(params.pop("t")),
                 "seed": int(params.pop("seed"))}
        extra = {k: float(v) for k, v in params.items()}
        spec = SyntheticSpec.planted(separation=separation, **typed, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic parameters: {exc}") from exc
    schema = synthetic_schema(n_physio)
    records, truth = generate_synthetic_dataset(spec, schema)

    spec_doc = {**asdict(spec), "separation": separation, "n_physio": n_physio}
    h = _hash_dict(spec_doc)
    files = [out / "records.jsonl", out / SCHEMA_FILE, out / "truth.json"]
    write_records(files[0], records)
    _write(files[1], schema.to_text())
    truth_doc = {
        "config_hash": h,
        "spec": spec_doc,
        "admission_ids": [r.admission_id for r in records],
        "cohort": truth.cohort.tolist(),
        "course_weights": truth.course_weights.tolist(),
        "logit": truth.logit.tolist(),
    }
    _write(files[2], json.dumps(truth_doc, sort_keys=True) + "\n")
    _manifest(out, "gen-data", h, files)


def cmd_split(args, out: Path) -> None:
    records = _read_records(args.data)
    seed = 0 if args.seed is None else args.seed
    split = split_dataset(records, _fractions(args), seed)
    doc = json.loads(split.to_json())
    doc["fractions"] = list(_fractions(args))
    h = _hash_dict({"seed": seed, "fractions": doc["fractions"]})
    doc["config_hash"] = h
    path = _write(out / "split.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _manifest(out, "split", h, [path])


def cmd_preprocess(args, out: Path) -> None:
    cfg = resolve_config(args)
    _, schema, split, stats, tr, va, te = _partitions(args, cfg)
    path = out / "encoded.pdt"
    tensors, ids = {}, {}
    for name, b in (("train", tr), ("validation", va), ("test", te)):
        if b is None:
            continue
        tensors[f"{name}.physiology"] = b.physiology
        tensors[f"{name}.demographics"] = b.demographics
        tensors[f"{name}.labels"] = b.labels
        ids[name] = b.ids
    write_tensors(path, tensors, {"config_hash": cfg.config_hash(), "hours": cfg.hours, "ids": ids,
                                  "stats": stats.to_dict(), "schema_fingerprint": schema.fingerprint()})
    stats_path = _write(out / "stats.json", json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n")
    split_path = _write(out / "split.json", split.to_json() + "\n")
    _manifest(out, "preprocess", cfg.config_hash(), [path, stats_path, split_path])


def cmd_train(args, out: Path) -> None:
    from .training import train

    cfg = resolve_config(args)
    _, schema, split, stats, tr, va, _ = _partitions(args, cfg)
    if tr is None or va is None:
        raise ContractError("training and validation partitions must be non-empty")
    groups = schema.channel_groups() if cfg.encoder_mode == "channelwise" else None
    result = train(tr, va, cfg, groups)
    model_path = out / "model.pdm"
    save_model(model_path, result.model, schema, stats, {
        "best_epoch": result.best_epoch, "epochs_run": result.epochs_run, "diverged": result.diverged,
        "best_validation": result.best_validation, "split_seed": split.seed,
    })
    files = [model_path,
             _write(out / "train_log.csv", result.log_csv()),
             _write(out / "split.json", split.to_json() + "\n"),
             _write(out / "config.resolved.ini", f"# config_hash = {cfg.config_hash()}\n" + cfg.to_text())]
    _manifest(out, "train", cfg.config_hash(), files)


def cmd_eval(args, out: Path) -> None:
    if args.model:
        bundle = load_model(args.model)
        cfg = bundle.config
        data = Path(args.data)
        records = _read_records(data)
        split = _read_split(args, records, cfg.seed)
        by_id = {r.admission_id: r for r in records}
        missing = [i for i in split.test if i not in by_id]
        if missing or not split.test:
            raise SchemaError("test partition is empty or references unknown admissions")
        batch = stack_records([preprocess_record(by_id[i], bundle.stats, bundle.schema, cfg.hours)
                               for i in split.test])
        p = bundle.model.predict_proba(batch)
        doc = {"config_hash": cfg.config_hash(), "n_test": len(batch),
               "auroc": auroc(p, batch.labels), "auprc": auprc(p, batch.labels)}
        metrics = _write(out / "metrics.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
        preds = _write(out / "predictions.csv", "admission_id,label,y_hat\n" + "".join(
            f"{i},{int(y)},{v!r}\n" for i, y, v in zip(batch.ids, batch.labels, p.tolist())))
        _manifest(out, "eval", cfg.config_hash(), [metrics, preds])
        return

    cfg = resolve_config(args)
    records, schema, split, stats, tr, va, te = _partitions(args, cfg)
    if te is None:
        raise ContractError("test partition is empty")
    variants = tuple(v.strip() for v in args.variants.split(","))
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {sorted(ABLATIONS)}")
    groups = schema.channel_groups() if cfg.encoder_mode == "channelwise" else None
    results = run_experiment(tr, va, te, cfg, n_runs=args.runs, channel_groups=groups, variants=variants)
    files = [_write(out / "results.json", results_json(results, cfg) + "\n"),
             _write(out / "summary.csv", summary_csv(results))]
    _manifest(out, "eval", cfg.config_hash(), files)


def _load_training(bundle, args):
    cfg = bundle.config
    records = _read_records(args.data)
    split = _read_split(args, records, cfg.seed)
    by_id = {r.admission_id: r for r in records}
    train_ids = [i for i in split.train if i in by_id]
    if not train_ids:
        raise ContractError("prototype projection needs at least one training record")
    batch = stack_records([preprocess_record(by_id[i], bundle.stats, bundle.schema, cfg.hours) for i in train_ids])
    return by_id, {i: by_id[i] for i in train_ids}, batch


def cmd_interpret(args, out: Path) -> None:
    bundle = load_model(args.model)
    cfg = bundle.config
    by_id, train_records, train_batch = _load_training(bundle, args)
    files = []
    if args.push_prototypes:
        project_all(bundle.model, train_batch, train_records, push=True)
    courses, cohorts = project_all(bundle.model, train_batch, train_records)
    proto_doc = {"config_hash": cfg.config_hash(), "push": bool(args.push_prototypes),
                 "course_prototypes": [{k: v for k, v in p.to_json().items() if k != "physiology"} for p in courses],
                 "cohort_prototypes": [p.to_json() for p in cohorts]}
    files.append(_write(out / "prototypes.json", json.dumps(proto_doc, indent=1, sort_keys=True) + "\n"))
    if args.record:
        if args.record not in by_id:
            raise SchemaError(f"unknown admission {args.record!r}")
        rec = by_id[args.record]
        enc = preprocess_record(rec, bundle.stats, bundle.schema, cfg.hours)
        report = build_case_report(rec, enc, bundle.model, bundle.schema, train_batch, train_records, cfg.threshold)
        report["config_hash"] = cfg.config_hash()
        files.append(_write(out / f"report_{args.record}.json", json.dumps(report, indent=1, sort_keys=True) + "\n"))
        files.append(_write(out / f"report_{args.record}_panel_b.csv", panel_b_csv(report)))
    _manifest(out, "interpret", cfg.config_hash(), files)


def cmd_export_interactions(args, out: Path) -> None:
    bundle = load_model(args.model)
    text, sidecar = export_interaction_matrix(bundle.model)
    sidecar["config_hash"] = bundle.config.config_hash()
    files = [_write(out / "interactions.csv", text), _write(out / "interactions.json", sidecar_json(sidecar) + "\n")]
    _manifest(out, "export-interactions", bundle.config.config_hash(), files)


def cmd_gradcheck(args, out: Path) -> None:
    from .model import ProtoDoctor
    from .training import gradient_check

    cfg = TrainConfig.tiny().with_overrides(_overrides(args))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    records, _ = generate_synthetic_dataset(SyntheticSpec.planted(n_records=16, T=cfg.hours, seed=cfg.seed))
    schema = synthetic_schema()
    split = DatasetSplit([r.admission_id for r in records], [], [], cfg.seed)
    _, batch, _, _ = encode_partitions(records, split, schema, cfg.hours)
    groups = schema.channel_groups() if cfg.encoder_mode == "channelwise" else None
    model = ProtoDoctor(cfg, batch.physiology.shape[-1], batch.demographics.shape[-1], groups)
    doc = {"config_hash": cfg.config_hash(), "groups": {}}
    failed = []
    for group, tol in GRADCHECK_TOLERANCE.items():
        res = gradient_check(model, batch, group, n_coords=args.coords, seed=cfg.seed)
        ok = res.max_rel_error < tol
        doc["groups"][group] = {"max_rel_error": res.max_rel_error, "tolerance": tol, "pass": ok,
                                "coordinates": len(res.checked)}
        if not ok:
            failed.append(group)
    path = _write(out / "gradcheck.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _manifest(out, "gradcheck", cfg.config_hash(), [path])
    if failed:
        raise GradientCheckError(failed)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protodoctor", description="Prototype-based ICU mortality prediction.")
    parser.add_argument("--version", action="version", version=f"protodoctor {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True, data=True):
        p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", help="INI config file ([protodoctor] / [synthetic] sections)")
            p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True, help="records.jsonl")
            p.add_argument("--schema", help="schema file (default: schema.schema beside the data, else built-in)")
            p.add_argument("--split", help="split.json (default: a fresh split with the config seed)")
            p.add_argument("--fractions", help="train,validation,test fractions for a fresh split")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    def model_flags(p):
        p.add_argument("--T", type=int, help="hours of physiology to use")
        p.add_argument("--enable-par", type=_bool, nargs="?", const=True, dest="enable_par")
        p.add_argument("--enable-dci", type=_bool, nargs="?", const=True, dest="enable_dci")

    p = sub.add_parser("gen-data", help="generate a planted synthetic dataset")
    common(p, data=False)
    p.add_argument("--T", type=int, help="hours per admission")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="patient-grouped partition")
    p.add_argument("--out", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fractions")
    p.set_defaults(func=cmd_split, overrides=[])

    p = sub.add_parser("preprocess", help="fit statistics and encode partitions")
    common(p)
    model_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    common(p)
    model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model or run repeated experiments")
    common(p)
    model_flags(p)
    p.add_argument("--model", help="evaluate this archive on the test partition")
    p.add_argument("--runs", type=int, default=5, help="training runs per variant (without --model)")
    p.add_argument("--variants", default="ProtoDoctor", help="comma-separated ablation variants")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpret", help="prototype projections and a case report")
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--fractions")
    p.add_argument("--record", help="admission id to report on")
    p.add_argument("--push-prototypes", action="store_true", dest="push_prototypes")
    p.set_defaults(func=cmd_interpret, overrides=[])

    p = sub.add_parser("export-interactions", help="interaction matrix CSV and sidecar")
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_export_interactions, overrides=[])

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    common(p, data=False)
    p.add_argument("--coords", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run_cli(argv=None) -> int:
    level = os.environ.get("PROTODOCTOR_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, out)
    except ProtoDoctorError as exc:
        print(f"error: {exc.category}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: data: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
