"""``boda-dg`` command line: gen, train, eval, crossval, report.

Every artifact is a pure function of the inputs, flags and seed, so reruns
overwrite files byte for byte. Wall-clock data lives only in the manifests.
Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import TrainConfig, load_config, parse_overrides
from .data import Dataset, load_dataset, save_dataset
from .data.synthetic import appendix_template, generate_synthetic, load_spec
from .errors import BodaError, ConfigError, DataError, UnknownDomain
from .metrics import MetricsReport, confusion_to_csv, evaluate, load_report, save_report
from .model import load_model, save_model
from .report import comparison_csv, confusion_svg, group_reports, render_table, summarize_rows, summed_confusion
from .trainer import cross_validate, leave_one_domain_out, run_training

log = logging.getLogger("boda_dg")

TEMPLATES = {"appendix": appendix_template}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


class _Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.started = time.perf_counter()
        self.info: dict = {
            "command": command,
            "version": __version__,
            "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "seed": getattr(args, "seed", None),
            "artifacts": [],
            "inputs": {},
        }

    def config(self, cfg: TrainConfig) -> None:
        self.info["config"] = cfg.to_dict()
        self.info["config_hash"] = cfg.config_hash()
        self.info["seed"] = cfg.seed

    def input(self, path) -> None:
        self.info["inputs"][str(path)] = _sha256(path)

    def artifact(self, path) -> None:
        self.info["artifacts"].append(str(path))

    def write(self, path: Path) -> None:
        self.info["duration_s"] = round(time.perf_counter() - self.started, 3)
        _write_json(path, self.info)


def _load_data(path) -> Dataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from None


def _resolve_config(args) -> TrainConfig:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_reports(out: Path, metrics: dict[str, MetricsReport], manifest: _Manifest) -> None:
    for split in sorted(metrics):
        rep_path = out / f"report_{split}.json"
        cm_path = out / f"confusion_{split}.csv"
        save_report(metrics[split], rep_path)
        cm_path.write_text(confusion_to_csv(metrics[split].confusion), encoding="utf-8")
        manifest.artifact(rep_path)
        manifest.artifact(cm_path)


def cmd_gen(args) -> int:
    manifest = _Manifest("gen", args)
    seed = 0 if args.seed is None else args.seed
    if args.template and args.spec:
        raise ConfigError("give either --template or --spec, not both")
    if args.spec:
        try:
            spec = load_spec(args.spec)
        except OSError as exc:
            raise ConfigError(f"cannot read spec: {exc}") from None
        manifest.info["spec_hash"] = _sha256(args.spec)
    else:
        name = args.template or "appendix"
        if name not in TEMPLATES:
            raise ConfigError(f"template: unknown template {name!r}")
        spec = TEMPLATES[name](seed)
        manifest.info["spec_hash"] = hashlib.sha256(f"template:{name}".encode()).hexdigest()
        manifest.info["template"] = name
    manifest.info["seed"] = seed
    ds = generate_synthetic(spec, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    manifest.artifact(out)
    manifest.info["dataset_hash"] = _sha256(out)
    manifest.info["rows"] = len(ds)
    manifest.write(out.with_name(out.name + ".manifest.json"))
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = _Manifest("train", args)
    manifest.config(cfg)
    ds = _load_data(args.data)
    manifest.input(args.data)
    out = _out_dir(args.out)
    meta = {"config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    if args.target_domain is not None:
        result = leave_one_domain_out(cfg, ds, args.target_domain, k=args.folds, val_fold=args.fold)
        meta.update(target_domain=args.target_domain, fold=args.fold, folds=args.folds)
    else:
        result = run_training(cfg, ds, evals={"train": ds})
    model_path = out / "model.json"
    save_model(result.params, model_path, meta)
    manifest.artifact(model_path)
    _save_reports(out, result.metrics, manifest)
    history_path = out / "history.json"
    _write_json(history_path, {"history": result.history, "head_history": result.head_history})
    manifest.artifact(history_path)
    manifest.write(out / "manifest.json")
    for split in sorted(result.metrics):
        m = result.metrics[split]
        print(f"{split}: f1_micro={m.f1_micro:.4f} f1_macro={m.f1_macro:.4f}")
    return 0


def cmd_eval(args) -> int:
    manifest = _Manifest("eval", args)
    try:
        params, meta = load_model(args.model)
    except OSError as exc:
        raise DataError(f"cannot read model: {exc}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file: {exc}") from None
    manifest.input(args.model)
    ds = _load_data(args.data)
    manifest.input(args.data)
    cfg = meta.get("config", {})
    run_meta = {"seed": cfg.get("seed"), "variant": cfg.get("variant"), "fold": meta.get("fold")}
    if args.target_domain is not None:
        if args.target_domain not in ds.present_domains():
            raise UnknownDomain(f"domain {args.target_domain} has no samples")
        ds = ds.subset(ds.indices_of_domains([args.target_domain]))
        run_meta["domain"] = args.target_domain
    report = evaluate(params, ds.features, ds.labels, ds.num_classes, run_meta)
    out = _out_dir(args.out)
    _save_reports(out, {"eval": report}, manifest)
    manifest.write(out / "manifest.json")
    print(f"f1_micro={report.f1_micro:.4f} f1_macro={report.f1_macro:.4f}")
    return 0


def cmd_crossval(args) -> int:
    cfg = _resolve_config(args)
    manifest = _Manifest("crossval", args)
    manifest.config(cfg)
    ds = _load_data(args.data)
    manifest.input(args.data)
    target = 0 if args.target_domain is None else args.target_domain
    result = cross_validate(cfg, ds, k=args.folds, target_domain=target, jobs=args.jobs, track_scores=False)
    out = _out_dir(args.out)
    for fold, run in enumerate(result.runs):
        fold_dir = _out_dir(out / f"fold_{fold}")
        model_path = fold_dir / "model.json"
        save_model(
            run.params,
            model_path,
            {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "target_domain": target, "fold": fold},
        )
        manifest.artifact(model_path)
        _save_reports(fold_dir, run.metrics, manifest)
    agg_path = out / "aggregate.json"
    _write_json(
        agg_path,
        {"variant": cfg.variant, "folds": args.folds, "target_domain": target, "aggregate": result.aggregate},
    )
    manifest.artifact(agg_path)
    manifest.write(out / "manifest.json")
    for split, vals in result.aggregate.items():
        mi, ma = vals["f1_micro"], vals["f1_macro"]
        print(f"{split}: f1_micro={mi['mean']:.4f}±{mi['std']:.4f} f1_macro={ma['mean']:.4f}±{ma['std']:.4f}")
    return 0


def _collect_reports(paths, split: str) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            hits = sorted(p.rglob(f"report_{split}.json"))
            if not hits:
                raise DataError(f"{p}: no report_{split}.json files found")
            found.extend(hits)
        else:
            found.append(p)
    return found


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name) or "method"


def cmd_report(args) -> int:
    manifest = _Manifest("report", args)
    paths = _collect_reports(args.reports, args.split)
    reports = []
    for p in paths:
        try:
            reports.append(load_report(p))
        except OSError as exc:
            raise DataError(f"cannot read report: {exc}") from None
        manifest.input(p)
    labels = args.label
    if labels and len(labels) != len(paths):
        raise ConfigError("label: need one --label per report file")
    groups = group_reports(reports, labels)
    rows = summarize_rows(groups)
    out = _out_dir(args.out)
    table = render_table(rows)
    table_path = out / "table.txt"
    table_path.write_text(table, encoding="utf-8")
    csv_path = out / "comparison.csv"
    csv_path.write_text(comparison_csv(rows), encoding="utf-8")
    manifest.artifact(table_path)
    manifest.artifact(csv_path)
    for name, reps in groups.items():
        svg_path = out / f"confusion_{_slug(name)}.svg"
        svg_path.write_text(confusion_svg(summed_confusion(reps), title=name), encoding="utf-8")
        manifest.artifact(svg_path)
    manifest.write(out / "manifest.json")
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boda-dg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_flags(p):
        p.add_argument("--data", required=True, help="dataset CSV")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--target-domain", type=int)
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--template", help="built-in template (appendix)")
    p.add_argument("--spec", help="key=value spec file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="dataset CSV to write")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    training_flags(p)
    p.add_argument("--fold", type=int, default=0, help="source fold held out for validation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-domain", type=int, help="evaluate on this domain only")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold leave-one-domain-out runs")
    training_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="tabulate and plot saved reports")
    p.add_argument("reports", nargs="+", help="report JSON files or directories to search")
    p.add_argument("--label", action="append", help="method name per report (default: variant)")
    p.add_argument("--split", default="target", help="report split to collect from directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except BodaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
