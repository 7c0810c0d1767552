"""Command-line entry point: config-driven training, evaluation, embedding
export, t-SNE projection, and report generation.

Exit codes: 0 success, 2 configuration/validation error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bilevel, data, eval as eval_mod, nn
from .bilevel import NumericError, SgdConfig, TrainRunRecord, EpochStats
from .data import FormatError, LabeledImageSet, PreprocessSpec
from .nn import CheckpointError, ModelConfig, ModelError

__all__ = ["main", "ConfigError", "load_config", "write_metrics", "read_metrics"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

OUTPUT_ROOT_ENV = "OSSL_OUTPUT_ROOT"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


def _require(cond: bool, field: str, msg: str):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _check_keys(obj: dict, allowed: set, field: str):
    unknown = set(obj) - allowed
    _require(not unknown, field, f"unknown keys {sorted(unknown)}")


def _parse_preprocess(obj, field: str) -> PreprocessSpec:
    _require(isinstance(obj, dict), field, "must be an object")
    _check_keys(obj, {"target_shape", "grayscale", "resize", "normalize"}, field)
    try:
        return PreprocessSpec(
            target_shape=tuple(obj["target_shape"]) if obj.get("target_shape") else None,
            grayscale=bool(obj.get("grayscale", False)),
            resize=obj.get("resize", "none"),
            normalize=[tuple(p) for p in obj["normalize"]]
            if obj.get("normalize") else None)
    except FormatError as exc:
        raise ConfigError(f"{field}: {exc}") from exc


def _parse_dataset(obj, field: str, role: str) -> dict:
    _require(isinstance(obj, dict), field, "must be an object")
    _check_keys(obj, {"name", "format", "path", "labels_path", "preprocess",
                      "class_count"}, field)
    _require("path" in obj, field, "missing required key 'path'")
    _require(obj.get("format") in ("idx", "cifar", "raw"), f"{field}.format",
             "must be one of idx, cifar, raw")
    path = Path(obj["path"])
    _require(path.exists(), f"{field}.path", f"file {path} does not exist")
    labels_path = obj.get("labels_path")
    if obj["format"] == "idx":
        _require(labels_path is not None, f"{field}.labels_path",
                 "required for idx format")
        _require(Path(labels_path).exists(), f"{field}.labels_path",
                 f"file {labels_path} does not exist")
    spec = _parse_preprocess(obj["preprocess"], f"{field}.preprocess") \
        if obj.get("preprocess") else None
    return {"name": obj.get("name", path.stem), "format": obj["format"],
            "path": str(path), "labels_path": labels_path,
            "class_count": int(obj.get("class_count", 10)),
            "preprocess": spec, "role": role}


def load_config(path) -> dict:
    """Parse and validate a run config; returns a resolved config dict."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from exc

    _require(isinstance(raw, dict), "config", "top level must be an object")
    _check_keys(raw, {"version", "model", "sgd", "train_set", "test_sets",
                      "output_dir"}, "config")
    _require(raw.get("version") == CONFIG_VERSION, "version",
             f"must be {CONFIG_VERSION}")
    _require("model" in raw, "model", "missing section")
    _require("sgd" in raw, "sgd", "missing section")
    _require("train_set" in raw, "train_set", "missing section")

    mobj = raw["model"]
    _check_keys(mobj, {"backbone_kind", "num_classes", "init_seed",
                       "input_spec", "head_hidden", "dtype"}, "model")
    try:
        model_cfg = ModelConfig(
            backbone_kind=mobj.get("backbone_kind", "lenet5"),
            num_classes=int(mobj.get("num_classes", 10)),
            init_seed=int(mobj.get("init_seed", 0)),
            input_spec=tuple(mobj["input_spec"]) if mobj.get("input_spec") else None,
            head_hidden=mobj.get("head_hidden"),
            dtype=mobj.get("dtype", "f32"))
    except ModelError as exc:
        raise ConfigError(f"model: {exc}") from exc

    sobj = raw["sgd"]
    _check_keys(sobj, {"l_r", "batch_size", "n_epoch", "shuffle_seed", "mode",
                       "lower_variant"}, "sgd")
    try:
        sgd_cfg = SgdConfig(
            l_r=float(sobj.get("l_r", 0.01)),
            batch_size=int(sobj.get("batch_size", 128)),
            n_epoch=int(sobj.get("n_epoch", 30)),
            shuffle_seed=int(sobj.get("shuffle_seed", 0)),
            mode=sobj.get("mode", "ossl"),
            lower_variant=sobj.get("lower_variant", "ah"))
    except ValueError as exc:
        raise ConfigError(f"sgd: {exc}") from exc

    train_set = _parse_dataset(raw["train_set"], "train_set", "train")
    tests = raw.get("test_sets", [])
    _require(isinstance(tests, list), "test_sets", "must be a list")
    test_sets = [_parse_dataset(t, f"test_sets[{i}]", "ood_test")
                 for i, t in enumerate(tests)]

    out_dir = raw.get("output_dir", "run")
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out_path = Path(out_dir)
    if root and not out_path.is_absolute():
        out_path = Path(root) / out_path

    return {"version": CONFIG_VERSION, "model": model_cfg, "sgd": sgd_cfg,
            "train_set": train_set, "test_sets": test_sets,
            "output_dir": str(out_path)}


def _load_dataset(entry: dict) -> LabeledImageSet:
    if entry["format"] == "idx":
        ds = data.load_idx(entry["path"], entry["labels_path"],
                           name=entry["name"], role=entry["role"],
                           class_count=entry["class_count"])
    elif entry["format"] == "cifar":
        ds = data.load_cifar_bin(entry["path"], name=entry["name"],
                                 role=entry["role"],
                                 class_count=entry["class_count"])
    else:
        ds = data.load_raw_tensor(entry["path"], name=entry["name"],
                                  role=entry["role"])
    if entry["preprocess"] is not None:
        ds = data.preprocess(ds, entry["preprocess"])
    return ds


def _resolved_config_json(cfg: dict) -> str:
    def dataset_obj(d):
        out = {"name": d["name"], "format": d["format"],
               "path": str(Path(d["path"]).resolve()),
               "class_count": d["class_count"]}
        if d["labels_path"]:
            out["labels_path"] = str(Path(d["labels_path"]).resolve())
        if d["preprocess"]:
            p = d["preprocess"]
            out["preprocess"] = {
                "target_shape": list(p.target_shape) if p.target_shape else None,
                "grayscale": p.grayscale, "resize": p.resize,
                "normalize": [list(pair) for pair in p.normalize]
                if p.normalize else None}
        return out

    m = cfg["model"]
    s = cfg["sgd"]
    obj = {
        "version": CONFIG_VERSION,
        "model": {"backbone_kind": m.backbone_kind, "num_classes": m.num_classes,
                  "init_seed": m.init_seed, "input_spec": list(m.input_spec),
                  "head_hidden": m.head_hidden, "dtype": m.dtype},
        "sgd": {"l_r": s.l_r, "batch_size": s.batch_size, "n_epoch": s.n_epoch,
                "shuffle_seed": s.shuffle_seed, "mode": s.mode,
                "lower_variant": s.lower_variant},
        "train_set": dataset_obj(cfg["train_set"]),
        "test_sets": [dataset_obj(t) for t in cfg["test_sets"]],
        "output_dir": str(Path(cfg["output_dir"]).resolve()),
    }
    return json.dumps(obj, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_resolved_config_json(cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# metrics CSV

def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics(record: TrainRunRecord, path) -> None:
    names = record.test_set_names
    header = ["epoch", "L_ch", "L_rh", "L_ah", "train_acc"] + \
             [f"{n}_acc" for n in names] + ["wall_ms"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for ep in record.epochs:
        row = [str(ep.epoch), _fmt(ep.l_ch), _fmt(ep.l_rh), _fmt(ep.l_ah),
               _fmt(ep.train_acc)]
        row += [_fmt(ep.test_acc.get(n)) for n in names]
        row.append(f"{ep.wall_ms:.3f}")
        writer.writerow(row)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_metrics(path, mode: str) -> TrainRunRecord:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty metrics file")
    header = rows[0]
    names = [h[:-4] for h in header[5:-1]]
    record = TrainRunRecord(mode=mode, config_hash="", model_seed=0,
                            shuffle_seed=0, test_set_names=names)
    for row in rows[1:]:
        acc = {n: float(v) for n, v in zip(names, row[5:-1]) if v != ""}
        record.epochs.append(EpochStats(
            epoch=int(row[0]),
            l_ch=float(row[1]) if row[1] else None,
            l_rh=float(row[2]) if row[2] else None,
            l_ah=float(row[3]) if row[3] else None,
            train_acc=float(row[4]) if row[4] else 0.0,
            test_acc=acc, wall_ms=float(row[-1])))
    return record


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    train_set = _load_dataset(cfg["train_set"])
    test_sets = {t["name"]: _load_dataset(t) for t in cfg["test_sets"]}
    model = nn.build_model(cfg["model"])

    chash = config_hash(cfg)
    ckpt = out_dir / "checkpoint.ossl"
    record = bilevel.train(model, train_set, test_sets, cfg["sgd"],
                           config_hash=chash, checkpoint_path=ckpt)
    write_metrics(record, out_dir / "metrics.csv")
    with open(out_dir / "resolved_config.json", "w") as fh:
        fh.write(_resolved_config_json(cfg))
    print(f"run {chash} mode={cfg['sgd'].mode} epochs={len(record.epochs)} "
          f"-> {out_dir}")
    return EXIT_OK


def _parse_preprocess_arg(arg):
    if arg is None:
        return None
    text = arg if arg.lstrip().startswith("{") else Path(arg).read_text()
    return _parse_preprocess(json.loads(text), "preprocess")


def cmd_eval(args) -> int:
    model = nn.load_checkpoint(args.checkpoint)
    entry = _parse_dataset({"path": args.dataset, "format": args.format,
                            "labels_path": args.labels, "name": args.name,
                            "class_count": args.class_count},
                           "dataset", "ood_test")
    entry["preprocess"] = _parse_preprocess_arg(args.preprocess)
    ds = _load_dataset(entry)
    if args.head == "rotation":
        res = eval_mod.rotation_accuracy(model, ds)
    else:
        res = eval_mod.accuracy(model, ds, args.head)
    print(f"{res.dataset},{res.head},{res.accuracy!r},{res.n}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = nn.load_checkpoint(args.checkpoint)
    entry = _parse_dataset({"path": args.dataset, "format": args.format,
                            "labels_path": args.labels, "name": args.name,
                            "class_count": args.class_count},
                           "dataset", "ood_test")
    entry["preprocess"] = _parse_preprocess_arg(args.preprocess)
    ds = _load_dataset(entry)
    eval_mod.export_embeddings(model, ds, args.out)
    print(f"wrote {len(ds)} embeddings to {args.out}")
    return EXIT_OK


def cmd_tsne(args) -> int:
    feats, labels = eval_mod.load_embeddings(args.embeddings)
    cfg = eval_mod.TsneConfig(perplexity=args.perplexity,
                              iterations=args.iterations,
                              learning_rate=args.learning_rate,
                              seed=args.seed)
    result = eval_mod.tsne(feats, cfg)
    with open(args.out, "w") as fh:
        fh.write(f"# perplexity={cfg.perplexity} iterations={cfg.iterations} "
                 f"learning_rate={cfg.learning_rate} "
                 f"early_exaggeration={cfg.early_exaggeration} seed={cfg.seed}\n")
        fh.write("point_index,x,y,label\n")
        for i, (pt, lbl) in enumerate(zip(result.coords, labels)):
            fh.write(f"{i},{float(pt[0])!r},{float(pt[1])!r},{lbl}\n")
    print(f"wrote {len(feats)} t-SNE coordinates to {args.out} "
          f"(final KL {result.kl[-1]:.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    records = []
    for path in args.runs:
        p = Path(path)
        metrics = p / "metrics.csv" if p.is_dir() else p
        if not metrics.exists():
            raise ConfigError(f"runs: no metrics file at {metrics}")
        cfg_path = metrics.parent / "resolved_config.json"
        if args.mode:
            mode = args.mode
        elif cfg_path.exists():
            with open(cfg_path) as fh:
                mode = json.load(fh)["sgd"]["mode"]
        else:
            raise ConfigError(
                f"runs: cannot determine mode for {metrics} "
                f"(no resolved_config.json; pass --mode)")
        records.append(read_metrics(metrics, mode))
    table = eval_mod.report_table(records)
    sys.stdout.write(table.as_csv())
    sys.stdout.write("\n")
    sys.stdout.write(table.as_text())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table.as_csv())
    return EXIT_OK


def _add_dataset_args(p):
    p.add_argument("--dataset", required=True, help="dataset file path")
    p.add_argument("--format", default="raw", choices=["idx", "cifar", "raw"])
    p.add_argument("--labels", default=None, help="labels file (idx format)")
    p.add_argument("--name", default=None, help="dataset display name")
    p.add_argument("--class-count", type=int, default=10)
    p.add_argument("--preprocess", default=None,
                   help="preprocess spec: inline JSON or path to a JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ossl",
        description="Bi-level multi-task training engine with rotation "
                    "self-supervision")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    _add_dataset_args(p)
    p.add_argument("--head", default="semantic",
                   choices=["semantic", "auxiliary", "rotation"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="export backbone embeddings")
    p.add_argument("--checkpoint", required=True)
    _add_dataset_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("tsne", help="project an embedding file to 2-D")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_tsne)

    p = sub.add_parser("report", help="comparison table across runs")
    p.add_argument("runs", nargs="+",
                   help="run output dirs or metrics.csv files")
    p.add_argument("--mode", default=None,
                   help="override training mode for all given runs")
    p.add_argument("--out", default=None, help="also write the CSV table here")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, ModelError, CheckpointError,
            eval_mod.EvalError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
