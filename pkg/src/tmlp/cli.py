"""Command-line surface: train, predict, eval, export-frequency, boundary.

Every command exits zero on success. Failures print one line of the form
``error[Code] message`` to stderr and exit nonzero, where Code is the
raising exception class, so scripts can dispatch on it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .bundle import load_model, save_model
from .data import (
    Dataset,
    fit_transform,
    load_csv,
    load_split_file,
    parse_schema,
    split,
    take,
    transform,
)
from .ensemble import EnsembleBundle, predict_ensemble, train_ensemble
from .errors import (
    GateAbsent,
    LabelColumnMissing,
    MissingColumn,
    MissingHeader,
    MissingKey,
    NonNumericalFeature,
    SchemaMismatch,
    TmlpError,
)
from .metrics import accuracy, auc_binary, rmse
from .model import (
    TmlpModel,
    TrainConfig,
    build_gate_artifacts,
    export_pruned,
    retained_ratio,
    train,
)

RUN_FIELDS = ("data", "schema", "split", "out", "report", "ensemble")


@dataclass(frozen=True)
class RunConfig:
    """One training run: file locations plus the full model configuration.

    Serializes flat: the TrainConfig fields sit at the top level of the
    config file next to the path fields, so a metrics report's config echo
    is itself a valid config file.
    """

    data: str | None = None
    schema: str | None = None
    split: str = "0.8/0.1/0.1"
    out: str = "model.tmlp"
    report: str | None = None
    ensemble: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        doc = {
            "data": self.data,
            "schema": self.schema,
            "split": self.split,
            "out": self.out,
            "report": self.report,
            "ensemble": self.ensemble,
        }
        doc.update(self.train.to_dict())
        return doc

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        kwargs = {k: obj[k] for k in RUN_FIELDS if k in obj and obj[k] is not None}
        kwargs["train"] = TrainConfig.from_dict(obj)
        return cls(**kwargs)


def load_run_config(path: str) -> RunConfig:
    if path.endswith(".toml"):
        with open(path, "rb") as f:
            obj = tomllib.load(f)
    else:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    return RunConfig.from_dict(obj)


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line flags on top."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    for name in ("data", "schema", "split", "out", "report"):
        value = getattr(args, name, None)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{name: value})
    if getattr(args, "ensemble", False):
        cfg = dataclasses.replace(cfg, ensemble=True)
    overrides = {}
    if getattr(args, "no_gate", False):
        overrides["gate_enabled"] = False
    if getattr(args, "no_sparsity", False):
        overrides["sparsity_enabled"] = False
    if getattr(args, "sparsity", None) is not None:
        overrides["target_sparsity"] = float(args.sparsity)
    if getattr(args, "blocks", None) is not None:
        overrides["n_blocks"] = int(args.blocks)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    if overrides:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **overrides))
    return cfg


def resolve_splits(raw: Dataset, spec: str, seed: int):
    """Either "a/b/c" fractions or a path to a split-index JSON file."""
    parts = spec.split("/")
    if len(parts) == 3:
        try:
            fracs = tuple(float(p) for p in parts)
        except ValueError:
            fracs = None
        if fracs is not None:
            return split(raw, fracs, seed=seed)
    tr, va, te = load_split_file(spec)
    return take(raw, tr), take(raw, va), take(raw, te)


def _fmt(v) -> str:
    # repr keeps the shortest decimal string that round-trips the float
    return repr(float(v))


def _head_model(obj: TmlpModel | EnsembleBundle) -> TmlpModel:
    return obj.branches[0] if isinstance(obj, EnsembleBundle) else obj


def _predict(obj: TmlpModel | EnsembleBundle, ds: Dataset) -> np.ndarray:
    if isinstance(obj, EnsembleBundle):
        return predict_ensemble(obj, ds)
    return obj.predict_dataset(ds)


def _split_metric(obj, ds_t: Dataset, raw: Dataset) -> float:
    """Accuracy against raw labels, or RMSE in original target units."""
    out = _predict(obj, ds_t)
    if ds_t.task == "regression":
        return rmse(np.asarray(raw.y, dtype=np.float64), np.asarray(out))
    prep = _head_model(obj).prep
    classes = np.asarray(prep.label_classes, dtype=object)
    pred = classes[np.asarray(out).argmax(axis=1)]
    truth = np.asarray([str(v) for v in raw.y], dtype=object)
    return accuracy(truth, pred)


def _retained(model: TmlpModel) -> float:
    p = model.params
    if p.hidden_idx is None:
        return 1.0
    return retained_ratio(model.config, len(p.hidden_idx), len(p.channel_idx))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args)
    if not cfg.data or not cfg.schema:
        raise MissingKey("train needs --data and --schema (flags or config file)")
    t0 = time.perf_counter()
    schema = parse_schema(cfg.schema)
    raw = load_csv(cfg.data, schema)
    raw_tr, raw_va, raw_te = resolve_splits(raw, cfg.split, cfg.train.seed)
    prep, ds_tr = fit_transform(raw_tr, schema)
    ds_va = transform(prep, raw_va)
    ds_te = transform(prep, raw_te)

    gate = build_gate_artifacts(ds_tr, cfg.train) if cfg.train.gate_enabled else None
    if cfg.ensemble:
        deliverable = train_ensemble(ds_tr, ds_va, cfg.train, prep, gate=gate)
        epochs = max(r.epochs_run for r in deliverable.results)
    else:
        result = train(ds_tr, ds_va, gate, cfg.train, prep)
        deliverable = export_pruned(result.model)
        epochs = result.epochs_run
    wall = time.perf_counter() - t0
    save_model(cfg.out, deliverable)

    report = {
        "task": schema.task,
        "metric": "rmse" if schema.task == "regression" else "accuracy",
        "train_metric": _split_metric(deliverable, ds_tr, raw_tr),
        "valid_metric": _split_metric(deliverable, ds_va, raw_va),
        "test_metric": _split_metric(deliverable, ds_te, raw_te),
        "wall_time_seconds": wall,
        "retained_ratio": _retained(_head_model(deliverable)),
        "epochs_run": epochs,
        "model_file": cfg.out,
        "config": cfg.to_dict(),
    }
    report_path = cfg.report or cfg.out + ".report.json"
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    summary = {
        k: report[k]
        for k in ("task", "metric", "train_metric", "valid_metric", "test_metric",
                  "retained_ratio", "wall_time_seconds")
    }
    print(json.dumps(summary))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    head = _head_model(model)
    schema, prep = head.schema, head.prep
    try:
        raw = load_csv(args.data, schema, require_target=False)
    except (MissingColumn, MissingHeader) as e:
        raise SchemaMismatch(str(e)) from None
    ds = transform(prep, raw)
    out = _predict(model, ds)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        if schema.task == "regression":
            w.writerow(["prediction"])
            for v in out:
                w.writerow([_fmt(v)])
        else:
            classes = list(prep.label_classes)
            w.writerow(["prediction"] + [f"prob_{c}" for c in classes])
            labels = np.asarray(classes, dtype=object)[np.asarray(out).argmax(axis=1)]
            for lab, row in zip(labels, out):
                w.writerow([lab] + [_fmt(p) for p in row])
    print(f"wrote {len(out)} predictions to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    head = _head_model(model)
    schema, prep = head.schema, head.prep
    try:
        raw = load_csv(args.data, schema, require_target=True)
    except MissingColumn as e:
        if "target column" in str(e):
            raise LabelColumnMissing(str(e)) from None
        raise
    ds = transform(prep, raw)
    out = _predict(model, ds)
    metrics: dict[str, float] = {}
    if schema.task == "regression":
        metrics["rmse"] = rmse(np.asarray(raw.y, dtype=np.float64), np.asarray(out))
    else:
        classes = np.asarray(prep.label_classes, dtype=object)
        pred = classes[np.asarray(out).argmax(axis=1)]
        truth = np.asarray([str(v) for v in raw.y], dtype=object)
        metrics["accuracy"] = accuracy(truth, pred)
        if len(classes) == 2:
            metrics["auc"] = auc_binary(np.asarray(ds.y), np.asarray(out)[:, 1])
    print(json.dumps(metrics))
    return 0


def cmd_export_frequency(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    head = _head_model(model)
    if head.gbdt is None:
        raise GateAbsent("model was trained without the tree feature gate")
    schema, prep = head.schema, head.prep
    raw = load_csv(args.data, schema, require_target=False)
    ds = transform(prep, raw)
    alpha = head.frequencies(ds)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(schema.feature_names))
        for row in alpha:
            w.writerow([_fmt(v) for v in row])
    print(f"wrote {alpha.shape[0]}x{alpha.shape[1]} frequency rows to {args.out}")
    return 0


def cmd_boundary(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    head = _head_model(model)
    schema, prep = head.schema, head.prep
    for name in (args.x, args.y):
        if name not in schema.numerical:
            raise NonNumericalFeature(f"{name!r} is not a numerical feature of this model")
    ix = schema.numerical.index(args.x)
    iy = schema.numerical.index(args.y)
    res = int(args.resolution)
    gx = np.linspace(prep.num_min[ix], prep.num_max[ix], res)
    gy = np.linspace(prep.num_min[iy], prep.num_max[iy], res)
    xv, yv = (a.ravel() for a in np.meshgrid(gx, gy, indexing="ij"))
    n = res * res
    # off-plane features pinned: numerical at train median, categorical at mode
    x_num = np.tile(prep.num_median, (n, 1))
    x_num[:, ix] = xv
    x_num[:, iy] = yv
    x_cat = np.tile(np.asarray(prep.cat_modes, dtype=str), (n, 1))
    raw = Dataset(x_num=x_num, x_cat=x_cat, y=None, schema=schema)
    ds = transform(prep, raw)
    out = _predict(model, ds)
    if schema.task == "regression":
        val = np.asarray(out, dtype=np.float64)
    else:
        probs = np.asarray(out)
        val = probs[:, 1] if probs.shape[1] == 2 else probs.max(axis=1)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow([args.x, args.y, "prediction"])
        for a, b, v in zip(xv, yv, val):
            w.writerow([_fmt(a), _fmt(b), _fmt(v)])
    print(f"wrote {n} grid rows to {args.out}")
    return 0


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tmlp",
        description="Tree-gated sparse MLP for tabular prediction.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="fit a model; write a model file and metrics report")
    tr.add_argument("--config", help="TOML or JSON run configuration file")
    tr.add_argument("--data", help="training CSV")
    tr.add_argument("--schema", help="schema JSON")
    tr.add_argument("--split", help='"a/b/c" fractions or a split-index JSON path')
    tr.add_argument("--out", help="model file path")
    tr.add_argument("--report", help="metrics report path (default: <out>.report.json)")
    tr.add_argument("--ensemble", action="store_true", help="train three bagged branches")
    tr.add_argument("--no-gate", dest="no_gate", action="store_true",
                    help="disable the tree feature gate")
    tr.add_argument("--no-sparsity", dest="no_sparsity", action="store_true",
                    help="disable sparsity training and pruning")
    tr.add_argument("--sparsity", type=float, help="target retained fraction")
    tr.add_argument("--blocks", type=int, help="number of mixing blocks")
    tr.add_argument("--seed", type=_u64, help="run seed")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write per-row predictions as CSV")
    pr.add_argument("model", help="model file")
    pr.add_argument("--data", required=True, help="input CSV (target optional)")
    pr.add_argument("--out", default="predictions.csv")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="print metrics on a labeled CSV")
    ev.add_argument("model", help="model file")
    ev.add_argument("--data", required=True, help="labeled CSV")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export-frequency",
                        help="write the per-sample tree feature frequencies as CSV")
    ex.add_argument("model", help="model file")
    ex.add_argument("--data", required=True, help="input CSV (target optional)")
    ex.add_argument("--out", default="frequencies.csv")
    ex.set_defaults(func=cmd_export_frequency)

    bd = sub.add_parser("boundary",
                        help="write a 2-feature prediction grid over train ranges")
    bd.add_argument("model", help="model file")
    bd.add_argument("--x", required=True, help="numerical feature on the first axis")
    bd.add_argument("--y", required=True, help="numerical feature on the second axis")
    bd.add_argument("--resolution", type=int, default=50)
    bd.add_argument("--fix", choices=("median",), default="median",
                    help="off-plane fill policy: train median / mode")
    bd.add_argument("--out", default="boundary.csv")
    bd.set_defaults(func=cmd_boundary)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TmlpError as e:
        print(f"error[{e.code}] {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error[FileNotFound] {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
