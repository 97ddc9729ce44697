"""CSV loading, schema handling, preprocessing, and split logic."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadFractions,
    EmptyDataset,
    LabelOutOfRange,
    MissingColumn,
    MissingHeader,
    MissingKey,
    NotFitted,
    OverlappingColumns,
    UnknownTask,
    UnparsableNumeric,
)

TASKS = ("binclass", "multiclass", "regression")

# numerical cells treated as missing
_MISSING = {"", "nan", "na", "null", "none", "?"}


@dataclass(frozen=True)
class FeatureSchema:
    """Declares the target column, task type, and feature column roles."""

    target: str
    task: str
    numerical: tuple[str, ...]
    categorical: tuple[str, ...]

    @property
    def f1(self) -> int:
        return len(self.numerical)

    @property
    def f2(self) -> int:
        return len(self.categorical)

    @property
    def n_features(self) -> int:
        return self.f1 + self.f2

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.numerical + self.categorical

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "task": self.task,
            "numerical": list(self.numerical),
            "categorical": list(self.categorical),
        }


def schema_from_dict(obj: dict) -> FeatureSchema:
    for key in ("target", "task", "numerical", "categorical"):
        if key not in obj:
            raise MissingKey(f"schema is missing key {key!r}")
    task = obj["task"]
    if task not in TASKS:
        raise UnknownTask(f"task {task!r} not one of {TASKS}")
    numerical = tuple(obj["numerical"])
    categorical = tuple(obj["categorical"])
    overlap = set(numerical) & set(categorical)
    if overlap:
        raise OverlappingColumns(f"columns in both numerical and categorical: {sorted(overlap)}")
    target = obj["target"]
    if target in numerical or target in categorical:
        raise OverlappingColumns(f"target column {target!r} also listed as a feature")
    if len(set(numerical)) != len(numerical) or len(set(categorical)) != len(categorical):
        raise OverlappingColumns("duplicate column names within a feature list")
    if len(numerical) + len(categorical) == 0:
        raise MissingKey("schema declares no feature columns")
    return FeatureSchema(target=target, task=task, numerical=numerical, categorical=categorical)


def parse_schema(path: str) -> FeatureSchema:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    return schema_from_dict(obj)


@dataclass
class Dataset:
    """Feature matrix plus targets.

    x_cat holds raw strings straight after load_csv and integer category
    indices after preprocessing; y is raw strings for classification until
    the Preprocessor maps labels, floats for regression, and may be None
    for unlabeled prediction inputs.
    """

    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray | None
    schema: FeatureSchema

    @property
    def n(self) -> int:
        return self.x_num.shape[0] if self.schema.f1 else self.x_cat.shape[0]

    @property
    def n_features(self) -> int:
        return self.schema.n_features

    @property
    def task(self) -> str:
        return self.schema.task


def load_csv(path: str, schema: FeatureSchema, require_target: bool = True) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingHeader(f"{path}: empty file, no header row") from None
        rows = [r for r in reader if r]

    col_index = {name: i for i, name in enumerate(header)}
    for name in schema.feature_names:
        if name not in col_index:
            raise MissingColumn(f"{path}: column {name!r} not in header")
    has_target = schema.target in col_index
    if require_target and not has_target:
        raise MissingColumn(f"{path}: target column {schema.target!r} not in header")
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")

    n = len(rows)
    x_num = np.empty((n, schema.f1), dtype=np.float64)
    x_cat_rows: list[list[str]] = []
    y_raw: list[str] = []
    num_idx = [col_index[c] for c in schema.numerical]
    cat_idx = [col_index[c] for c in schema.categorical]
    t_idx = col_index[schema.target] if has_target else None

    for i, row in enumerate(rows):
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        for j, ci in enumerate(num_idx):
            x_num[i, j] = _parse_number(row[ci], i + 1, schema.numerical[j])
        x_cat_rows.append([row[ci] for ci in cat_idx])
        if t_idx is not None:
            y_raw.append(row[t_idx])

    x_cat = np.array(x_cat_rows, dtype=str).reshape(n, schema.f2)
    y: np.ndarray | None = None
    if has_target:
        if schema.task == "regression":
            y = np.array(
                [_parse_number(v, i + 1, schema.target) for i, v in enumerate(y_raw)],
                dtype=np.float64,
            )
        else:
            y = np.array(y_raw, dtype=str)
    return Dataset(x_num=x_num, x_cat=x_cat, y=y, schema=schema)


def _parse_number(cell: str, row: int, col: str) -> float:
    s = cell.strip()
    if s.lower() in _MISSING:
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise UnparsableNumeric(row, col, cell) from None


@dataclass
class Preprocessor:
    """Train-split statistics used to map raw datasets to model inputs."""

    schema: FeatureSchema
    num_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_std: np.ndarray = field(default_factory=lambda: np.ones(0))
    cat_vocabs: tuple[dict, ...] = ()
    label_classes: tuple[str, ...] | None = None
    y_mean: float = 0.0
    y_std: float = 1.0
    num_median: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cat_modes: tuple[str, ...] = ()
    fitted: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.label_classes) if self.label_classes else 0

    def cardinalities(self) -> tuple[int, ...]:
        # vocab size including the reserved unknown index 0
        return tuple(len(v) + 1 for v in self.cat_vocabs)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "num_mean": self.num_mean.tolist(),
            "num_std": self.num_std.tolist(),
            "cat_vocabs": [dict(v) for v in self.cat_vocabs],
            "label_classes": list(self.label_classes) if self.label_classes else None,
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "num_median": self.num_median.tolist(),
            "num_min": self.num_min.tolist(),
            "num_max": self.num_max.tolist(),
            "cat_modes": list(self.cat_modes),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Preprocessor":
        return cls(
            schema=schema_from_dict(obj["schema"]),
            num_mean=np.asarray(obj["num_mean"], dtype=np.float64),
            num_std=np.asarray(obj["num_std"], dtype=np.float64),
            cat_vocabs=tuple(obj["cat_vocabs"]),
            label_classes=tuple(obj["label_classes"]) if obj["label_classes"] else None,
            y_mean=float(obj["y_mean"]),
            y_std=float(obj["y_std"]),
            num_median=np.asarray(obj["num_median"], dtype=np.float64),
            num_min=np.asarray(obj["num_min"], dtype=np.float64),
            num_max=np.asarray(obj["num_max"], dtype=np.float64),
            cat_modes=tuple(obj["cat_modes"]),
            fitted=True,
        )


def fit_transform(train: Dataset, schema: FeatureSchema) -> tuple[Preprocessor, Dataset]:
    if train.n == 0:
        raise EmptyDataset("cannot fit a preprocessor on an empty dataset")
    xn = train.x_num
    with np.errstate(all="ignore"):
        mean = np.nanmean(xn, axis=0) if schema.f1 else np.zeros(0)
        std = np.nanstd(xn, axis=0) if schema.f1 else np.zeros(0)
        med = np.nanmedian(xn, axis=0) if schema.f1 else np.zeros(0)
        lo = np.nanmin(xn, axis=0) if schema.f1 else np.zeros(0)
        hi = np.nanmax(xn, axis=0) if schema.f1 else np.zeros(0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    std = np.where(np.isfinite(std) & (std > 0), std, 1.0)
    med = np.where(np.isfinite(med), med, 0.0)
    lo = np.where(np.isfinite(lo), lo, 0.0)
    hi = np.where(np.isfinite(hi), hi, 0.0)

    vocabs = []
    modes = []
    for j in range(schema.f2):
        col = train.x_cat[:, j]
        values, counts = np.unique(col, return_counts=True)
        vocabs.append({v: i + 1 for i, v in enumerate(values)})
        modes.append(str(values[np.argmax(counts)]))

    label_classes = None
    y_mean, y_std = 0.0, 1.0
    if schema.task == "regression":
        y_mean = float(np.mean(train.y))
        y_std = float(np.std(train.y))
        if not np.isfinite(y_std) or y_std <= 0:
            y_std = 1.0
    else:
        label_classes = tuple(str(v) for v in np.unique(train.y))

    prep = Preprocessor(
        schema=schema,
        num_mean=mean,
        num_std=std,
        cat_vocabs=tuple(vocabs),
        label_classes=label_classes,
        y_mean=y_mean,
        y_std=y_std,
        num_median=med,
        num_min=lo,
        num_max=hi,
        cat_modes=tuple(modes),
        fitted=True,
    )
    return prep, transform(prep, train)


def transform(prep: Preprocessor, ds: Dataset) -> Dataset:
    if not prep.fitted:
        raise NotFitted("transform called before fit")
    schema = prep.schema
    xn = ds.x_num.copy()
    if schema.f1:
        nan_mask = ~np.isfinite(xn)
        if nan_mask.any():
            xn[nan_mask] = np.broadcast_to(prep.num_mean, xn.shape)[nan_mask]
        xn = (xn - prep.num_mean) / prep.num_std

    xc = np.zeros((ds.n, schema.f2), dtype=np.int64)
    for j in range(schema.f2):
        vocab = prep.cat_vocabs[j]
        xc[:, j] = [vocab.get(v, 0) for v in ds.x_cat[:, j]]

    y = None
    if ds.y is not None:
        if schema.task == "regression":
            y = (np.asarray(ds.y, dtype=np.float64) - prep.y_mean) / prep.y_std
        else:
            index = {c: i for i, c in enumerate(prep.label_classes)}
            y = np.empty(ds.n, dtype=np.int64)
            for i, v in enumerate(ds.y):
                if str(v) not in index:
                    raise LabelOutOfRange(f"label {v!r} not seen during fit")
                y[i] = index[str(v)]
    return Dataset(x_num=xn, x_cat=xc, y=y, schema=schema)


def destandardize_y(prep: Preprocessor, y_std_units: np.ndarray) -> np.ndarray:
    return y_std_units * prep.y_std + prep.y_mean


def take(ds: Dataset, idx: np.ndarray) -> Dataset:
    idx = np.asarray(idx, dtype=np.int64)
    return Dataset(
        x_num=ds.x_num[idx],
        x_cat=ds.x_cat[idx],
        y=None if ds.y is None else ds.y[idx],
        schema=ds.schema,
    )


def _allocate(n: int, fractions: tuple[float, float, float]) -> list[int]:
    # largest-remainder sizing: sums to n, each within 1 of the exact share
    exact = [f * n for f in fractions]
    base = [int(np.floor(e)) for e in exact]
    short = n - sum(base)
    order = sorted(range(3), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split_indices(
    ds: Dataset, fractions: tuple[float, float, float], seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise BadFractions(f"need three nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions {fractions} do not sum to 1")
    rng = np.random.Generator(np.random.Philox(seed))
    parts: list[list[np.ndarray]] = [[], [], []]
    if ds.task == "regression" or ds.y is None:
        perm = rng.permutation(ds.n)
        sizes = _allocate(ds.n, fractions)
        parts[0].append(perm[: sizes[0]])
        parts[1].append(perm[sizes[0] : sizes[0] + sizes[1]])
        parts[2].append(perm[sizes[0] + sizes[1] :])
    else:
        labels = np.asarray(ds.y)
        for value in np.unique(labels):
            cls_idx = np.flatnonzero(labels == value)
            perm = cls_idx[rng.permutation(len(cls_idx))]
            sizes = _allocate(len(cls_idx), fractions)
            parts[0].append(perm[: sizes[0]])
            parts[1].append(perm[sizes[0] : sizes[0] + sizes[1]])
            parts[2].append(perm[sizes[0] + sizes[1] :])
    out = tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)
    return out


def split(
    ds: Dataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(ds, fractions, seed)
    return take(ds, tr), take(ds, va), take(ds, te)


def load_split_file(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    for key in ("train", "valid", "test"):
        if key not in obj:
            raise MissingKey(f"split file missing key {key!r}")
    return (
        np.asarray(obj["train"], dtype=np.int64),
        np.asarray(obj["valid"], dtype=np.int64),
        np.asarray(obj["test"], dtype=np.int64),
    )


def feature_matrix(ds: Dataset) -> np.ndarray:
    """Numerical and categorical columns combined into one float matrix.

    Expects a preprocessed dataset (integer category codes); the tree
    model treats category codes as ordered numeric values.
    """
    blocks = []
    if ds.schema.f1:
        blocks.append(np.asarray(ds.x_num, dtype=np.float64))
    if ds.schema.f2:
        blocks.append(np.asarray(ds.x_cat, dtype=np.float64))
    if len(blocks) == 1:
        return blocks[0]
    return np.concatenate(blocks, axis=1)
