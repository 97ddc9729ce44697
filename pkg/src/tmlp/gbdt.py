"""Second-order gradient boosting with exact greedy split search.

Trains the small tree ensemble whose per-sample feature-access counts
drive the feature gate. Split quality follows the standard second-order
formulation: gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda)
- G^2/(H+lambda)] - gamma, leaf weight -G/(H+lambda).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, feature_matrix
from .errors import EmptyDataset, FeatureCountMismatch, SingleClassLabels


@dataclass(frozen=True)
class GbdtConfig:
    n_rounds: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    gamma_split: float = 0.0

    def to_dict(self) -> dict:
        return {
            "n_rounds": self.n_rounds,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "reg_lambda": self.reg_lambda,
            "min_child_weight": self.min_child_weight,
            "gamma_split": self.gamma_split,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GbdtConfig":
        return cls(**obj)


@dataclass
class DecisionTree:
    """Binary tree stored as parallel node arrays, root at index 0.

    feature_index is -1 at leaves; left/right are -1 at leaves; threshold
    is NaN at leaves; leaf_value is 0 at internal nodes.
    """

    feature_index: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature_index)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature_index < 0

    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)

    def internal_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.is_leaf)

    def to_dict(self) -> dict:
        leaf = self.is_leaf
        return {
            "feature_index": self.feature_index.tolist(),
            "threshold": [None if leaf[i] else float(t) for i, t in enumerate(self.threshold)],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_value": self.leaf_value.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DecisionTree":
        thr = np.array(
            [np.nan if t is None else float(t) for t in obj["threshold"]], dtype=np.float64
        )
        return cls(
            feature_index=np.asarray(obj["feature_index"], dtype=np.int64),
            threshold=thr,
            left=np.asarray(obj["left"], dtype=np.int64),
            right=np.asarray(obj["right"], dtype=np.int64),
            leaf_value=np.asarray(obj["leaf_value"], dtype=np.float64),
        )


@dataclass
class GbdtModel:
    trees: list[DecisionTree]
    base_score: np.ndarray
    task: str
    n_classes: int
    n_features: int
    config: GbdtConfig = field(default_factory=GbdtConfig)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_dict(self) -> dict:
        return {
            "trees": [t.to_dict() for t in self.trees],
            "base_score": np.atleast_1d(self.base_score).tolist(),
            "task": self.task,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GbdtModel":
        base = np.asarray(obj["base_score"], dtype=np.float64)
        if obj["task"] != "multiclass":
            base = base.reshape(())
        return cls(
            trees=[DecisionTree.from_dict(t) for t in obj["trees"]],
            base_score=base,
            task=obj["task"],
            n_classes=int(obj["n_classes"]),
            n_features=int(obj["n_features"]),
            config=GbdtConfig.from_dict(obj["config"]),
        )


def split_gain(
    g_left: float,
    h_left: float,
    g_right: float,
    h_right: float,
    reg_lambda: float,
    gamma_split: float,
) -> float:
    g = g_left + g_right
    h = h_left + h_right
    return 0.5 * (
        g_left * g_left / (h_left + reg_lambda)
        + g_right * g_right / (h_right + reg_lambda)
        - g * g / (h + reg_lambda)
    ) - gamma_split


class _TreeBuilder:
    def __init__(self, X: np.ndarray, cfg: GbdtConfig, sorted_idx: list[np.ndarray]):
        self.X = X
        self.cfg = cfg
        self.sorted_idx = sorted_idx
        self.feature_index: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_value: list[float] = []

    def build(self, g: np.ndarray, h: np.ndarray) -> DecisionTree:
        self._grow(self.sorted_idx, g, h, depth=0)
        return DecisionTree(
            feature_index=np.asarray(self.feature_index, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            leaf_value=np.asarray(self.leaf_value, dtype=np.float64),
        )

    def _new_node(self) -> int:
        self.feature_index.append(-1)
        self.threshold.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_value.append(0.0)
        return len(self.feature_index) - 1

    def _grow(self, node_sorted: list[np.ndarray], g: np.ndarray, h: np.ndarray, depth: int) -> int:
        cfg = self.cfg
        node = self._new_node()
        idx0 = node_sorted[0]
        g_sum = float(g[idx0].sum())
        h_sum = float(h[idx0].sum())

        best = None  # (gain, feature, position, threshold)
        if depth < cfg.max_depth and len(idx0) >= 2:
            for f, idx in enumerate(node_sorted):
                v = self.X[idx, f]
                cum_g = np.cumsum(g[idx])
                cum_h = np.cumsum(h[idx])
                pos = np.flatnonzero(v[:-1] < v[1:])
                if len(pos) == 0:
                    continue
                gl = cum_g[pos]
                hl = cum_h[pos]
                gr = g_sum - gl
                hr = h_sum - hl
                gains = 0.5 * (
                    gl * gl / (hl + cfg.reg_lambda)
                    + gr * gr / (hr + cfg.reg_lambda)
                    - g_sum * g_sum / (h_sum + cfg.reg_lambda)
                ) - cfg.gamma_split
                valid = (hl >= cfg.min_child_weight) & (hr >= cfg.min_child_weight)
                if not valid.any():
                    continue
                gains = np.where(valid, gains, -np.inf)
                k = int(np.argmax(gains))
                # strictly-greater comparison keeps the lowest (feature,
                # threshold) pair on ties; within a feature argmax already
                # returns the lowest threshold
                if gains[k] >= 0.0 and (best is None or gains[k] > best[0]):
                    p = pos[k]
                    thr = 0.5 * (v[p] + v[p + 1])
                    best = (float(gains[k]), f, p, float(thr))

        if best is None:
            w = -g_sum / (h_sum + cfg.reg_lambda) * cfg.learning_rate
            self.leaf_value[node] = w
            return node

        _, f_best, _, thr = best
        left_sorted = []
        right_sorted = []
        for idx in node_sorted:
            mask = self.X[idx, f_best] < thr
            left_sorted.append(idx[mask])
            right_sorted.append(idx[~mask])
        left_id = self._grow(left_sorted, g, h, depth + 1)
        right_id = self._grow(right_sorted, g, h, depth + 1)
        self.feature_index[node] = f_best
        self.threshold[node] = thr
        self.left[node] = left_id
        self.right[node] = right_id
        return node


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_gbdt_arrays(X: np.ndarray, y: np.ndarray, task: str, cfg: GbdtConfig) -> GbdtModel:
    X = np.asarray(X, dtype=np.float64)
    n, n_feat = X.shape
    if n == 0:
        raise EmptyDataset("cannot fit trees on an empty dataset")
    sorted_idx = [np.argsort(X[:, f], kind="stable") for f in range(n_feat)]

    if task == "regression":
        y = np.asarray(y, dtype=np.float64)
        base = np.float64(y.mean())
        margin = np.full(n, base)
        trees: list[DecisionTree] = []
        for _ in range(cfg.n_rounds):
            g = margin - y
            h = np.ones(n)
            tree = _TreeBuilder(X, cfg, sorted_idx).build(g, h)
            margin = margin + _predict_tree(tree, X)
            trees.append(tree)
        return GbdtModel(trees, base, task, 0, n_feat, cfg)

    y = np.asarray(y, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassLabels(f"classification needs at least 2 classes, got {len(classes)}")

    if task == "binclass":
        p1 = np.clip(np.mean(y == 1), 1e-12, 1 - 1e-12)
        base = np.float64(np.log(p1 / (1 - p1)))
        margin = np.full(n, base)
        trees = []
        yf = (y == 1).astype(np.float64)
        for _ in range(cfg.n_rounds):
            p = _sigmoid(margin)
            g = p - yf
            h = p * (1.0 - p)
            tree = _TreeBuilder(X, cfg, sorted_idx).build(g, h)
            margin = margin + _predict_tree(tree, X)
            trees.append(tree)
        return GbdtModel(trees, base, task, 2, n_feat, cfg)

    # multiclass: one tree per class per round on softmax gradients
    n_classes = int(y.max()) + 1
    priors = np.bincount(y, minlength=n_classes).astype(np.float64) / n
    base = np.log(np.clip(priors, 1e-12, None))
    margin = np.tile(base, (n, 1))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    per_class: list[list[DecisionTree]] = [[] for _ in range(n_classes)]
    for _ in range(cfg.n_rounds):
        p = _softmax(margin)
        updates = np.empty_like(margin)
        for c in range(n_classes):
            g = p[:, c] - onehot[:, c]
            h = p[:, c] * (1.0 - p[:, c])
            tree = _TreeBuilder(X, cfg, sorted_idx).build(g, h)
            per_class[c].append(tree)
            updates[:, c] = _predict_tree(tree, X)
        margin = margin + updates
    # flatten grouped per class: all rounds of class 0, then class 1, ...
    trees = [t for group in per_class for t in group]
    return GbdtModel(trees, base, task, n_classes, n_feat, cfg)


def fit_gbdt(train: Dataset, valid: Dataset | None, cfg: GbdtConfig) -> GbdtModel:
    """Fits the gate's tree model on a preprocessed training split.

    The validation split is accepted for interface symmetry but unused:
    the gate model needs feature-access statistics, not tuned accuracy,
    so no early stopping is applied.
    """
    del valid
    X = feature_matrix(train)
    return fit_gbdt_arrays(X, train.y, train.task, cfg)


def _predict_tree(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    return tree.leaf_value[predict_leaf_nodes(tree, X)]


def predict_leaf_nodes(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    """Vectorized root-to-leaf descent; returns the leaf node id per row."""
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    internal = ~tree.is_leaf
    if tree.n_nodes == 1:
        return node
    active = np.flatnonzero(internal[node])
    while len(active):
        nd = node[active]
        f = tree.feature_index[nd]
        go_left = X[active, f] < tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = active[internal[node[active]]]
    return node


def traverse_leaf(tree: DecisionTree, x: np.ndarray) -> tuple[int, frozenset]:
    """Recursive descent for one row: (leaf node id, features on the path)."""
    node = 0
    visited = set()
    while tree.feature_index[node] >= 0:
        f = int(tree.feature_index[node])
        visited.add(f)
        if x[f] < tree.threshold[node]:
            node = int(tree.left[node])
        else:
            node = int(tree.right[node])
    return node, frozenset(visited)


def predict_margin(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.n_features:
        raise FeatureCountMismatch(
            f"model expects {model.n_features} features, got {X.shape[1]}"
        )
    n = X.shape[0]
    if model.task == "multiclass":
        margin = np.tile(model.base_score, (n, 1))
        rounds = model.config.n_rounds
        for t, tree in enumerate(model.trees):
            margin[:, t // rounds] += _predict_tree(tree, X)
        return margin
    margin = np.full(n, float(model.base_score))
    for tree in model.trees:
        margin += _predict_tree(tree, X)
    return margin


def predict_gbdt(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    """Regression values, or class probabilities with one column per class."""
    margin = predict_margin(model, X)
    if model.task == "regression":
        return margin
    if model.task == "binclass":
        p1 = _sigmoid(margin)
        return np.stack([1.0 - p1, p1], axis=1)
    return _softmax(margin)
