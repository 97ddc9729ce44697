"""Compiles decision trees into dense matrices for batched traversal.

Each tree becomes four matrices so that leaf selection and per-sample
feature-access counting run as matrix arithmetic over sample batches:

  A (|I| x F) one-hot rows picking each internal node's split feature
  b (|I|,)    split thresholds
  P (|L| x |I|) +1 where the leaf sits in the left subtree of an
              ancestor, -1 for the right subtree, 0 for non-ancestors
  c (|L|,)    minus the number of left-branch ancestors of the leaf

With decisions s = 1[x < b], the score (P s + c)[l] counts matched
ancestor decisions minus the leaf's depth, so it is <= 0 everywhere and
equals 0 exactly at the leaf the sample reaches; argmax is unique for
every decision vector. U (|L| x F) flags the features on each
root-to-leaf path and accumulates into the access-frequency matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FeatureCountMismatch
from .gbdt import DecisionTree, GbdtModel

_CHUNK = 16384


@dataclass
class TreeRouting:
    A: np.ndarray
    b: np.ndarray
    P: np.ndarray
    c: np.ndarray
    U: np.ndarray
    leaf_node_ids: np.ndarray
    internal_node_ids: np.ndarray

    @property
    def n_internal(self) -> int:
        return self.A.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.U.shape[0]


@dataclass
class RoutingMatrices:
    per_tree: list[TreeRouting]
    n_trees: int
    n_features: int


def compile_tree(tree: DecisionTree, n_features: int) -> TreeRouting:
    internal = tree.internal_ids()
    leaves = tree.leaf_ids()
    pos_of_internal = {int(n): i for i, n in enumerate(internal)}
    n_i, n_l = len(internal), len(leaves)

    A = np.zeros((n_i, n_features), dtype=np.float64)
    b = np.zeros(n_i, dtype=np.float64)
    for i, node in enumerate(internal):
        A[i, tree.feature_index[node]] = 1.0
        b[i] = tree.threshold[node]

    P = np.zeros((n_l, n_i), dtype=np.float64)
    c = np.zeros(n_l, dtype=np.float64)
    U = np.zeros((n_l, n_features), dtype=np.float32)
    pos_of_leaf = {int(n): i for i, n in enumerate(leaves)}

    # depth-first walk carrying the ancestor decisions taken so far
    stack = [(0, [])]
    while stack:
        node, path = stack.pop()
        if tree.feature_index[node] < 0:
            l = pos_of_leaf[int(node)]
            for ipos, went_left in path:
                P[l, ipos] = 1.0 if went_left else -1.0
                if went_left:
                    c[l] -= 1.0
                U[l, int(np.argmax(A[ipos]))] = 1.0
            continue
        ipos = pos_of_internal[int(node)]
        stack.append((int(tree.left[node]), path + [(ipos, True)]))
        stack.append((int(tree.right[node]), path + [(ipos, False)]))
    return TreeRouting(
        A=A, b=b, P=P, c=c, U=U,
        leaf_node_ids=leaves.astype(np.int64),
        internal_node_ids=internal.astype(np.int64),
    )


def compile_model(model: GbdtModel) -> RoutingMatrices:
    per_tree = [compile_tree(t, model.n_features) for t in model.trees]
    return RoutingMatrices(per_tree=per_tree, n_trees=len(per_tree), n_features=model.n_features)


def select_leaves(tr: TreeRouting, X: np.ndarray) -> np.ndarray:
    """Leaf position per row via the compiled matrices."""
    if tr.n_internal == 0:
        return np.zeros(X.shape[0], dtype=np.int64)
    s = (X @ tr.A.T < tr.b).astype(np.float64)
    scores = s @ tr.P.T + tr.c
    return np.argmax(scores, axis=1)


def batch_frequency(rm: RoutingMatrices, X: np.ndarray) -> np.ndarray:
    """Per-sample count of trees accessing each feature, summed over trees."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != rm.n_features:
        raise FeatureCountMismatch(
            f"routing matrices built for {rm.n_features} features, got {X.shape[1]}"
        )
    n = X.shape[0]
    alpha = np.zeros((n, rm.n_features), dtype=np.float32)
    for start in range(0, n, _CHUNK):
        chunk = X[start : start + _CHUNK]
        acc = alpha[start : start + _CHUNK]
        for tr in rm.per_tree:
            if tr.n_internal == 0:
                continue
            leaf_pos = select_leaves(tr, chunk)
            acc += tr.U[leaf_pos]
    return alpha


def normalize_frequency(alpha: np.ndarray, n_trees: int) -> np.ndarray:
    return (alpha / np.float32(n_trees)).astype(np.float32)


class FrequencyCache:
    """Write-once store of normalized frequency rows per named split.

    Rows are computed at most once per split name and returned read-only;
    compute_calls counts actual frequency computations so callers can
    assert the cache is hit after the first epoch.
    """

    def __init__(self) -> None:
        self._rows: dict[str, np.ndarray] = {}
        self.compute_calls = 0

    def has(self, name: str) -> bool:
        return name in self._rows

    def get(self, name: str) -> np.ndarray:
        return self._rows[name]

    def put(self, name: str, alpha_hat: np.ndarray) -> np.ndarray:
        if name in self._rows:
            return self._rows[name]
        alpha_hat = np.ascontiguousarray(alpha_hat, dtype=np.float32)
        alpha_hat.setflags(write=False)
        self._rows[name] = alpha_hat
        return alpha_hat

    def get_or_build(self, name: str, X: np.ndarray, rm: RoutingMatrices) -> np.ndarray:
        if name not in self._rows:
            self.compute_calls += 1
            alpha = batch_frequency(rm, X)
            self.put(name, normalize_frequency(alpha, rm.n_trees))
        return self._rows[name]

    def state_fingerprint(self) -> dict:
        return {k: v.tobytes() for k, v in sorted(self._rows.items())}


def normalize_and_cache(
    alpha: np.ndarray, n_trees: int, cache: FrequencyCache, name: str
) -> np.ndarray:
    """Normalizes raw counts and stores the rows under the split name."""
    return cache.put(name, normalize_frequency(alpha, n_trees))
