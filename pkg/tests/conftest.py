"""Shared builders for synthetic datasets used across test files."""

import numpy as np

from tmlp import model as M
from tmlp.data import Dataset, FeatureSchema, fit_transform, split, transform


def make_binary_data(n=320, seed=0, separable=True):
    """Two numerical features; label is the sign of a fixed linear margin."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 2))
    margin = x[:, 0] + 2.0 * x[:, 1]
    if separable:
        keep = np.abs(margin) > 0.3
        x = x[keep]
        margin = margin[keep]
    labels = np.where(margin > 0, "pos", "neg")
    schema = FeatureSchema(
        target="label", task="binclass", numerical=("a", "b"), categorical=()
    )
    raw = Dataset(
        x_num=x, x_cat=np.zeros((len(x), 0), dtype=str),
        y=labels.astype(str), schema=schema,
    )
    return split(raw, (0.7, 0.15, 0.15), seed=1)


def make_regression_data(n=300, seed=0, noise=0.1):
    """Three numerical features; target is a noisy linear combination."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 3))
    y = 1.5 * x[:, 0] - 0.5 * x[:, 1] + noise * r.normal(size=n) + 2.0
    schema = FeatureSchema(
        target="y", task="regression", numerical=("a", "b", "c"), categorical=()
    )
    raw = Dataset(
        x_num=x, x_cat=np.zeros((n, 0), dtype=str), y=y, schema=schema
    )
    return split(raw, (0.7, 0.15, 0.15), seed=1)


def pipeline(raw_train, raw_valid):
    """Fit the preprocessor on the first split, transform both."""
    prep, train_t = fit_transform(raw_train, raw_train.schema)
    valid_t = transform(prep, raw_valid)
    return prep, train_t, valid_t


def fd_sweep(params, cfg, task, x_num, x_cat, y, alpha, floor=1e-5):
    """Worst relative error between analytic and central-difference gradients
    over every trainable parameter, including the sparsity gates."""

    def loss():
        return M.loss_and_grads(params, cfg, task, x_num, x_cat, y, alpha, "fd")[0]

    _, _, grads, gate_grads, _ = M.loss_and_grads(
        params, cfg, task, x_num, x_cat, y, alpha, "fd"
    )
    allp = dict(M.model_param_dict(params))
    allg = dict(grads)
    if gate_grads is not None:
        allp.update(M.gate_param_dict(params.gates))
        allg.update(gate_grads)
    h = 1e-6
    worst = 0.0
    for name, arr in allp.items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = arr[ix]
            arr[ix] = old + h
            lp = loss()
            arr[ix] = old - h
            lm = loss()
            arr[ix] = old
            fd = (lp - lm) / (2 * h)
            an = allg[name][ix]
            rel = abs(fd - an) / max(abs(fd), abs(an), floor)
            worst = max(worst, rel)
    return worst
