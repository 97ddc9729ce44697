"""Bagged training: several branches from one initialization, one shared gate.

Every branch starts from the same random parameter snapshot and trains
independently at its own learning rate with its own RNG streams, optimizer,
and early stopping. The tree-based feature gate and its frequency cache are
built once and only read afterwards, so branches can run as parallel worker
processes. Prediction averages the branch outputs.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset, Preprocessor, feature_matrix
from .errors import EmptyEnsemble
from .gbdt import GbdtModel
from .model import (
    STREAM_INIT,
    GateArtifacts,
    TmlpModel,
    TrainConfig,
    TrainResult,
    build_gate_artifacts,
    export_pruned,
    init_params,
    out_dim_for,
    train,
)
from .routing import FrequencyCache

DEFAULT_EXTRA_LRS = (5e-4, 1e-3)

# Branch b shifts every training RNG stream id by this much, keeping the
# per-purpose streams of different branches disjoint. Branch 0 keeps offset
# zero and therefore replays the single-model run exactly.
STREAM_SPACING = 16


@dataclass
class EnsembleBundle:
    """Shared feature gate plus independently trained branch models."""

    task: str
    gbdt: GbdtModel | None
    branches: list[TmlpModel]
    learning_rates: tuple[float, ...]
    results: list[TrainResult] | None = None

    @property
    def k(self) -> int:
        return len(self.branches)


def branch_learning_rates(cfg: TrainConfig, k: int = 3) -> tuple[float, ...]:
    """Default branch schedule: the single-model rate first, then faster ones."""
    return (cfg.learning_rate,) + DEFAULT_EXTRA_LRS[: k - 1]


def worker_count(k: int) -> int:
    """Workers to launch for k branches, capped by TMLP_THREADS."""
    cap = os.environ.get("TMLP_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(k, limit))


def _train_branch(
    train_ds: Dataset,
    valid_ds: Dataset,
    gate: GateArtifacts | None,
    cfg: TrainConfig,
    prep: Preprocessor,
    init,
    offset: int,
    lr: float,
):
    result = train(
        train_ds, valid_ds, gate, cfg, prep,
        init=init, stream_offset=offset, learning_rate=lr,
    )
    return export_pruned(result.model), result


def train_ensemble(
    train_ds: Dataset,
    valid_ds: Dataset,
    cfg: TrainConfig,
    prep: Preprocessor,
    lrs: tuple[float, ...] | None = None,
    gate: GateArtifacts | None = None,
) -> EnsembleBundle:
    """Trains one branch per learning rate from a shared snapshot.

    The gate trees, routing matrices, and both cached frequency tables are
    produced up front; branch workers only read them. With more than one
    worker available the branches run in forked processes. Callers may hand
    in already built gate artifacts; otherwise they are created here when the
    config enables the gate.
    """
    rates = branch_learning_rates(cfg) if lrs is None else tuple(float(x) for x in lrs)
    if not rates:
        raise EmptyEnsemble("need at least one branch learning rate")

    if gate is None and cfg.gate_enabled:
        gate = build_gate_artifacts(train_ds, cfg)
    if gate is not None:
        gate.cache.get_or_build("train", feature_matrix(train_ds), gate.routing)
        gate.cache.get_or_build("valid", feature_matrix(valid_ds), gate.routing)

    init = init_params(
        train_ds.schema.f1, prep.cardinalities(), 1 + train_ds.n_features,
        cfg.resolved_blocks(train_ds.task), out_dim_for(train_ds.task, prep),
        cfg, nn.RngStream(cfg.seed, STREAM_INIT),
    )

    jobs = [(STREAM_SPACING * b, rate) for b, rate in enumerate(rates)]
    if worker_count(len(rates)) > 1:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=worker_count(len(rates)), mp_context=ctx) as pool:
            futures = [
                pool.submit(_train_branch, train_ds, valid_ds, gate, cfg, prep, init, off, rate)
                for off, rate in jobs
            ]
            pairs = [f.result() for f in futures]
    else:
        pairs = [
            _train_branch(train_ds, valid_ds, gate, cfg, prep, init, off, rate)
            for off, rate in jobs
        ]

    return EnsembleBundle(
        task=train_ds.task,
        gbdt=gate.gbdt if gate is not None else None,
        branches=[p[0] for p in pairs],
        learning_rates=rates,
        results=[p[1] for p in pairs],
    )


def predict_ensemble(bundle: EnsembleBundle, ds: Dataset) -> np.ndarray:
    """Elementwise mean of branch outputs.

    Classification: mean of the branch class-probability vectors, shape
    (N, C). Regression: mean of the original-unit branch values, shape (N,).
    Frequencies are computed once and shared across branches.
    """
    if not bundle.branches:
        raise EmptyEnsemble("bundle holds no branch models")
    cache = FrequencyCache()
    outs = [b.predict_dataset(ds, cache, "predict") for b in bundle.branches]
    return np.mean(np.stack(outs, axis=0), axis=0, dtype=np.float64)


def predict_ensemble_labels(bundle: EnsembleBundle, ds: Dataset) -> np.ndarray:
    """Argmax of the averaged probabilities, mapped back to label strings."""
    return bundle.branches[0].predict_labels(predict_ensemble(bundle, ds))
