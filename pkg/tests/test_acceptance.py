"""End-to-end acceptance checks for the full pipeline.

One test per criterion, in order. Each prints a single summary line
("criterion N: PASS/FAIL (details)"); run with -s to see them live. The
expensive artifacts (the 20-feature synthetic, its tree gate, the
default-configuration training run, California Housing) are module-scoped
fixtures shared across criteria.
"""

import gzip
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import fd_sweep, make_binary_data, pipeline
from test_gbdt import random_tree

from tmlp import bundle as B
from tmlp import gbdt, nn, routing
from tmlp import model as M
from tmlp.data import (
    Dataset,
    FeatureSchema,
    feature_matrix,
    fit_transform,
    load_csv,
    split,
    transform,
)
from tmlp.ensemble import predict_ensemble, train_ensemble
from tmlp.gbdt import GbdtConfig
from tmlp.metrics import rmse

CA_GZ = "tests/data/california_housing.csv.gz"
CA_FEATURES = (
    "MedInc", "HouseAge", "AveRooms", "AveBedrms",
    "Population", "AveOccup", "Latitude", "Longitude",
)


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n}: {detail}"


def make_gate_dataset(n=5000, n_features=20, seed=11):
    """Twenty numerical columns; the label depends on exactly the first 3."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, n_features))
    margin = x[:, 0] * x[:, 1] + 1.5 * np.sin(2.0 * x[:, 2]) + 0.5 * x[:, 0]
    labels = np.where(margin > 0.0, "pos", "neg")
    names = tuple(f"f{j}" for j in range(n_features))
    schema = FeatureSchema(
        target="label", task="binclass", numerical=names, categorical=()
    )
    raw = Dataset(
        x_num=x, x_cat=np.zeros((n, 0), dtype=str),
        y=labels.astype(str), schema=schema,
    )
    return split(raw, (0.8, 0.1, 0.1), seed=5)


@pytest.fixture(scope="module")
def gate_data():
    raw_tr, raw_va, raw_te = make_gate_dataset()
    prep, tr = fit_transform(raw_tr, raw_tr.schema)
    return SimpleNamespace(
        raw_tr=raw_tr, raw_va=raw_va, raw_te=raw_te,
        prep=prep, tr=tr, va=transform(prep, raw_va), te=transform(prep, raw_te),
    )


@pytest.fixture(scope="module")
def gate_artifacts(gate_data):
    return M.build_gate_artifacts(gate_data.tr, M.TrainConfig())


@pytest.fixture(scope="module")
def default_run(gate_data, gate_artifacts):
    cfg = M.TrainConfig()
    t0 = time.perf_counter()
    result = M.train(gate_data.tr, gate_data.va, gate_artifacts, cfg, gate_data.prep)
    deliverable = M.export_pruned(result.model)
    return SimpleNamespace(
        cfg=cfg, result=result, deliverable=deliverable,
        wall=time.perf_counter() - t0,
    )


@pytest.fixture(scope="module")
def california(tmp_path_factory):
    path = tmp_path_factory.mktemp("ca") / "california_housing.csv"
    with gzip.open(CA_GZ, "rt") as f:
        path.write_text(f.read())
    schema = FeatureSchema(
        target="MedHouseVal", task="regression",
        numerical=CA_FEATURES, categorical=(),
    )
    raw = load_csv(str(path), schema)
    raw_tr, raw_va, raw_te = split(raw, (0.8, 0.1, 0.1), seed=0)
    prep, tr = fit_transform(raw_tr, schema)
    return SimpleNamespace(
        raw_te=raw_te, prep=prep, tr=tr,
        va=transform(prep, raw_va), te=transform(prep, raw_te),
    )


def test_criterion_1_tree_compilation_oracle():
    t0 = time.perf_counter()
    r = np.random.Generator(np.random.Philox(101))
    n_trees, n_samples, f = 60, 1000, 12
    x = r.normal(size=(n_samples, f))
    trees = [random_tree(r, n_features=f, depth=6) for _ in range(n_trees)]
    model = gbdt.GbdtModel(
        trees=trees, base_score=np.float64(0.0), task="regression",
        n_classes=0, n_features=f, config=GbdtConfig(),
    )
    alpha = routing.batch_frequency(routing.compile_model(model), x)

    counts = np.zeros((n_samples, f), dtype=np.int64)
    leaves_ok = True
    for tree in trees:
        tr = routing.compile_tree(tree, f)
        pos = routing.select_leaves(tr, x)
        for i in range(n_samples):
            node, visited = gbdt.traverse_leaf(tree, x[i])
            leaves_ok &= int(tr.leaf_node_ids[pos[i]]) == node
            for v in visited:
                counts[i, v] += 1
    freq_ok = np.array_equal(np.asarray(alpha, dtype=np.float64),
                             counts.astype(np.float64))
    dt = time.perf_counter() - t0
    ok = leaves_ok and freq_ok and dt < 30.0
    report(1, ok, f"{n_trees} trees x {n_samples} samples, exact match, {dt:.1f}s")


def test_criterion_2_full_model_gradients():
    t0 = time.perf_counter()
    cfg = M.TrainConfig(d=8, d_prime=6, n_blocks=1)
    params = M.init_params(
        f1=3, cardinalities=(3, 2), n_tokens=6, n_blocks=1, out_dim=2,
        cfg=cfg, rng=nn.RngStream(7, M.STREAM_INIT), dtype=np.float64,
    )
    gs = nn.RngStream(8, 42)
    params.gates.log_alpha_h = gs.normal(0.0, 0.5, size=8)
    params.gates.log_alpha_in = gs.normal(0.0, 0.5, size=6)
    params.gates.lam1, params.gates.lam2 = 0.6, 1.1
    r = np.random.default_rng(21)
    x_num = r.normal(size=(3, 3))
    x_cat = np.stack([r.integers(0, 3, size=3), r.integers(0, 2, size=3)], axis=1)
    y = r.integers(0, 2, size=3)
    alpha = r.uniform(0.1, 1.0, size=(3, 5))
    worst = fd_sweep(params, cfg, "binclass", x_num, x_cat, y, alpha)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 120.0
    report(2, ok, f"worst relative error {worst:.2e} over every parameter, {dt:.1f}s")


def test_criterion_3_sparsity_target(default_run):
    m = default_run.result.model
    g = m.params.gates
    s_hat = M.expected_sparsity(g, m.params.d, len(g.log_alpha_in))
    blk = default_run.deliverable.params.blocks[0]
    k_h = round(0.33 * default_run.cfg.d)
    k_in = round(0.33 * default_run.cfg.d_prime)
    shapes_ok = (
        blk.w1.shape == (k_h, 2 * k_in)
        and blk.w2.shape == (k_in, default_run.cfg.d)
    )
    ok = 0.30 <= s_hat <= 0.36 and shapes_ok
    report(3, ok, f"s_hat={s_hat:.4f}, W1 {blk.w1.shape}, W2 {blk.w2.shape}, "
                  f"{default_run.result.epochs_run} epochs in {default_run.wall:.0f}s")


def test_criterion_4_pruned_export_equivalence(default_run):
    r = np.random.default_rng(77)
    x_num = r.normal(size=(1000, 20))
    x_cat = np.zeros((1000, 0), dtype=np.int64)
    alpha = r.uniform(0.0, 1.0, size=(1000, 20))
    cfg = default_run.cfg
    masked = M.predict_arrays(
        default_run.result.model.params, cfg, "binclass", x_num, x_cat, alpha,
        structural=False,
    )
    sliced = M.predict_arrays(
        default_run.deliverable.params, cfg, "binclass", x_num, x_cat, alpha
    )
    gap = float(np.abs(masked - sliced).max())
    ok = gap <= 1e-5
    report(4, ok, f"masked vs sliced max abs diff {gap:.2e} on 1000 inputs")


def test_criterion_5_feature_gate_selectivity(gate_data, gate_artifacts):
    alpha = gate_artifacts.cache.get_or_build(
        "train", feature_matrix(gate_data.tr), gate_artifacts.routing
    )
    mass = float(alpha[:, :3].sum() / alpha.sum())
    ok = mass >= 0.60
    report(5, ok, f"informative columns carry {mass:.1%} of frequency mass")


def test_criterion_6_ablation_ordering(gate_data, gate_artifacts):
    t0 = time.perf_counter()
    base = dict(d=128, d_prime=84, max_epochs=100, patience=16)
    full_scores, ablated_scores = [], []
    for seed in range(5):
        cfg_full = M.TrainConfig(seed=seed, **base)
        res = M.train(gate_data.tr, gate_data.va, gate_artifacts, cfg_full,
                      gate_data.prep)
        model = M.export_pruned(res.model)
        probs = model.predict_dataset(gate_data.te)
        full_scores.append(
            float(np.mean(model.predict_labels(probs) == gate_data.raw_te.y))
        )
        cfg_abl = M.TrainConfig(
            seed=seed, gate_enabled=False, sparsity_enabled=False, **base
        )
        res = M.train(gate_data.tr, gate_data.va, None, cfg_abl, gate_data.prep)
        probs = res.model.predict_dataset(gate_data.te)
        ablated_scores.append(
            float(np.mean(res.model.predict_labels(probs) == gate_data.raw_te.y))
        )
    med_full = float(np.median(full_scores))
    med_abl = float(np.median(ablated_scores))
    ok = med_full >= med_abl
    report(6, ok, f"median over 5 seeds: full {med_full:.4f} vs "
                  f"no-gate/no-sparsity {med_abl:.4f}, {time.perf_counter() - t0:.0f}s")


def test_criterion_7_ensemble_contract(monkeypatch):
    # agreement: ensemble output is the mean of branch probabilities
    raw_tr, raw_va, raw_te = make_binary_data(n=400)
    prep, tr, va = pipeline(raw_tr, raw_va)
    te = transform(prep, raw_te)
    cfg = M.TrainConfig(
        d=32, d_prime=22, n_blocks=1, batch_size=64, max_epochs=5, patience=5,
        learning_rate=2e-3, sparsity_enabled=False,
        gbdt=GbdtConfig(n_rounds=10, max_depth=3),
    )
    monkeypatch.setenv("TMLP_THREADS", "1")
    bundle = train_ensemble(tr, va, cfg, prep)
    ens = predict_ensemble(bundle, te)
    stack = np.stack([br.predict_dataset(te) for br in bundle.branches])
    manual = np.mean(stack, axis=0, dtype=np.float64)
    gap = float(np.abs(ens - manual).max())

    # wall time: three workers vs the slowest solo branch
    r = np.random.default_rng(3)
    n = 3000
    x = r.normal(size=(n, 5))
    y = x @ np.array([1.0, -2.0, 0.5, 1.5, -1.0]) + 0.1 * r.normal(size=n)
    schema = FeatureSchema(
        target="y", task="regression",
        numerical=tuple(f"f{j}" for j in range(5)), categorical=(),
    )
    raw = Dataset(x_num=x, x_cat=np.zeros((n, 0), dtype=str), y=y, schema=schema)
    raw_tr2, raw_va2, _ = split(raw, (0.8, 0.1, 0.1), seed=2)
    prep2, tr2, va2 = pipeline(raw_tr2, raw_va2)
    cfg2 = M.TrainConfig(
        d=128, d_prime=84, n_blocks=1, batch_size=256, max_epochs=50,
        patience=3, learning_rate=1e-4,
        gate_enabled=False, sparsity_enabled=False,
    )
    rates = (1e-4, 0.5, 0.5)
    snapshot = M.init_params(
        f1=5, cardinalities=(), n_tokens=6,
        n_blocks=1, out_dim=1, cfg=cfg2, rng=nn.RngStream(cfg2.seed, M.STREAM_INIT),
    )
    solo = []
    for b, rate in enumerate(rates):
        t0 = time.perf_counter()
        M.train(tr2, va2, None, cfg2, prep2, init=snapshot,
                stream_offset=16 * b, learning_rate=rate)
        solo.append(time.perf_counter() - t0)
    monkeypatch.setenv("TMLP_THREADS", "3")
    t0 = time.perf_counter()
    train_ensemble(tr2, va2, cfg2, prep2, lrs=rates)
    wall = time.perf_counter() - t0
    bound = 1.5 * max(solo)
    ok = gap <= 1e-7 and wall <= bound
    report(7, ok, f"mean diff {gap:.1e}; 3-worker wall {wall:.1f}s vs "
                  f"1.5 x slowest solo {bound:.1f}s")


def test_criterion_8_california_housing(california):
    t0 = time.perf_counter()
    cfg = M.TrainConfig()
    deliverable, result, _ = M.fit_tmlp(california.tr, california.va, cfg,
                                        california.prep)
    wall = time.perf_counter() - t0
    pred = deliverable.predict_dataset(california.te)
    test_rmse = rmse(np.asarray(california.raw_te.y, dtype=np.float64),
                     np.asarray(pred))
    ok = test_rmse <= 0.52 and wall < 900.0
    report(8, ok, f"test RMSE {test_rmse:.4f}, {result.epochs_run} epochs, "
                  f"{wall / 60:.1f} min")


def test_criterion_9_determinism_and_persistence(tmp_path):
    raw_tr, raw_va, raw_te = make_binary_data(n=400, separable=False)
    prep, tr, va = pipeline(raw_tr, raw_va)
    te = transform(prep, raw_te)
    cfg = M.TrainConfig(
        d=32, d_prime=22, n_blocks=1, batch_size=64, max_epochs=6, patience=6,
        learning_rate=2e-3, admission_band=1.0,
        gbdt=GbdtConfig(n_rounds=8, max_depth=3),
    )
    runs = []
    for _ in range(2):
        deliverable, result, _ = M.fit_tmlp(tr, va, cfg, prep)
        runs.append((deliverable, result, deliverable.predict_dataset(te)))
    (m1, r1, p1), (m2, r2, p2) = runs
    metrics_ok = (
        r1.best_metric == r2.best_metric
        and [h["valid_metric"] for h in r1.history]
            == [h["valid_metric"] for h in r2.history]
        and np.array_equal(p1, p2)
    )
    path = str(tmp_path / "model.tmlp")
    B.save_model(path, m1)
    loaded = B.load_model(path)
    roundtrip_ok = np.array_equal(loaded.predict_dataset(te), p1)
    ok = metrics_ok and roundtrip_ok
    report(9, ok, f"two runs bitwise equal: {metrics_ok}; "
                  f"save/load/predict bitwise equal: {roundtrip_ok}")
