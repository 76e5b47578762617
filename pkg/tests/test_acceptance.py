"""End-to-end acceptance gates for the laboratory.

Nine numbered criteria, one test per criterion, each printing a single
[PASS]/[FAIL] line with the measured quantities (run pytest with -s to see
the lines for passing tests; failing tests carry the same line in the
assertion message). Criteria 5, 6 and 8 share one trend experiment: a
default-size backbone pretrained on masked-node prediction, then a matrix
of fine-tuning arms over six seeds on the triangle-detection task. The
experiment is fully seeded, so two invocations of this file produce the
same numbers.
"""

import dataclasses
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from oracles import ap_bruteforce, auc_pairwise, floyd_warshall, kron_direct, random_graph_edges, s2_dense

from gadapter_lab import tensor as T
from gadapter_lab.cli import main
from gadapter_lab.data import GraphDataset, gen_data, split
from gadapter_lab.diagnostics import (
    build_histogram,
    extract_features,
    js_divergence,
    save_checkpoint,
    shared_edges,
)
from gadapter_lab.graphs import Graph, all_pairs_shortest_paths, build_structure
from gadapter_lab.model import Model, ModelConfig, pretrain_masked_nodes
from gadapter_lab.peft import PeftSpec, compacter_weight, instrument, trainable_ratio
from gadapter_lab.tensor import Tape, Tensor, backward, finite_difference_check
from gadapter_lab.training import (
    TrainConfig,
    adamw_step,
    ap_score,
    auc_score,
    bregman_divergence,
    evaluate,
    fit,
    init_train_state,
    vanilla_loss,
)

FD_GATE = 1e-4
EXACT = 0.0
TIGHT = 1e-12


def check(num: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# Criterion 1: finite-difference gradient checks for every op and for
# end-to-end losses through the adapter blocks.


OPS = (
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "sum_all",
    "mean_all",
    "matmul",
    "reshape",
    "transpose",
    "add_rowvec",
    "gather_rows",
    "take_index",
    "scale_heads",
    "kron",
)

E2E_SPECS = (
    PeftSpec(method="gadapter", r=2, structure="S1"),
    PeftSpec(method="adapter", r=2),
    PeftSpec(method="adapter_s", r=2, structure="S2"),
    PeftSpec(method="lora", r=2, lora_scale=2.0),
    PeftSpec(method="lora_s", r=2, structure="S1"),
    PeftSpec(method="hyperformer", r=2, hyper_t=2),
    PeftSpec(method="compacter", r=2, compacter_n=2),
)


def _op_trial(name: str, trial: int, rng: np.random.Generator) -> float:
    """One gradient check of one op at a random shape; returns the error."""
    m = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    leaf = lambda data: Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    def dot(t: Tensor, w: np.ndarray) -> Tensor:
        return T.sum_all(T.mul(t, Tensor(w)))

    if name in ("add", "sub", "mul"):
        op = getattr(T, name)
        a, b = leaf(rng.normal(size=(m, d))), leaf(rng.normal(size=(m, d)))
        w = rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(op(ps[0], ps[1]), w), [a, b])
    if name == "relu":
        x = rng.normal(size=(m, d))
        x = x + np.where(x >= 0.0, 0.2, -0.2)  # clear the kink at 0
        p, w = leaf(x), rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(T.relu(ps[0]), w), [p])
    if name == "sigmoid":
        p, w = leaf(rng.normal(size=(m, d))), rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(T.sigmoid(ps[0]), w), [p])
    if name == "exp":
        p, w = leaf(rng.uniform(-2.0, 2.0, size=(m, d))), rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(T.exp(ps[0]), w), [p])
    if name == "log":
        p, w = leaf(rng.uniform(0.5, 3.0, size=(m, d))), rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(T.log(ps[0]), w), [p])
    if name == "clip":
        x = rng.uniform(-1.4, 1.4, size=(m, d))
        near = np.abs(np.abs(x) - 0.7) < 0.05  # clear both clamp kinks
        x = x + near * np.sign(x) * 0.1
        p, w = leaf(x), rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(T.clip(ps[0], -0.7, 0.7), w), [p])
    if name in ("softmax_rows", "log_softmax_rows"):
        op = getattr(T, name)
        p, w = leaf(rng.normal(size=(m, d))), rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(op(ps[0]), w), [p])
    if name == "layer_norm":
        x = leaf(rng.normal(size=(m, d)))
        g = leaf(rng.uniform(0.5, 1.5, size=(d,)))
        b = leaf(rng.normal(size=(d,)))
        w = rng.normal(size=(m, d))
        return finite_difference_check(lambda ps: dot(T.layer_norm(ps[0], ps[1], ps[2]), w), [x, g, b])
    if name == "sum_all":
        p = leaf(rng.normal(size=(m, d)))
        return finite_difference_check(lambda ps: T.sum_all(ps[0]), [p])
    if name == "mean_all":
        p = leaf(rng.normal(size=(m, d)))
        return finite_difference_check(lambda ps: T.mean_all(ps[0]), [p])
    if name == "matmul":
        k = int(rng.integers(2, 9))
        mode = trial % 3
        if mode == 0:
            a, b, w = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, d))), rng.normal(size=(m, d))
        elif mode == 1:
            a, b, w = leaf(rng.normal(size=(2, m, k))), leaf(rng.normal(size=(k, d))), rng.normal(size=(2, m, d))
        else:
            a, b, w = leaf(rng.normal(size=(2, m, k))), leaf(rng.normal(size=(2, k, d))), rng.normal(size=(2, m, d))
        return finite_difference_check(lambda ps: dot(T.matmul(ps[0], ps[1]), w), [a, b])
    if name == "reshape":
        p, w = leaf(rng.normal(size=(m, d))), rng.normal(size=(m * d,))
        return finite_difference_check(lambda ps: dot(T.reshape(ps[0], (m * d,)), w), [p])
    if name == "transpose":
        axes = tuple(int(a) for a in rng.permutation(3))
        x = rng.normal(size=(2, m, d))
        p, w = leaf(x), rng.normal(size=x.transpose(axes).shape)
        return finite_difference_check(lambda ps: dot(T.transpose(ps[0], axes), w), [p])
    if name == "add_rowvec":
        x, v = leaf(rng.normal(size=(2, m, d))), leaf(rng.normal(size=(d,)))
        w = rng.normal(size=(2, m, d))
        return finite_difference_check(lambda ps: dot(T.add_rowvec(ps[0], ps[1]), w), [x, v])
    if name == "gather_rows":
        rows = int(rng.integers(3, 8))
        table = leaf(rng.normal(size=(rows, d)))
        ids = rng.integers(0, rows, size=(2, 4))
        w = rng.normal(size=(2, 4, d))
        return finite_difference_check(lambda ps: dot(T.gather_rows(ps[0], ids), w), [table])
    if name == "take_index":
        p = leaf(rng.normal(size=(2, m, d)))
        j = int(rng.integers(0, m))
        w = rng.normal(size=(2, d))
        return finite_difference_check(lambda ps: dot(T.take_index(ps[0], j, 1), w), [p])
    if name == "scale_heads":
        s = leaf(rng.normal(size=(2, m, m)))
        sc = leaf(rng.uniform(0.5, 1.5, size=(3,)))
        w = rng.normal(size=(2, 3, m, m))
        return finite_difference_check(lambda ps: dot(T.scale_heads(ps[0], ps[1]), w), [s, sc])
    if name == "kron":
        a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(2, 4)))
        w = rng.normal(size=(6, 8))
        return finite_difference_check(lambda ps: dot(T.kron(ps[0], ps[1]), w), [a, b])
    raise AssertionError(f"unhandled op {name}")


def _e2e_trial(spec: PeftSpec, trial: int, rng: np.random.Generator) -> float:
    """Gradient check of a full classification loss through one method."""
    d = int(rng.choice([8, 12, 16]))
    cfg = ModelConfig(num_layers=1, hidden=d, heads=2, ffn_dim=d, vocab=5, seed=300 + trial)
    graphs = gen_data("triangle_clf", 4, n_range=(4, 6), seed=400 + trial, vocab=5)
    s_kind = spec.structure if spec.uses_structure else None
    ds = GraphDataset(graphs, cfg, s_bias_kind="S1", s_peft_kind=s_kind)
    batch = ds.collate([0, 1])
    model = Model(cfg)
    instrument(model, spec)
    peft_names = [n for n in model.store.names() if n.startswith("peft.")]
    for nm in peft_names:  # move every branch off its zero init so all paths are live
        t = model.param(nm)
        t.data[:] = rng.normal(size=t.shape) * 0.3
    probes = [model.param(peft_names[trial % len(peft_names)]), model.param("head.proj")]

    def fn(params):
        return vanilla_loss(model.predict_batch(batch), batch.labels, batch.task)

    return finite_difference_check(fn, probes, h=1e-5)


def test_criterion_1_finite_difference_gradients():
    started = time.perf_counter()
    worst_op, worst_op_name = 0.0, "none"
    for name in OPS:
        rng = np.random.default_rng(abs(hash(name)) % (2**32))
        for trial in range(20):
            err = _op_trial(name, trial, rng)
            if err > worst_op:
                worst_op, worst_op_name = err, name
    worst_e2e, worst_e2e_name = 0.0, "none"
    for spec in E2E_SPECS:
        rng = np.random.default_rng(abs(hash(spec.method)) % (2**32))
        for trial in range(20):
            err = _e2e_trial(spec, trial, rng)
            if err > worst_e2e:
                worst_e2e, worst_e2e_name = err, spec.method
    elapsed = time.perf_counter() - started
    check(
        1,
        worst_op <= FD_GATE and worst_e2e <= FD_GATE and elapsed < 120.0,
        f"20 trials/op over {len(OPS)} ops, worst {worst_op:.2e} ({worst_op_name}); "
        f"20 trials/method over {len(E2E_SPECS)} methods end-to-end, worst {worst_e2e:.2e} "
        f"({worst_e2e_name}); gate {FD_GATE:.0e}; {elapsed:.1f}s (gate 120s)",
    )


# ---------------------------------------------------------------------------
# Criterion 2: independent oracles for shortest paths, AUC, AP, Kronecker
# products, and the normalized structure matrix (all from tests/oracles.py).


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2024)

    apsp_mismatches = 0
    for i in range(200):
        n = int(rng.integers(2, 13))
        edges = random_graph_edges(rng, n, float(rng.uniform(0.08, 0.5)))
        g = Graph(id=f"fw{i}", num_nodes=n, edges=edges, node_features=(0,) * n, label=0.0, task="clf")
        if not np.array_equal(all_pairs_shortest_paths(g), floyd_warshall(g.adjacency())):
            apsp_mismatches += 1

    auc_err = 0.0
    for _ in range(30):
        size = int(rng.integers(10, 60))
        scores = np.round(rng.normal(size=size) * 2.0, 1)  # one decimal forces ties
        labels = rng.integers(0, 2, size=size)
        labels[0], labels[1] = 0, 1
        auc_err = max(auc_err, abs(auc_score(scores, labels.astype(float)) - auc_pairwise(scores, labels)))

    ap_err = 0.0
    for _ in range(30):
        size = int(rng.integers(10, 60))
        scores = np.round(rng.normal(size=size) * 2.0, 1)
        labels = rng.integers(0, 2, size=size)
        labels[0], labels[1] = 1, 0
        ap_err = max(ap_err, abs(ap_score(scores, labels.astype(float)) - ap_bruteforce(scores, labels)))

    kron_err = 0.0
    for _ in range(10):
        a = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        b = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        kron_err = max(kron_err, np.abs(T.kron(Tensor(a), Tensor(b)).data - kron_direct(a, b)).max())
    for _ in range(10):
        a_f = [Tensor(rng.normal(size=(2, 2))) for _ in range(2)]
        b_f = [Tensor(rng.normal(size=(3, 4))) for _ in range(2)]
        direct = kron_direct(a_f[0].data, b_f[0].data) + kron_direct(a_f[1].data, b_f[1].data)
        kron_err = max(kron_err, np.abs(compacter_weight(a_f, b_f).data - direct).max())

    s2_err = 0.0
    for g in gen_data("triangle_clf", 30, n_range=(4, 12), seed=7, vocab=6):
        s2_err = max(s2_err, np.abs(build_structure(g, "S2").matrix.data - s2_dense(g.adjacency())).max())

    check(
        2,
        apsp_mismatches == 0 and auc_err == EXACT and ap_err <= TIGHT and kron_err <= TIGHT and s2_err <= TIGHT,
        f"APSP vs Floyd-Warshall 200 graphs, {apsp_mismatches} mismatches; AUC vs pairwise brute force "
        f"max |diff| {auc_err:.1e} (gate exact); AP vs threshold-sweep PR curve {ap_err:.1e}; "
        f"Kronecker vs elementwise {kron_err:.1e}; S2 vs dense normalization {s2_err:.1e} (gates 1e-12)",
    )


# ---------------------------------------------------------------------------
# Criterion 3: the proximal objective at mu = 0 degenerates to vanilla
# training, and the output divergence behaves at its anchor points.


def test_criterion_3_proximal_objective_degeneracy():
    cfg = ModelConfig(num_layers=2, hidden=16, heads=2, ffn_dim=16, vocab=8, seed=21)
    graphs = gen_data("triangle_clf", 120, n_range=(5, 9), seed=22, vocab=8)
    ds = GraphDataset(graphs, cfg, s_bias_kind="S1", s_peft_kind="S1")
    spec = PeftSpec(method="gadapter", r=2, structure="S1")
    tc = TrainConfig(lr=2e-3, batch_size=16, epochs=7, mu=0.0, seed=5)

    model_a = Model(cfg)
    mask_a = instrument(model_a, spec)
    fit(model_a, mask_a, ds, None, tc)

    # independent loop: same batching contract, vanilla loss only
    model_b = Model(cfg)
    mask_b = instrument(model_b, spec)
    model_b.store.apply_mask(set(mask_b.trainable))
    state = init_train_state(model_b.store)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=tc.seed, spawn_key=(0xF1,))))
    steps = 0
    for _ in range(tc.epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(order), tc.batch_size):
            idx = [int(i) for i in order[start : start + tc.batch_size]]
            batch = ds.collate(idx)
            with Tape() as tape:
                loss = vanilla_loss(model_b.predict_batch(batch), batch.labels, batch.task)
            grads = backward(loss, tape)
            adamw_step(state, grads, tc)
            steps += 1

    diff_params = sum(
        0 if np.array_equal(model_a.param(n).data, model_b.param(n).data) else 1 for n in model_a.store.names()
    )

    preds = np.array([0.2, 0.5, 0.9])
    breg_clf = bregman_divergence(Tensor(preds), Tensor(preds.copy()), "clf").item()
    breg_reg = bregman_divergence(Tensor(preds), Tensor(preds.copy()), "reg").item()
    anchor = bregman_divergence(Tensor(np.array([0.75])), Tensor(np.array([0.25])), "clf").item()
    anchor_err = abs(anchor - math.log(3.0))

    check(
        3,
        steps >= 50 and diff_params == 0 and breg_clf == 0.0 and breg_reg == 0.0 and anchor_err <= TIGHT,
        f"mu=0 vs vanilla loop over {steps} steps: {diff_params} of "
        f"{len(model_a.store.names())} tensors differ (gate 0, bitwise); divergence(theta, theta) "
        f"clf {breg_clf!r} reg {breg_reg!r} (gate exact 0.0); symmetric KL at (0.75, 0.25) "
        f"off ln 3 by {anchor_err:.1e} (gate 1e-12)",
    )


# ---------------------------------------------------------------------------
# Criterion 4: frozen parameters never move, and instrumented models match
# the backbone (or its LN-composed form) at step 0.


SPECS_ALL = (
    PeftSpec(method="gadapter", r=2, structure="S1"),
    PeftSpec(method="adapter", r=2),
    PeftSpec(method="adapter_s", r=2, structure="S2"),
    PeftSpec(method="lora", r=2, lora_scale=2.0),
    PeftSpec(method="lora_s", r=2, structure="S1"),
    PeftSpec(method="bitfit"),
    PeftSpec(method="hyperformer", r=2, hyper_t=2),
    PeftSpec(method="compacter", r=4, compacter_n=2),
    PeftSpec(method="mam", r=2, lora_scale=2.0),
    PeftSpec(method="full"),
)


def test_criterion_4_freeze_and_step0_invariants():
    cfg = ModelConfig(num_layers=2, hidden=8, heads=2, ffn_dim=8, vocab=4, seed=31)
    graphs = gen_data("triangle_clf", 48, n_range=(4, 7), seed=32, vocab=4)
    ds = GraphDataset(graphs, cfg, s_bias_kind="S1", s_peft_kind="S1")
    batch = ds.collate(list(range(8)))
    tc = TrainConfig(lr=5e-3, batch_size=16, epochs=1, mu=0.1, seed=3)
    backbone_out = Model(cfg).predict_batch(batch).data

    frozen_moved: list[str] = []
    step0_broken: list[str] = []
    for spec in SPECS_ALL:
        model = Model(cfg)
        before = model.store.snapshot()
        mask = instrument(model, spec)
        if spec.method != "gadapter":
            if not np.array_equal(model.predict_batch(batch).data, backbone_out):
                step0_broken.append(spec.method)
        fit(model, mask, ds, None, tc)
        for name in model.store.names():
            if name not in mask and not np.array_equal(model.param(name).data, before[name]):
                frozen_moved.append(f"{spec.method}:{name}")

    # the structure-aware block at step 0 equals the backbone composed with
    # its two LayerNorms (up-projection starts at a vanishing scale)
    gad = Model(cfg)
    instrument(gad, PeftSpec(method="gadapter", r=2, structure="S1"))
    composed = Model(cfg)
    ones_g = Tensor(np.ones(cfg.hidden))
    zeros_b = Tensor(np.zeros(cfg.hidden))

    def double_ln(x, ctx):
        inner = T.layer_norm(x, ones_g, zeros_b, eps=cfg.ln_eps)
        return T.layer_norm(inner, ones_g, zeros_b, eps=cfg.ln_eps)

    for i in range(cfg.num_layers):
        composed.hooks[(i, "mid_ffn")] = double_ln
    ln_gap = float(np.abs(gad.predict_batch(batch).data - composed.predict_batch(batch).data).max())

    check(
        4,
        not frozen_moved and not step0_broken and ln_gap <= 1e-10,
        f"{len(SPECS_ALL)} methods fine-tuned: frozen tensors moved {frozen_moved or 'none'}; "
        f"step-0 output mismatches {step0_broken or 'none'} (gate exact); structure-aware block vs "
        f"LN-composed backbone max |diff| {ln_gap:.1e} (gate 1e-10)",
    )


# ---------------------------------------------------------------------------
# Shared trend experiment for criteria 5, 6 and 8.


TREND_SEEDS = (0, 1, 2, 3, 4, 5)
TREND_TRAIN = TrainConfig(lr=3e-3, batch_size=64, epochs=8, mu=0.1, seed=0, eval_metric="auc")
TREND_ARMS = {
    "gadapter_s1": (PeftSpec(method="gadapter", r=4, structure="S1"), 0.1),
    "gadapter_nos": (PeftSpec(method="gadapter", r=4, structure="S1", no_S=True), 0.1),
    "bitfit": (PeftSpec(method="bitfit"), 0.1),
    "gadapter_mu0": (PeftSpec(method="gadapter", r=4, structure="S1"), 0.0),
    "full": (PeftSpec(method="full"), 0.0),
    "adapter": (PeftSpec(method="adapter", r=16), 0.1),
}
KEEP_MODELS = ("gadapter_s1", "full", "adapter")


@pytest.fixture(scope="session")
def trend_lab():
    base_cfg = ModelConfig(head_type="masked_node")
    graphs = gen_data("triangle_clf", 2500, seed=11)
    train_g, val_g, test_g = split(graphs, ratios=(0.8, 0.1, 0.1), seed=12)

    t0 = time.perf_counter()
    backbone = Model(base_cfg)
    snapshot, _ = pretrain_masked_nodes(
        backbone, GraphDataset(train_g, base_cfg, s_bias_kind="S1"), TrainConfig(lr=1e-3, batch_size=64, epochs=30, seed=13)
    )
    pretrain_seconds = time.perf_counter() - t0

    clf_cfg = replace(base_cfg, head_type="binary_classification")
    ds_cache: dict[str | None, tuple] = {}

    def datasets(spec: PeftSpec):
        key = spec.structure if spec.uses_structure else None
        if key not in ds_cache:
            ds_cache[key] = tuple(
                GraphDataset(part, clf_cfg, s_bias_kind="S1", s_peft_kind=key) for part in (train_g, val_g, test_g)
            )
        return ds_cache[key]

    arms: dict[str, list[dict]] = {}
    for arm, (spec, mu) in TREND_ARMS.items():
        arms[arm] = []
        train_ds, val_ds, test_ds = datasets(spec)
        for seed in TREND_SEEDS:
            t_run = time.perf_counter()
            model = Model(replace(base_cfg, seed=base_cfg.seed + seed))
            model.store.load_snapshot(snapshot)
            model.reset_head("binary_classification")
            mask = instrument(model, spec)
            fit(model, mask, train_ds, val_ds, replace(TREND_TRAIN, mu=mu, seed=seed))
            auc = evaluate(model, test_ds, "auc")
            row = {"seed": seed, "auc": auc, "wall": time.perf_counter() - t_run}
            if arm in KEEP_MODELS:
                row["model"] = model
            arms[arm].append(row)
            print(f"[trend] {arm} seed {seed}: test auc {auc:.4f} ({row['wall']:.1f}s)")

    return {
        "arms": arms,
        "pretrain_seconds": pretrain_seconds,
        "test_ds": {key: parts[2] for key, parts in ds_cache.items()},
    }


def _aucs(lab, arm: str) -> list[float]:
    return [row["auc"] for row in lab["arms"][arm]]


# ---------------------------------------------------------------------------
# Criterion 5: structure carries the signal.


def test_criterion_5_structure_signal_trend(trend_lab):
    gad = _aucs(trend_lab, "gadapter_s1")
    nos = _aucs(trend_lab, "gadapter_nos")
    bit = _aucs(trend_lab, "bitfit")
    gap_s = float(np.mean(gad) - np.mean(nos))
    gap_b = float(np.mean(gad) - np.mean(bit))
    dir_s = sum(a > b for a, b in zip(gad, nos))
    dir_b = sum(a > b for a, b in zip(gad, bit))
    runtime = trend_lab["pretrain_seconds"] + sum(
        row["wall"] for arm in ("gadapter_s1", "gadapter_nos", "bitfit") for row in trend_lab["arms"][arm]
    )
    check(
        5,
        gap_s >= 0.05 and gap_b > 0.0 and dir_s >= 5 and dir_b >= 5 and runtime < 1800.0,
        f"mean test AUC over 6 seeds: with structure {np.mean(gad):.4f}, without {np.mean(nos):.4f} "
        f"(gap {gap_s:+.4f}, gate >= +0.05), bias-only {np.mean(bit):.4f} (gap {gap_b:+.4f}, gate > 0); "
        f"per-seed direction {dir_s}/6 and {dir_b}/6 (gate >= 5); runtime {runtime:.0f}s (gate 1800s)",
    )


# ---------------------------------------------------------------------------
# Criterion 6: feature distributions of the structure-aware method should
# sit closer to full fine-tuning than the plain adapter's.


def test_criterion_6_feature_shift_ordering(trend_lab):
    test_s1 = trend_lab["test_ds"]["S1"]
    test_plain = trend_lab["test_ds"][None]
    js_gad: list[float] = []
    js_ada: list[float] = []
    for i, seed in enumerate(TREND_SEEDS):
        feats_full = extract_features(trend_lab["arms"]["full"][i]["model"], test_plain)
        feats_gad = extract_features(trend_lab["arms"]["gadapter_s1"][i]["model"], test_s1)
        feats_ada = extract_features(trend_lab["arms"]["adapter"][i]["model"], test_plain)
        edges = shared_edges(feats_full, feats_gad + feats_ada)
        h_full = build_histogram(feats_full, edges=edges)
        js_gad.append(js_divergence(h_full, build_histogram(feats_gad, edges=edges)))
        js_ada.append(js_divergence(h_full, build_histogram(feats_ada, edges=edges)))
    in_range = all(0.0 <= v <= math.log(2.0) + TIGHT for v in js_gad + js_ada)
    per_seed = ", ".join(f"s{s}: {g:.4f} vs {a:.4f}" for s, g, a in zip(TREND_SEEDS, js_gad, js_ada))
    check(
        6,
        float(np.mean(js_gad)) < float(np.mean(js_ada)) and in_range,
        f"JS(full, structure-aware) mean {np.mean(js_gad):.4f} vs JS(full, plain adapter) mean "
        f"{np.mean(js_ada):.4f} (gate: first < second); per seed [{per_seed}]; "
        f"all values in [0, ln 2]: {in_range}",
    )


# ---------------------------------------------------------------------------
# Criterion 7: trainable-parameter economics and checkpoint byte sizes.


def _record_bytes(name: str, shape: tuple) -> int:
    numel = 1
    for s in shape:
        numel *= s
    return 4 + len(name.encode()) + 2 + 4 * len(shape) + 8 * numel


def _backbone_plan(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, dff = cfg.hidden, cfg.ffn_dim
    plan: list[tuple[str, tuple]] = [("embed.table", (cfg.vocab + 2, d))]
    for i in range(cfg.num_layers):
        p = f"enc.{i}"
        for nm in ("q", "k", "v", "o"):
            plan += [(f"{p}.attn.w_{nm}", (d, d)), (f"{p}.attn.b_{nm}", (d,))]
        plan += [
            (f"{p}.attn.s_scale", (cfg.heads,)),
            (f"{p}.ln1.g", (d,)),
            (f"{p}.ln1.b", (d,)),
            (f"{p}.ffn.w1", (d, dff)),
            (f"{p}.ffn.b1", (dff,)),
            (f"{p}.ffn.w2", (dff, d)),
            (f"{p}.ffn.b2", (d,)),
            (f"{p}.ln2.g", (d,)),
            (f"{p}.ln2.b", (d,)),
        ]
    plan += [("head.proj", (d, 1)), ("head.b", (1,))]
    return plan


def _gadapter_plan(cfg: ModelConfig, r: int) -> list[tuple[str, tuple]]:
    d = cfg.hidden
    plan: list[tuple[str, tuple]] = []
    for i in range(cfg.num_layers):
        p = f"peft.{i}.mid_ffn"
        plan += [
            (f"{p}.w_down", (d, r)),
            (f"{p}.w_up", (r, d)),
            (f"{p}.ln_pre.g", (d,)),
            (f"{p}.ln_pre.b", (d,)),
            (f"{p}.ln_post.g", (d,)),
            (f"{p}.ln_post.b", (d,)),
        ]
    return plan


def _expected_bytes(plan: list[tuple[str, tuple]], cfg: ModelConfig, spec: PeftSpec, kind: str) -> int:
    meta = json.dumps(
        {"kind": kind, "head_type": cfg.head_type, "peft": dataclasses.asdict(spec)}, sort_keys=True
    ).encode()
    digest = cfg.backbone_digest().encode()
    header = 8 + 4 + (4 + len(digest)) + (4 + len(meta)) + 4
    return header + sum(_record_bytes(name, shape) for name, shape in plan)


def test_criterion_7_parameter_economics():
    cfg = ModelConfig()  # the default backbone
    gad4 = Model(cfg)
    mask4 = instrument(gad4, PeftSpec(method="gadapter", r=4, structure="S1"))
    ada16 = Model(cfg)
    instrument(ada16, PeftSpec(method="adapter", r=16))
    gamma_gad = trainable_ratio(gad4)
    gamma_ada = trainable_ratio(ada16)

    size_errors: list[str] = []
    ratios: dict[int, float] = {}
    for r in (2, 4):
        spec = PeftSpec(method="gadapter", r=r, structure="S1")
        model = Model(cfg)
        mask = instrument(model, spec)
        full_bytes = len(save_checkpoint(model, kind="full"))
        delta_bytes = len(save_checkpoint(model, mask=mask, kind="delta"))
        want_full = _expected_bytes(_backbone_plan(cfg) + _gadapter_plan(cfg, r), cfg, spec, "full")
        head_plan = [("head.proj", (cfg.hidden, 1)), ("head.b", (1,))]
        want_delta = _expected_bytes(head_plan + _gadapter_plan(cfg, r), cfg, spec, "delta")
        if full_bytes != want_full:
            size_errors.append(f"r={r} full {full_bytes} != oracle {want_full}")
        if delta_bytes != want_delta:
            size_errors.append(f"r={r} delta {delta_bytes} != oracle {want_delta}")
        ratios[r] = delta_bytes / full_bytes

    check(
        7,
        gamma_gad < gamma_ada < 1.0 and not size_errors and all(v <= 0.05 for v in ratios.values()),
        f"gamma small-rank structure-aware {gamma_gad:.4f} < plain adapter r16 {gamma_ada:.4f} < 1; "
        f"delta/full checkpoint bytes r2 {ratios[2]:.4f}, r4 {ratios[4]:.4f} (gate <= 0.05); "
        f"byte-size oracle mismatches: {size_errors or 'none'}",
    )


# ---------------------------------------------------------------------------
# Criterion 8: sweeping the proximal weight never hurts the best result.


def test_criterion_8_bregman_non_inferiority(trend_lab):
    mean_mu0 = float(np.mean(_aucs(trend_lab, "gadapter_mu0")))
    mean_mu01 = float(np.mean(_aucs(trend_lab, "gadapter_s1")))
    best_mu, best = max(((0.0, mean_mu0), (0.1, mean_mu01)), key=lambda kv: kv[1])
    strict = "yes" if mean_mu01 > mean_mu0 else "no"
    check(
        8,
        best >= mean_mu0,
        f"mean test AUC mu=0 {mean_mu0:.4f}, mu=0.1 {mean_mu01:.4f}; best mu {best_mu} at {best:.4f} "
        f">= mu=0 (non-inferiority gate); strict improvement from the proximal term: {strict} "
        f"(reported, not gated)",
    )


# ---------------------------------------------------------------------------
# Criterion 9: one config, two runs, byte-identical artifacts.


def test_criterion_9_pipeline_determinism(tmp_path):
    data = tmp_path / "data"
    payload = {
        "out": "",
        "gendata": {
            "kind": "triangle_clf",
            "count": 80,
            "n_range": [4, 8],
            "seed": 11,
            "vocab": 6,
            "path": str(data / "all.jsonl"),
        },
        "split": {"source": str(data / "all.jsonl"), "ratios": [0.8, 0.1, 0.1], "seed": 2},
        "data": {
            "train": str(data / "train.jsonl"),
            "val": str(data / "val.jsonl"),
            "test": str(data / "test.jsonl"),
        },
        "model": {"num_layers": 1, "hidden": 8, "heads": 2, "ffn_dim": 8, "vocab": 6, "seed": 3},
        "pretrain": {"lr": 2e-3, "batch_size": 16, "epochs": 2, "seed": 0},
        "train": {"lr": 1e-2, "batch_size": 16, "epochs": 2, "mu": 0.1, "eval_metric": "auc"},
        "peft": [{"method": "gadapter", "r": 2, "structure": "S1"}, {"method": "full"}],
        "seeds": [0, 1],
    }

    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"out_{tag}"
        cfg_path = tmp_path / f"config_{tag}.json"
        cfg_path.write_text(json.dumps({**payload, "out": str(out)}, indent=2))
        for sub in ("gendata", "split", "pretrain", "finetune"):
            assert main([sub, "--config", str(cfg_path)]) == 0
        outs.append(out)

    out_a, out_b = outs
    mismatched: list[str] = []
    compared = 0
    for rel in ("backbone.ckpt", "pretrain_history.csv", "results.csv"):
        compared += 1
        if (out_a / rel).read_bytes() != (out_b / rel).read_bytes():
            mismatched.append(rel)
    runs_a = sorted(p.name for p in (out_a / "runs").iterdir())
    runs_b = sorted(p.name for p in (out_b / "runs").iterdir())
    assert runs_a == runs_b
    for slug in runs_a:
        for artifact in ("delta.ckpt", "history.csv"):
            compared += 1
            if (out_a / "runs" / slug / artifact).read_bytes() != (out_b / "runs" / slug / artifact).read_bytes():
                mismatched.append(f"runs/{slug}/{artifact}")

    check(
        9,
        not mismatched,
        f"two pipeline runs of one config: {compared} artifacts compared byte-for-byte "
        f"({len(runs_a)} fine-tuning runs), mismatches: {mismatched or 'none'}",
    )
