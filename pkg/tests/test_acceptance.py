"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from unimoe import tensor as tn
from unimoe.affinity import GateParams, sinkhorn, softmax_affinity, sparse_ot
from unimoe.allocation import (
    capacity,
    expert_choice_allocate,
    expert_choice_allocate_split,
    soft_routing_tensors,
    token_choice_allocate,
    token_choice_allocate_split,
)
from unimoe.harness.bench import bench_route, write_bench_csv
from unimoe.harness.config import ExperimentConfig
from unimoe.harness.golden import compare_golden
from unimoe.harness.gradcheck import gradient_checks
from unimoe.harness.train import train
from unimoe.layer import ALL_ROUTERS, RouterConfig, dense_gates, dense_reference_forward, moe_forward, moe_layer_step
from unimoe.layer import recovery_tensors

from conftest import ACCEPTANCE_LINES, make_instance
from loss_oracle import importance_descent
from oracles import best_assignment

# tolerances and limits, as pinned by the acceptance criteria
EQUIV_TOL, EQUIV_SECONDS = 1e-10, 10.0
ROW_TOL, COL_TOL, SINKHORN_TOL = 1e-12, 1e-6, 1e-8
ALLOC_INSTANCES, ALLOC_SECONDS, SOFT_TOL = 1000, 30.0, 1e-12
GRAD_TOL = 1e-4
CV_REDUCTION = 0.9
TRAIN_ACC, TRAIN_STEPS, TRAIN_SECONDS = 0.9, 2000, 600.0
GOLDEN_TOL = 1e-10
BENCH_ROWS = 36


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def softmax_np(L):
    e = np.exp(L - L.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_1_equivalence():
    r = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        T, E = int(r.integers(1, 9)), int(r.integers(1, 5))
        k = [1, min(2, E), E][i % 3]
        X, bank, gate = make_instance(i, T=T, D=int(r.integers(1, 6)), E=E, H=int(r.integers(1, 9)))
        Y = moe_forward(X, bank, recovery_tensors(dense_gates(X, gate, k))).value
        for t in range(T):
            worst = max(worst, float(np.max(np.abs(Y[t] - dense_reference_forward(X[t], bank, gate, k)))))
    elapsed = time.perf_counter() - start
    record(1, "equivalence", worst <= EQUIV_TOL and elapsed < EQUIV_SECONDS, f"max err {worst:.1e}, {elapsed:.2f}s")


def test_2_feasibility():
    r = np.random.default_rng(2)
    row_worst = col_worst = 0.0
    for _ in range(100):
        plan, _ = sinkhorn(r.normal(size=(32, 8)) * 2, iters=100_000, tol=SINKHORN_TOL)
        row_worst = max(row_worst, float(np.max(np.abs(plan.sum(1) - 1))))
        col_worst = max(col_worst, float(np.max(np.abs(plan.sum(0) - 4))))
    sinkhorn_ok = row_worst <= ROW_TOL and col_worst <= COL_TOL

    nnz_ok = 0
    for i in range(100):
        C = capacity(1 + i % 2, 32, 8)
        plan, res = sparse_ot(softmax_np(r.normal(size=(32, 8)) * 2), C)
        nnz_ok += bool(np.all(np.count_nonzero(plan, axis=0) <= C) and np.all(res.nnz_per_column <= C))

    matched = total = 0
    for T in range(1, 6):
        for _ in range(20):
            U = softmax_np(r.normal(size=(T, T)) * 2)
            plan, _ = sparse_ot(U, 1)
            perm, _ = best_assignment(U)
            total += 1
            matched += bool(np.allclose(plan, np.eye(T)[list(perm)], atol=1e-9))
    ok = sinkhorn_ok and nnz_ok == 100 and matched == total
    detail = f"sinkhorn row {row_worst:.1e} col {col_worst:.1e}; sparse nnz<=C {nnz_ok}/100; brute force {matched}/{total}"
    record(2, "feasibility", ok, detail)


def _random_affinity(r, T, E):
    kind = r.integers(3)
    if kind == 0:
        return r.dirichlet(np.ones(E), size=T)
    if kind == 1:
        return r.integers(0, 3, size=(T, E)) / 2.0  # heavy ties
    return softmax_np(r.normal(size=(T, E)) * 4)


def test_3_allocation_sweeps():
    r = np.random.default_rng(3)
    start = time.perf_counter()
    failures = 0
    for i in range(ALLOC_INSTANCES):
        T, E = int(r.integers(1, 65)), int(r.integers(1, 9))
        P, P2 = _random_affinity(r, T, E), _random_affinity(r, T, E)
        C, k = int(r.integers(1, T + 3)), int(r.integers(1, E + 1))
        try:
            for rt in (token_choice_allocate(P, C, k), token_choice_allocate_split(P, P2, C, k)):
                rt.validate()
                assert np.all(rt.D.sum(axis=(1, 2)) <= k)
            for rt in (expert_choice_allocate(P, C), expert_choice_allocate_split(P, P2, C)):
                rt.validate()
                assert rt.D.sum() == E * min(C, T)
            soft_routing_tensors(r.normal(size=(T, E, C)) * 3).validate(atol=SOFT_TOL)
        except (AssertionError, ValueError):
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < ALLOC_SECONDS
    record(3, "allocation invariants", ok, f"{ALLOC_INSTANCES} instances x 5 allocations, {failures} failures, {elapsed:.2f}s")


def test_4_gradients():
    errors = gradient_checks(seed=0)
    fd_ok = all(e < GRAD_TOL for e in errors.values())

    bit_exact = 0
    kinds = ["sinkhorn_token_choice", "sinkhorn_expert_choice", "sparse_expert_choice"]
    for kind in kinds:
        X, bank, gate = make_instance(40, T=8, D=4, E=4)
        R = np.random.default_rng(0).normal(size=X.shape)
        cfg = RouterConfig(kind=kind)
        W1 = tn.parameter(gate.W.value.copy())
        out = moe_layer_step(X, bank, GateParams(W1), cfg)
        g_router = tn.backward(tn.sum(out.Y * R))[W1]
        W2 = tn.parameter(gate.W.value.copy())
        plan = tn.constant(out.routing.dispatch_affinity.array.copy())
        comb = softmax_affinity(X, GateParams(W2))
        C = cfg.buffer_capacity(8, 4)
        if kind == "sinkhorn_token_choice":
            rt = token_choice_allocate_split(plan, comb, C, 1)
        else:
            rt = expert_choice_allocate_split(plan, comb, C)
        g_const = tn.backward(tn.sum(moe_forward(X, bank, rt) * R))[W2]
        bit_exact += bool(np.any(g_router != 0) and np.array_equal(g_router, g_const))
    worst = max(errors.values())
    record(4, "gradients", fd_ok and bit_exact == 3, f"max FD rel err {worst:.1e}; stop-gradient bit-exact {bit_exact}/3")


def test_5_balancing():
    before, after = importance_descent(seed=0, tokens=64, experts=4, steps=500)
    reduction = 1 - after / before
    record(5, "importance descent", reduction >= CV_REDUCTION, f"CV^2 {before:.3f} -> {after:.2e}, reduction {reduction:.1%}")


@pytest.mark.slow
def test_6_training():
    start = time.perf_counter()
    lines, ok = [], True
    for kind in ALL_ROUTERS:
        cfg = ExperimentConfig(router={"kind": kind.value}, optim={"steps": TRAIN_STEPS})
        result = train(cfg)
        acc = result.report["final_train_accuracy"]
        nan = any("event" in r for r in result.log)
        good = acc >= TRAIN_ACC and not nan and len(result.log) == TRAIN_STEPS
        if "expert_choice" in kind.value:
            good &= all(r["underused_slots"] == 0 for r in result.log)
        ok &= good
        lines.append(f"{kind.value} acc={acc:.3f}")
    for kind in ("softmax_token_choice", "sinkhorn_token_choice"):
        cfg = ExperimentConfig(router={"kind": kind}, optim={"steps": TRAIN_STEPS}, gate_skew=3.0)
        result = train(cfg)
        drop = result.report["mean_dropped_token_fraction"]
        ok &= drop > 0 and not any("event" in r for r in result.log)
        lines.append(f"{kind} skewed drop={drop:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < TRAIN_SECONDS
    record(6, "desk-scale training", ok, "; ".join(lines) + f"; {elapsed:.0f}s")


def test_7_golden():
    errors = compare_golden("tests/golden")
    worst = max(errors.values())
    record(7, "golden fixtures", len(errors) == 6 and worst <= GOLDEN_TOL, f"6 routers, max abs err {worst:.1e}")


@pytest.mark.slow
def test_8_bench(tmp_path):
    rows = bench_route(trials=3)
    text = write_bench_csv(rows, tmp_path / "bench.csv")
    cells = {(r["router"], r["tokens"], r["capacity_factor"]) for r in rows}
    ok = len(rows) == BENCH_ROWS and len(cells) == BENCH_ROWS and len(text.strip().split("\n")) == BENCH_ROWS + 1
    at_4096 = {r["router"]: r["median_s"] for r in rows if r["tokens"] == 4096 and r["capacity_factor"] == 1.0}
    detail = f"{len(rows)} rows; T=4096 medians " + ", ".join(f"{k}={v:.3f}s" for k, v in at_4096.items())
    record(8, "benchmark CSV", ok, detail)
