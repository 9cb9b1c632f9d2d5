"""Routing-cost benchmark over the (router, T, capacity factor) grid."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensor as tn
from ..affinity import GateParams
from ..allocation import capacity
from ..layer import ALL_ROUTERS, ExpertBank, RouterConfig, RouterKind, route
from ..tensor import Rng

__all__ = ["BenchConfig", "BENCH_COLUMNS", "bench_route", "write_bench_csv"]

BENCH_COLUMNS = (
    "router",
    "tokens",
    "experts",
    "capacity_factor",
    "capacity",
    "trials",
    "median_s",
    "p90_s",
    "dropped_token_fraction",
    "underused_slots",
    "dispatch_nnz",
)


@dataclass
class BenchConfig:
    tokens: tuple[int, ...] = (256, 1024, 4096)
    experts: int = 32
    factors: tuple[float, ...] = (1.0, 2.0)
    dim: int = 32
    soft_group: int = 256  # soft MoE routes one image-sized group at a time
    routers: tuple[RouterKind, ...] = ALL_ROUTERS
    seed: int = 0


def _time_cell(kind: RouterKind, T: int, factor: float, cfg: BenchConfig, trials: int) -> dict:
    rng = Rng(cfg.seed)
    E, D = cfg.experts, cfg.dim
    X = tn.constant(rng.normal((T, D)))
    # token choice sizes its buffers through k, so the factor becomes k
    k = int(round(factor)) if kind.is_token_choice else 1
    router = RouterConfig(kind=kind, k=k, capacity_factor=factor)
    if kind is RouterKind.SOFT_MOE:
        group = min(T, cfg.soft_group)
        C = capacity(factor, group, E)
        bank = ExpertBank.init(rng, E, D, D, slots=C)
        gate = None
        groups = [tn.constant(X.value[lo : lo + group]) for lo in range(0, T, group)]
    else:
        bank = ExpertBank.init(rng, E, D, D)
        gate = GateParams(tn.parameter(rng.normal((D, E), 1.0 / np.sqrt(D))), 0.0)
        groups = [X]
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        results = [route(g, bank, gate, router, None, training=False) for g in groups]
        times.append(time.perf_counter() - start)
    reports = [r.report for r in results]
    return {
        "router": kind.value,
        "tokens": T,
        "experts": E,
        "capacity_factor": factor,
        "capacity": reports[0].capacity,
        "trials": trials,
        "median_s": float(np.median(times)),
        "p90_s": float(np.percentile(times, 90)),
        "dropped_token_fraction": float(np.mean([r.dropped_token_fraction for r in reports])),
        "underused_slots": int(sum(r.underused_slots for r in reports)),
        "dispatch_nnz": int(sum(np.count_nonzero(r.tensors.D) for r in results)),
    }


def bench_route(config: BenchConfig | None = None, trials: int = 5) -> list[dict]:
    """Median and p90 routing wall time for every cell of the grid.

    Only routing is timed (affinity, solver, allocation), not the expert MLPs.
    """
    if trials < 3:
        raise ValueError(f"need at least 3 trials, got {trials}")
    cfg = config or BenchConfig()
    if any(kind.is_token_choice for kind in cfg.routers) and any(f != round(f) for f in cfg.factors):
        raise ValueError("token-choice cells need integer factors (used as k)")
    rows = []
    for kind in cfg.routers:
        for T in cfg.tokens:
            for factor in cfg.factors:
                rows.append(_time_cell(kind, T, factor, cfg, trials))
    return rows


def write_bench_csv(rows: list[dict], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text
