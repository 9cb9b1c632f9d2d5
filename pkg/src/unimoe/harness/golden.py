"""Golden fixtures: one end-to-end output per router on a fixed seed-0 instance.

The instance is T=8 tokens, D=4, E=4 experts of hidden width 8, buffer
capacity 2 (factor 1, or k=1) and Soft MoE with 2 slots per expert. Routing
runs in evaluation mode, so the softmax gates add no noise. Stored outputs
come from the scalar loop evaluator in :mod:`unimoe.reference`, not from
the vectorized layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensor as tn
from ..affinity import GateParams
from ..allocation import capacity
from ..layer import ALL_ROUTERS, ExpertBank, RouterConfig, RouterKind, moe_layer_step, route
from ..reference import moe_loop
from ..serialize import load_arrays, save_arrays
from ..tensor import Rng

__all__ = ["GoldenInstance", "golden_instance", "golden_outputs", "write_golden", "compare_golden"]

TOKENS, DIM, EXPERTS, HIDDEN = 8, 4, 4, 8


@dataclass
class GoldenInstance:
    X: np.ndarray
    bank: ExpertBank
    gate: GateParams


def golden_instance(seed: int = 0) -> GoldenInstance:
    rng = Rng(seed)
    X = rng.normal((TOKENS, DIM))
    bank = ExpertBank.init(rng, EXPERTS, DIM, HIDDEN, slots=capacity(1.0, TOKENS, EXPERTS))
    gate = GateParams(tn.parameter(rng.normal((DIM, EXPERTS), 1.0 / np.sqrt(DIM))), 1.0 / EXPERTS)
    return GoldenInstance(X, bank, gate)


def golden_outputs(kind: RouterKind, inst: GoldenInstance | None = None, use_layer: bool = False) -> dict:
    """``{"Y", "dispatch", "combine"}`` for one router.

    ``Y`` comes from the loop evaluator unless ``use_layer`` is set, in which
    case it comes from the vectorized layer (the thing being checked).
    """
    inst = inst or golden_instance()
    config = RouterConfig(kind=RouterKind(kind), k=1, capacity_factor=1.0)
    gate = None if config.kind is RouterKind.SOFT_MOE else inst.gate
    if use_layer:
        out = moe_layer_step(inst.X, inst.bank, gate, config, training=False)
        rt = out.routing.tensors
        Y = out.Y.value
    else:
        rt = route(inst.X, inst.bank, gate, config, training=False).tensors
        Y = moe_loop(inst.X, inst.bank, rt.D, rt.Cmb)
    return {"Y": Y, "dispatch": rt.D.copy(), "combine": rt.Cmb.copy()}


def write_golden(directory, seed: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inst = golden_instance(seed)
    paths = []
    for kind in ALL_ROUTERS:
        meta = {"router": kind.value, "seed": seed, "tokens": TOKENS, "dim": DIM, "experts": EXPERTS, "hidden": HIDDEN}
        paths.append(save_arrays(directory / f"{kind.value}.bin", golden_outputs(kind, inst), meta))
    return paths


def compare_golden(directory, seed: int = 0) -> dict[str, float]:
    """Max abs difference per router between the stored fixture and the layer."""
    inst = golden_instance(seed)
    errors = {}
    for kind in ALL_ROUTERS:
        stored, _ = load_arrays(Path(directory) / f"{kind.value}.bin")
        fresh = golden_outputs(kind, inst, use_layer=True)
        errors[kind.value] = max(float(np.max(np.abs(stored[name] - fresh[name]))) for name in stored)
    return errors
