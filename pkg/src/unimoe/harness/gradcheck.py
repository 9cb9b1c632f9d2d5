"""Finite-difference checks of the differentiable paths."""

from __future__ import annotations

import numpy as np

from .. import tensor as tn
from ..affinity import GateParams
from ..layer import ExpertBank, RouterConfig, RouterKind, moe_layer_step
from ..losses import importance_loss, load_loss
from ..tensor import Rng, finite_difference_check

__all__ = ["GRADIENT_TOLERANCE", "gradient_checks"]

GRADIENT_TOLERANCE = 1e-4


def _projected(Y, R):
    return tn.sum(Y * tn.constant(R))


def gradient_checks(seed: int = 0, tokens: int = 6, dim: int = 3, experts: int = 3) -> dict[str, float]:
    """Max relative error (tape vs central differences) per path.

    Layer outputs are reduced to a scalar with a fixed random projection.
    """
    rng = Rng(seed)
    T, D, E = tokens, dim, experts
    X = rng.normal((T, D))
    R = rng.normal((T, D))
    bank = ExpertBank.init(rng, E, D, 2 * D, slots=2)
    W = rng.normal((D, E))
    soft = RouterConfig(kind=RouterKind.SOFT_MOE)
    gated = RouterConfig(kind=RouterKind.SOFTMAX_TOKEN_CHOICE, k=2)
    noise = rng.normal((T, E), 1.0 / E)

    def soft_wrt(name):
        def f(leaf):
            params = bank.parameters()
            params[name] = leaf
            b = ExpertBank(params["w1"], params["b1"], params["w2"], params["b2"], params["phi"])
            return _projected(moe_layer_step(X, b, None, soft).Y, R)

        return f

    def gating(w):
        out = moe_layer_step(X, bank, GateParams(w, 0.0), gated, training=False)
        return _projected(out.Y, R)

    checks = {
        "soft_moe_wrt_input": finite_difference_check(
            lambda x: _projected(moe_layer_step(x, bank, None, soft).Y, R), X
        ),
        "soft_moe_wrt_slots": finite_difference_check(soft_wrt("phi"), bank.phi.value),
        "soft_moe_wrt_expert_weights": finite_difference_check(soft_wrt("w1"), bank.w1.value),
        "softmax_gating_wrt_gate": finite_difference_check(gating, W),
        "importance_loss_wrt_gate": finite_difference_check(lambda w: importance_loss(X, GateParams(w, 0.0)), W),
        "load_loss_wrt_gate": finite_difference_check(
            lambda w: load_loss(X, GateParams(w, 1.0 / E), noise, 1), W
        ),
    }
    return {name: float(err) for name, err in checks.items()}
