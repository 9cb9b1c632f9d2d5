"""Expert-balancing auxiliary losses (importance and load).

Both are squared coefficients of variation over experts, with the population
standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .affinity import GateParams, gate_logits
from .tensor import Node

__all__ = [
    "AuxLossConfig",
    "coefficient_of_variation_sq",
    "importance_loss",
    "expert_loads",
    "load_loss",
    "combined_aux_loss",
]


@dataclass
class AuxLossConfig:
    importance_weight: float = 0.005
    load_weight: float = 0.005
    k: int = 1

    def __post_init__(self):
        for name in ("importance_weight", "load_weight"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {w}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def coefficient_of_variation_sq(v) -> Node:
    """``(std / mean) ** 2`` of a vector."""
    v = tn.as_node(v)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError(f"need a vector of length >= 2, got shape {v.shape}")
    mu = tn.mean(v)
    if mu.value == 0:
        raise ValueError("coefficient of variation undefined for zero mean")
    centered = v - mu
    var = tn.mean(centered * centered)
    return var / (mu * mu)


def importance_loss(X, gate: GateParams) -> Node:
    """CV^2 of the per-expert column sums of ``softmax(XW)``."""
    probs = tn.softmax_rows(gate_logits(X, gate))
    return coefficient_of_variation_sq(tn.sum(probs, axis=0))


def expert_loads(X, gate: GateParams, noise, k: int) -> Node:
    """Expected token count per expert under a fresh N(0, 1/E) perturbation.

    For token ``t`` and expert ``i`` the contribution is
    ``Phi((XW)[t, i] - kth_largest((XW + noise)[t]))`` with ``Phi`` the
    N(0, 1/E) CDF. The k-th largest entry is located on the current values
    and then read through the tape, so gradient reaches its source logit.
    """
    logits = gate_logits(X, gate)
    T, E = logits.shape
    if not 1 <= k <= E:
        raise ValueError(f"k must be in [1, {E}], got {k}")
    noise = np.zeros((T, E)) if noise is None else np.asarray(noise, dtype=np.float64)
    if noise.shape != (T, E):
        raise ValueError(f"noise shape {noise.shape} must be {(T, E)}")
    noisy = logits + noise
    kth = tn.topk_indices(noisy.value, k, axis=1)[:, k - 1 : k]
    threshold = tn.take_along_axis(noisy, kth, axis=1)  # (T, 1)
    probs = tn.normal_cdf(logits - threshold, scale=1.0 / np.sqrt(E))
    return tn.sum(probs, axis=0)


def load_loss(X, gate: GateParams, noise, k: int) -> Node:
    """CV^2 of :func:`expert_loads`. ``noise`` must be the realization the router used."""
    return coefficient_of_variation_sq(expert_loads(X, gate, noise, k))


def combined_aux_loss(cfg: AuxLossConfig, X, gate: GateParams, noise) -> Node:
    total = tn.constant(0.0)
    if cfg.importance_weight:
        total = total + cfg.importance_weight * importance_loss(X, gate)
    if cfg.load_weight:
        total = total + cfg.load_weight * load_loss(X, gate, noise, cfg.k)
    return total
