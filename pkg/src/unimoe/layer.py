"""The unified MoE layer and the six routers built on it.

``moe_forward`` evaluates

    Y[t] = sum_{r, c} combine[t, r, c] * MLP_r(X^T dispatch[:, r, c])

for any pair of routing tensors. ``route`` builds those tensors for one of
the six router kinds, and ``dense_reference_forward`` is the per-token
top-k softmax mixture used to cross-check the unified form.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as tn
from .affinity import (
    AffinityMatrix,
    GateParams,
    gate_logits,
    sinkhorn_affinity,
    slot_logits,
    softmax_affinity,
    sparse_ot_affinity,
)
from .allocation import (
    RoutingMode,
    RoutingReport,
    RoutingTensors,
    capacity,
    expert_choice_allocate_split,
    routing_report,
    soft_routing_tensors,
    token_choice_allocate_split,
)
from .tensor import Node, Rng

__all__ = [
    "RouterKind",
    "RouterConfig",
    "ExpertBank",
    "RouteResult",
    "MoEOutput",
    "moe_forward",
    "dense_gates",
    "dense_reference_forward",
    "recovery_tensors",
    "route",
    "moe_layer_step",
]


class RouterKind(str, enum.Enum):
    SOFTMAX_TOKEN_CHOICE = "softmax_token_choice"
    SINKHORN_TOKEN_CHOICE = "sinkhorn_token_choice"
    SOFTMAX_EXPERT_CHOICE = "softmax_expert_choice"
    SINKHORN_EXPERT_CHOICE = "sinkhorn_expert_choice"
    SPARSE_EXPERT_CHOICE = "sparse_expert_choice"
    SOFT_MOE = "soft_moe"

    @property
    def is_token_choice(self) -> bool:
        return self in (RouterKind.SOFTMAX_TOKEN_CHOICE, RouterKind.SINKHORN_TOKEN_CHOICE)

    @property
    def is_sinkhorn(self) -> bool:
        return self in (RouterKind.SINKHORN_TOKEN_CHOICE, RouterKind.SINKHORN_EXPERT_CHOICE)

    @property
    def uses_transport(self) -> bool:
        return self.is_sinkhorn or self is RouterKind.SPARSE_EXPERT_CHOICE

    @property
    def noisy(self) -> bool:
        return self in (RouterKind.SOFTMAX_TOKEN_CHOICE, RouterKind.SOFTMAX_EXPERT_CHOICE)


ALL_ROUTERS = tuple(RouterKind)


@dataclass
class RouterConfig:
    """Router kind and its hyperparameters.

    Token-choice routers size buffers with ``round(k * T / E)``; expert-choice
    routers use ``round(capacity_factor * T / E)``. ``capacity`` overrides both.
    Soft MoE takes its slot count from the expert bank's slot tensor.
    """

    kind: RouterKind = RouterKind.SOFTMAX_TOKEN_CHOICE
    k: int = 1
    capacity_factor: float = 1.0
    capacity: int | None = None
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6
    sparse_iters: int = 100
    sparse_step: float = 0.3
    softmax_combine: bool = True

    def __post_init__(self):
        self.kind = RouterKind(self.kind)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.capacity_factor > 0:
            raise ValueError(f"capacity_factor must be > 0, got {self.capacity_factor}")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        if self.sinkhorn_iters < 1 or self.sparse_iters < 1:
            raise ValueError("solver iteration counts must be >= 1")
        if not self.sinkhorn_tol > 0 or not self.sparse_step > 0:
            raise ValueError("sinkhorn_tol and sparse_step must be > 0")

    def buffer_capacity(self, num_tokens: int, num_experts: int) -> int:
        if self.capacity is not None:
            return self.capacity
        factor = self.k if self.kind.is_token_choice else self.capacity_factor
        return capacity(factor, num_tokens, num_experts)


@dataclass
class ExpertBank:
    """E two-layer GELU MLPs stored as stacked weights, plus optional slot features.

    Shapes: ``w1`` (E, D, H), ``b1`` (E, H), ``w2`` (E, H, D), ``b2`` (E, D),
    ``phi`` (D, E, C).
    """

    w1: Node
    b1: Node
    w2: Node
    b2: Node
    phi: Node | None = None

    def __post_init__(self):
        E, D, H = self.w1.shape
        if self.b1.shape != (E, H) or self.w2.shape != (E, H, D) or self.b2.shape != (E, D):
            raise ValueError("inconsistent expert parameter shapes")
        if E < 1:
            raise ValueError("need at least one expert")
        if self.phi is not None and self.phi.shape[:2] != (D, E):
            raise ValueError(f"slot tensor must be (D, E, C), got {self.phi.shape}")

    @classmethod
    def init(
        cls,
        rng: Rng,
        num_experts: int,
        dim: int,
        hidden: int | None = None,
        slots: int | None = None,
    ) -> "ExpertBank":
        hidden = 4 * dim if hidden is None else hidden
        E, D, H = num_experts, dim, hidden
        w1 = rng.normal((E, D, H), 1.0 / np.sqrt(D))
        w2 = rng.normal((E, H, D), 1.0 / np.sqrt(H))
        phi = rng.normal((D, E, slots), 1.0 / np.sqrt(D)) if slots else None
        return cls(
            tn.parameter(w1, "w1"),
            tn.parameter(np.zeros((E, H)), "b1"),
            tn.parameter(w2, "w2"),
            tn.parameter(np.zeros((E, D)), "b2"),
            tn.parameter(phi, "phi") if phi is not None else None,
        )

    @property
    def num_experts(self) -> int:
        return self.w1.shape[0]

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[2]

    def parameters(self) -> dict[str, Node]:
        params = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.phi is not None:
            params["phi"] = self.phi
        return params

    def expert(self, r: int, x: np.ndarray) -> np.ndarray:
        """Plain numpy evaluation of expert ``r`` on a vector or row batch."""
        h = x @ self.w1.value[r] + self.b1.value[r]
        h = h * special.ndtr(h)
        return h @ self.w2.value[r] + self.b2.value[r]


def moe_forward(X, bank: ExpertBank, rt: RoutingTensors) -> Node:
    """Unified MoE layer output for one routing group, shape (T, D).

    Every slot input is ``X^T dispatch[:, r, c]``; hard routing makes that a
    single token or the zero vector, and empty slots carry zero combine weight.
    """
    X = tn.as_node(X)
    T, E, C = rt.shape
    if X.ndim != 2 or X.shape != (T, bank.dim) or E != bank.num_experts:
        raise ValueError(
            f"tokens {X.shape} / routing {rt.shape} / bank (E={bank.num_experts}, D={bank.dim}) disagree"
        )
    D = bank.dim
    slots = tn.transpose(tn.reshape(rt.dispatch, (T, E * C))) @ X  # (E*C, D)
    slots = tn.reshape(slots, (E, C, D))
    hidden = tn.gelu(slots @ bank.w1 + tn.reshape(bank.b1, (E, 1, bank.hidden)))
    out = hidden @ bank.w2 + tn.reshape(bank.b2, (E, 1, D))
    return tn.reshape(rt.combine, (T, E * C)) @ tn.reshape(out, (E * C, D))


# -- dense reference -----------------------------------------------------------


def _top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    keep = tn.topk_indices(probs, k, axis=-1)
    out = np.zeros_like(probs)
    np.put_along_axis(out, keep, np.take_along_axis(probs, keep, axis=-1), axis=-1)
    return out


def dense_gates(X, gate: GateParams, k: int, noise: np.ndarray | None = None) -> np.ndarray:
    """Per-token ``top_k(softmax(x W + eps))`` gate weights, shape (T, E)."""
    logits = gate_logits(X, gate).value
    if noise is not None:
        logits = logits + noise
    return _top_k_mask(special.softmax(logits, axis=-1), k)


def dense_reference_forward(x, bank: ExpertBank, gate: GateParams, k: int, rng: Rng | None = None) -> np.ndarray:
    """Single-token top-k softmax mixture, evaluating every expert (no capacity)."""
    x = np.asarray(x, dtype=np.float64)
    E = bank.num_experts
    if k < 1 or k > E:
        raise ValueError(f"k must be in [1, {E}], got {k}")
    noise = None
    if gate.noise_std > 0:
        noise = tn.gaussian_noise(rng, (1, E), gate.noise_std)
    weights = dense_gates(x[None, :], gate, k, noise)[0]
    return sum(weights[r] * bank.expert(r, x) for r in range(E))


def recovery_tensors(gates: np.ndarray) -> RoutingTensors:
    """Routing tensors with ``C = T`` that reproduce the per-token mixture:
    ``combine[t, r, t] = gates[t, r]`` and ``dispatch = (combine > 0)``."""
    gates = np.asarray(gates, dtype=np.float64)
    T, E = gates.shape
    combine = np.zeros((T, E, T))
    idx = np.arange(T)
    combine[idx, :, idx] = gates
    dispatch = (combine > 0).astype(np.float64)
    return RoutingTensors(tn.constant(dispatch), tn.constant(combine), T, RoutingMode.TOKEN_CHOICE)


# -- routers -------------------------------------------------------------------


@dataclass
class RouteResult:
    tensors: RoutingTensors
    report: RoutingReport
    dispatch_affinity: AffinityMatrix | None = None
    combine_affinity: AffinityMatrix | None = None

    @property
    def noise(self) -> np.ndarray | None:
        """Logit noise realized by a noisy softmax gate, if any."""
        return self.dispatch_affinity.noise if self.dispatch_affinity is not None else None


@dataclass
class MoEOutput:
    Y: Node
    report: RoutingReport
    routing: RouteResult = field(repr=False, default=None)


def route(
    X,
    bank: ExpertBank,
    gate: GateParams | None,
    config: RouterConfig,
    rng: Rng | None = None,
    training: bool = True,
) -> RouteResult:
    """Build routing tensors for one routing group of tokens ``X`` (T, D)."""
    X = tn.as_node(X)
    kind = config.kind
    start = time.perf_counter()
    T = X.shape[0]
    E = bank.num_experts
    dispatch_aff = combine_aff = None
    residuals = None

    if kind is RouterKind.SOFT_MOE:
        if bank.phi is None:
            raise ValueError("soft MoE needs an expert bank with a slot tensor")
        rt = soft_routing_tensors(slot_logits(X, bank.phi))
    else:
        if gate is None:
            raise ValueError(f"{kind.value} needs gate parameters")
        if gate.num_experts != E:
            raise ValueError(f"gate has {gate.num_experts} experts, bank has {E}")
        C = config.buffer_capacity(T, E)
        if kind.noisy:
            active = gate if training else GateParams(gate.W, 0.0, gate.bias)
            dispatch_aff = combine_aff = softmax_affinity(X, active, rng)
        else:
            clean = GateParams(gate.W, 0.0, gate.bias)
            softmax_plain = softmax_affinity(X, clean)
            if kind.is_sinkhorn:
                dispatch_aff = sinkhorn_affinity(
                    X,
                    clean,
                    config.sinkhorn_iters,
                    config.sinkhorn_tol,
                    differentiable=not config.softmax_combine,
                )
            else:
                dispatch_aff = sparse_ot_affinity(softmax_plain, C, config.sparse_iters, config.sparse_step)
            residuals = dispatch_aff.residuals
            combine_aff = softmax_plain if config.softmax_combine else dispatch_aff
        if kind.is_token_choice:
            rt = token_choice_allocate_split(dispatch_aff, combine_aff, C, config.k)
        else:
            rt = expert_choice_allocate_split(dispatch_aff, combine_aff, C)

    report = routing_report(rt, residuals, time.perf_counter() - start)
    return RouteResult(rt, report, dispatch_aff, combine_aff)


def moe_layer_step(
    X,
    bank: ExpertBank,
    gate: GateParams | None,
    config: RouterConfig,
    rng: Rng | None = None,
    training: bool = True,
) -> MoEOutput:
    routing = route(X, bank, gate, config, rng, training)
    Y = moe_forward(X, bank, routing.tensors)
    return MoEOutput(Y, routing.report, routing)
