"""Unified mixture-of-experts layer with six routers.

Token choice and expert choice allocation over softmax, Sinkhorn and
sparsity-constrained transport affinities, plus soft MoE, all expressed
through one pair of (dispatch, combine) routing tensors.
"""

from . import tensor
from .affinity import (
    AffinityKind,
    AffinityMatrix,
    GateParams,
    Residuals,
    SlotLogits,
    sinkhorn,
    sinkhorn_affinity,
    slot_logits,
    softmax_affinity,
    sparse_ot,
    sparse_ot_affinity,
)
from .allocation import (
    RoutingMode,
    RoutingReport,
    RoutingTensors,
    capacity,
    expert_choice_allocate,
    expert_choice_allocate_split,
    routing_report,
    soft_routing_tensors,
    token_choice_allocate,
    token_choice_allocate_split,
)
from .layer import (
    ALL_ROUTERS,
    ExpertBank,
    MoEOutput,
    RouteResult,
    RouterConfig,
    RouterKind,
    dense_gates,
    dense_reference_forward,
    moe_forward,
    moe_layer_step,
    recovery_tensors,
    route,
)
from .losses import (
    AuxLossConfig,
    coefficient_of_variation_sq,
    combined_aux_loss,
    importance_loss,
    load_loss,
)
from .tensor import Node, NonFiniteError, Rng

__version__ = "0.1.0"
