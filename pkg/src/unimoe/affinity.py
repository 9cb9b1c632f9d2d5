"""Token-expert affinity matrices.

Four constructions share the ``AffinityMatrix`` container:

* ``softmax_affinity``: row softmax of (optionally noised) gate logits.
* ``sinkhorn_affinity``: entropic optimal transport plan with unit row mass
  and ``T/E`` column mass, computed by log-domain Sinkhorn scaling.
* ``sparse_ot_affinity``: quadratically regularized transport plan with at
  most ``C`` nonzeros per column.
* ``slot_logits``: token-slot scores for soft routing.

The entropic regularization strength is fixed to 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as tn
from .tensor import Node, Rng

__all__ = [
    "AffinityKind",
    "GateParams",
    "Residuals",
    "AffinityMatrix",
    "SlotLogits",
    "gate_logits",
    "softmax_affinity",
    "sinkhorn",
    "sinkhorn_affinity",
    "sparse_ot",
    "sparse_ot_affinity",
    "slot_logits",
]


class AffinityKind(str, enum.Enum):
    SOFTMAX = "softmax"
    SINKHORN = "sinkhorn_entropic"
    SPARSE_OT = "sparse_ot"


@dataclass
class GateParams:
    """Gating weights ``W`` of shape (D, E) and the noise scale.

    ``bias`` is an optional fixed (never trained) per-expert logit offset used
    to build skewed-routing stress cases.
    """

    W: Node
    noise_std: float = 0.0
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.W = tn.as_node(self.W)
        if self.W.ndim != 2:
            raise ValueError(f"gate weights must be (D, E), got {self.W.shape}")
        if self.noise_std < 0 or not np.isfinite(self.noise_std):
            raise ValueError(f"noise_std must be finite and >= 0, got {self.noise_std}")

    @property
    def num_experts(self) -> int:
        return self.W.shape[1]


@dataclass
class Residuals:
    """Feasibility diagnostics of an affinity solver."""

    row: float = 0.0
    col: float = 0.0
    iterations: int = 0
    nnz_per_column: np.ndarray | None = None
    history: list = field(default_factory=list)  # (row, col) after each iteration
    objective: list = field(default_factory=list)  # dual objective after each iteration

    def as_dict(self) -> dict:
        out = {"row_residual": self.row, "col_residual": self.col, "iterations": self.iterations}
        if self.nnz_per_column is not None:
            out["nnz_per_column"] = [int(v) for v in self.nnz_per_column]
        return out


@dataclass
class AffinityMatrix:
    values: Node
    kind: AffinityKind
    residuals: Residuals = field(default_factory=Residuals)
    noise: np.ndarray | None = None  # realized additive logit noise, softmax only

    @property
    def array(self) -> np.ndarray:
        return self.values.value

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class SlotLogits:
    Z: Node

    @property
    def shape(self):
        return self.Z.shape


def gate_logits(X, gate: GateParams) -> Node:
    X = tn.as_node(X)
    if X.ndim != 2 or X.shape[1] != gate.W.shape[0]:
        raise ValueError(f"tokens {X.shape} incompatible with gate weights {gate.W.shape}")
    logits = X @ gate.W
    if gate.bias is not None:
        logits = logits + np.asarray(gate.bias, dtype=np.float64)
    return logits


def _row_col_residuals(plan: np.ndarray, col_mass: float) -> tuple[float, float]:
    row = float(np.max(np.abs(plan.sum(axis=1) - 1.0)))
    col = float(np.max(np.abs(plan.sum(axis=0) - col_mass)))
    return row, col


# -- softmax -------------------------------------------------------------------


def softmax_affinity(X, gate: GateParams, rng: Rng | None = None) -> AffinityMatrix:
    """``softmax(XW + sigma * eta)`` with ``eta`` standard normal from ``rng``."""
    logits = gate_logits(X, gate)
    noise = None
    if gate.noise_std > 0:
        if rng is None:
            raise ValueError("a noisy gate needs an Rng")
        noise = tn.gaussian_noise(rng, logits.shape, gate.noise_std)
        logits = logits + noise
    return AffinityMatrix(tn.softmax_rows(logits), AffinityKind.SOFTMAX, noise=noise)


# -- entropic OT ---------------------------------------------------------------


def sinkhorn(logits: np.ndarray, iters: int = 50, tol: float = 1e-6) -> tuple[np.ndarray, Residuals]:
    """Maximize ``<P, L> - <P, log P>`` s.t. ``P 1 = 1``, ``P^T 1 = T/E``.

    Alternates a column scaling and a row scaling, always finishing on the
    row scaling so every row of the returned plan sums to one. Runs in the
    log domain on potentials ``f`` (rows) and ``g`` (columns).
    """
    L = np.asarray(logits, dtype=np.float64)
    if L.ndim != 2:
        raise ValueError(f"logits must be a matrix, got shape {L.shape}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if not np.all(np.isfinite(L)):
        raise tn.NonFiniteError("sinkhorn received non-finite logits")
    T, E = L.shape
    col_mass = T / E
    log_col = np.log(col_mass)
    f = np.zeros(T)
    g = np.zeros(E)
    res = Residuals()
    for it in range(1, iters + 1):
        g = log_col - special.logsumexp(L + f[:, None], axis=0)
        f = -special.logsumexp(L + g[None, :], axis=1)
        plan = np.exp(L + f[:, None] + g[None, :])
        row, col = _row_col_residuals(plan, col_mass)
        res.history.append((row, col))
        # dual of the entropic problem, nondecreasing under exact block updates
        res.objective.append(float(f.sum() + col_mass * g.sum() - plan.sum()))
        res.iterations = it
        if row < tol and col < tol:
            break
    res.row, res.col = row, col
    return plan, res


def _sinkhorn_unrolled(logits: Node, iterations: int) -> Node:
    T, E = logits.shape
    log_col = np.log(T / E)
    f = tn.constant(np.zeros((T, 1)))
    g = None
    for _ in range(iterations):
        g = log_col - tn.logsumexp(logits + f, axis=0, keepdims=True)
        f = tn.neg(tn.logsumexp(logits + g, axis=1, keepdims=True))
    return tn.exp(logits + f + g)


def sinkhorn_affinity(
    X,
    gate: GateParams,
    iters: int = 50,
    tol: float = 1e-6,
    differentiable: bool = False,
) -> AffinityMatrix:
    """Entropic transport plan over the noiseless logits ``XW``.

    The result is forward-only (a stop-gradient leaf) unless ``differentiable``
    is set, in which case the executed iterations are replayed on the tape.
    """
    logits = gate_logits(X, gate)
    plan, res = sinkhorn(logits.value, iters, tol)
    if differentiable:
        values = _sinkhorn_unrolled(logits, res.iterations)
    else:
        values = tn.stop_gradient(plan)
    return AffinityMatrix(values, AffinityKind.SINKHORN, res)


# -- sparsity-constrained quadratic OT -----------------------------------------


def _simplex_threshold(sorted_desc: np.ndarray, mass: float) -> float:
    """Threshold ``tau`` with ``sum(max(v - tau, 0)) == mass`` for descending ``v``."""
    csum = np.cumsum(sorted_desc) - mass
    ranks = np.arange(1, sorted_desc.size + 1)
    active = sorted_desc - csum / ranks > 0
    j = np.nonzero(active)[0][-1]
    return csum[j] / (j + 1)


def _project_column(scores: np.ndarray, capacity: int, mass: float) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``capacity`` best scores and project them onto the ``mass`` simplex."""
    order = np.argsort(-scores, kind="stable")[:capacity]
    vals = scores[order]
    tau = _simplex_threshold(vals, mass)
    return order, np.maximum(vals - tau, 0.0)


def _masked_projection(scores: np.ndarray, mask: np.ndarray, mass: float, axis: int):
    """Project every line of ``scores`` along ``axis``, restricted to ``mask``,
    onto the simplex of total ``mass``.

    Returns ``(projection, threshold)``; lines with an empty mask give zeros
    and a NaN threshold.
    """
    masked = np.where(mask, scores, -np.inf)
    srt = -np.sort(-masked, axis=axis)
    count = mask.sum(axis=axis, keepdims=True)
    shape = [1] * scores.ndim
    shape[axis] = scores.shape[axis]
    ranks = np.arange(1, scores.shape[axis] + 1).reshape(shape)
    csum = np.cumsum(np.where(ranks <= count, srt, 0.0), axis=axis) - mass
    with np.errstate(invalid="ignore"):
        active = (ranks <= count) & (srt - csum / ranks > 0)
    last = np.max(np.where(active, ranks, 0), axis=axis, keepdims=True)
    safe = np.maximum(last, 1)
    tau = np.take_along_axis(csum, safe - 1, axis=axis) / safe
    tau = np.where(last > 0, tau, np.nan)
    proj = np.where(mask, np.maximum(scores - np.nan_to_num(tau), 0.0), 0.0)
    return proj, np.squeeze(tau, axis=axis)


def sparse_ot(
    utility: np.ndarray,
    capacity: int,
    iters: int = 100,
    step: float = 0.3,
    decay: float = 0.9,
    tol: float = 1e-9,
) -> tuple[np.ndarray, Residuals]:
    """Approximate ``argmax <P, U> - 0.5 ||P||_F^2`` over transport plans with
    unit rows, ``T/E`` columns and at most ``capacity`` nonzeros per column.

    Two phases, each up to ``iters`` sweeps:

    1. Support search. Columns are visited in order; each keeps its
       ``capacity`` best entries of ``U[:, r] - alpha`` and projects them onto
       the simplex of mass ``T/E`` (the column potential). The row potentials
       ``alpha`` then move by ``lr * (P[:, r] - 1/E)``, so rows that are
       already covered look less attractive to the next column. ``lr``
       starts at ``step`` and shrinks by ``decay`` after every sweep, which
       lets near-ties settle instead of cycling.
    2. Refinement. With each column's candidate set frozen, exact row and
       column projections alternate (block ascent on the dual restricted to
       the support), ending on a column projection.

    The cardinality bound holds by construction. Feasibility is approximate
    and reported through the residuals.
    """
    U = np.asarray(utility, dtype=np.float64)
    if U.ndim != 2:
        raise ValueError(f"utility must be a matrix, got shape {U.shape}")
    T, E = U.shape
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if capacity * E < T:
        raise ValueError(f"infeasible capacity: C*E = {capacity * E} < T = {T}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if step <= 0 or not 0 < decay <= 1:
        raise ValueError(f"need step > 0 and 0 < decay <= 1, got {step}, {decay}")
    C = min(capacity, T)
    col_mass = T / E
    res = Residuals()

    alpha = np.zeros(T)
    plan = np.zeros((T, E))
    support = np.zeros((T, E), dtype=bool)
    lr = step
    for _ in range(iters):
        support[:] = False
        for r in range(E):
            idx, vals = _project_column(U[:, r] - alpha, C, col_mass)
            plan[:, r] = 0.0
            plan[idx, r] = vals
            support[idx, r] = True
            alpha += lr * (plan[:, r] - 1.0 / E)
        lr *= decay
        res.history.append(_row_col_residuals(plan, col_mass))
        res.iterations += 1

    # refinement on the frozen support; projection thresholds are the potentials
    beta = np.zeros(E)
    for _ in range(iters):
        _, tau = _masked_projection(U - beta[None, :], support, 1.0, axis=1)
        alpha = np.where(np.isnan(tau), alpha, tau)
        plan, tau = _masked_projection(U - alpha[:, None], support, col_mass, axis=0)
        beta = np.where(np.isnan(tau), beta, tau)
        row_res, col_res = _row_col_residuals(plan, col_mass)
        res.history.append((row_res, col_res))
        res.iterations += 1
        if row_res < tol and col_res < tol:
            break

    res.row, res.col = res.history[-1]
    res.nnz_per_column = np.count_nonzero(plan, axis=0)
    return plan, res


def sparse_ot_affinity(
    utility: AffinityMatrix,
    capacity: int,
    iters: int = 100,
    step: float = 0.3,
    decay: float = 0.9,
) -> AffinityMatrix:
    """Sparsity-constrained plan driven by a softmax utility; forward-only."""
    if utility.kind is not AffinityKind.SOFTMAX:
        raise ValueError(f"utility must be a softmax affinity, got {utility.kind}")
    plan, res = sparse_ot(utility.array, capacity, iters, step, decay)
    return AffinityMatrix(tn.stop_gradient(plan), AffinityKind.SPARSE_OT, res)


# -- soft routing scores -------------------------------------------------------


def slot_logits(X, phi) -> SlotLogits:
    """``Z[t, r, c] = <X[t], phi[:, r, c]>``."""
    X, phi = tn.as_node(X), tn.as_node(phi)
    if X.ndim != 2 or phi.ndim != 3 or X.shape[1] != phi.shape[0]:
        raise ValueError(f"slot_logits shape mismatch: X {X.shape}, phi {phi.shape}")
    D, E, C = phi.shape
    Z = X @ tn.reshape(phi, (D, E * C))
    return SlotLogits(tn.reshape(Z, (X.shape[0], E, C)))
