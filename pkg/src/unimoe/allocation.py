"""Turning affinity scores into dispatch/combine tensors.

Both tensors have shape (T, E, C): token, expert, buffer slot. Hard
allocations produce a 0/1 dispatch tensor and a combine tensor that copies the
raw affinity score of each placed (token, expert) pair, with no
renormalization across a token's experts. Soft routing produces two dense
tensors normalized over tokens and over slots respectively.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .affinity import AffinityMatrix, SlotLogits
from .tensor import Node

__all__ = [
    "RoutingMode",
    "RoutingTensors",
    "RoutingReport",
    "REPORT_FIELDS",
    "capacity",
    "token_choice_allocate",
    "token_choice_allocate_split",
    "expert_choice_allocate",
    "expert_choice_allocate_split",
    "soft_routing_tensors",
    "routing_report",
]


class RoutingMode(str, enum.Enum):
    TOKEN_CHOICE = "token_choice"
    EXPERT_CHOICE = "expert_choice"
    SOFT = "soft"


def capacity(factor: float, num_tokens: int, num_experts: int) -> int:
    """Buffer size ``round(factor * T / E)``, halves rounded up, at least 1."""
    if not factor > 0:
        raise ValueError(f"capacity factor must be > 0, got {factor}")
    return max(1, math.floor(factor * num_tokens / num_experts + 0.5))


@dataclass
class RoutingTensors:
    dispatch: Node
    combine: Node
    capacity: int
    mode: RoutingMode

    @property
    def D(self) -> np.ndarray:
        return self.dispatch.value

    @property
    def Cmb(self) -> np.ndarray:
        return self.combine.value

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dispatch.shape

    def validate(self, atol: float = 1e-12) -> None:
        """Raise ``ValueError`` if any routing invariant is violated."""
        D, Cmb = self.D, self.Cmb
        if D.ndim != 3 or D.shape != Cmb.shape or D.shape[2] != self.capacity:
            raise ValueError(f"bad routing tensor shapes {D.shape}, {Cmb.shape}, C={self.capacity}")
        T, E, C = D.shape
        if self.mode is RoutingMode.SOFT:
            if not (np.all(D > 0) and np.all(D < 1) or T == 1):
                raise ValueError("soft dispatch entries must lie in (0, 1)")
            if np.max(np.abs(D.sum(axis=0) - 1)) > atol:
                raise ValueError("soft dispatch must sum to 1 over tokens")
            if np.max(np.abs(Cmb.sum(axis=(1, 2)) - 1)) > atol:
                raise ValueError("soft combine must sum to 1 over slots")
            return
        if not np.all((D == 0) | (D == 1)):
            raise ValueError("hard dispatch must be 0/1")
        if np.any((Cmb != 0) & (D != 1)):
            raise ValueError("combine weight outside dispatched slot")
        if np.any(D.sum(axis=0) > 1):
            raise ValueError("a slot holds more than one token")
        occupancy = D.sum(axis=(0, 2))
        if np.any(occupancy > C):
            raise ValueError("expert over capacity")
        if self.mode is RoutingMode.EXPERT_CHOICE:
            if np.any(occupancy != min(C, T)):
                raise ValueError("expert choice must fill every expert")
            if np.any(D.sum(axis=2) > 1):
                raise ValueError("an expert picked the same token twice")


# -- token choice --------------------------------------------------------------


def _scores(P) -> Node:
    if isinstance(P, AffinityMatrix):
        return P.values
    return tn.as_node(P)


def _running_count(keys: np.ndarray) -> np.ndarray:
    """For each position, how many earlier positions share its key."""
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.r_[True, sorted_keys[1:] != sorted_keys[:-1]]
    group_start = np.maximum.accumulate(np.where(starts, np.arange(keys.size), 0))
    counts = np.empty(keys.size, dtype=np.int64)
    counts[order] = np.arange(keys.size) - group_start
    return counts


def _gather_combine(mask: np.ndarray, scores: Node) -> Node:
    T, E, _ = mask.shape
    return tn.mul(tn.constant(mask), tn.reshape(scores, (T, E, 1)))


def token_choice_allocate_split(P_dispatch, P_combine, C: int, k: int) -> RoutingTensors:
    """Greedy token-choice allocation.

    For choice rank ``i = 1..k`` and token ``t = 1..T`` in order, token ``t``
    goes to its ``i``-th best expert if that expert has a free slot; the
    slot index is the expert's current occupancy. A full expert means the
    token's ``i``-th choice is skipped (no fall-through to rank ``i+1``).
    Selection uses ``P_dispatch``; the written weight is read from
    ``P_combine`` at the same (token, expert).
    """
    pd, pc = _scores(P_dispatch), _scores(P_combine)
    if pd.ndim != 2 or pd.shape != pc.shape:
        raise ValueError(f"affinity shapes {pd.shape} and {pc.shape} must match (T, E)")
    T, E = pd.shape
    if C < 1 or k < 1:
        raise ValueError(f"need C >= 1 and k >= 1, got C={C}, k={k}")
    if k > E:
        raise ValueError(f"k={k} exceeds the number of experts {E}")

    choices = tn.topk_indices(pd.value, k, axis=1)
    occupancy = np.zeros(E, dtype=np.int64)
    mask = np.zeros((T, E, C))
    tokens = np.arange(T)
    for i in range(k):
        experts = choices[:, i]
        # Within one rank, tokens picking the same expert queue up in token
        # order; a rejected token never advances the occupancy, so the first
        # rejection for an expert implies all later ones are rejected too.
        slot = occupancy[experts] + _running_count(experts)
        ok = slot < C
        mask[tokens[ok], experts[ok], slot[ok]] = 1.0
        occupancy += np.bincount(experts[ok], minlength=E)
    return RoutingTensors(tn.constant(mask), _gather_combine(mask, pc), C, RoutingMode.TOKEN_CHOICE)


def token_choice_allocate(P, C: int, k: int) -> RoutingTensors:
    return token_choice_allocate_split(P, P, C, k)


# -- expert choice -------------------------------------------------------------


def expert_choice_allocate_split(P_dispatch, P_combine, C: int) -> RoutingTensors:
    """Each expert, in index order, fills its slots with its top-scoring tokens.

    Only ``min(C, T)`` slots per expert can be filled with distinct tokens; any
    remaining slots stay empty.
    """
    pd, pc = _scores(P_dispatch), _scores(P_combine)
    if pd.ndim != 2 or pd.shape != pc.shape:
        raise ValueError(f"affinity shapes {pd.shape} and {pc.shape} must match (T, E)")
    if C < 1:
        raise ValueError(f"need C >= 1, got {C}")
    T, E = pd.shape
    filled = min(C, T)
    picks = tn.topk_indices(pd.value, filled, axis=0)  # (filled, E)
    mask = np.zeros((T, E, C))
    slots = np.arange(filled)[:, None]
    mask[picks, np.arange(E)[None, :], slots] = 1.0
    return RoutingTensors(tn.constant(mask), _gather_combine(mask, pc), C, RoutingMode.EXPERT_CHOICE)


def expert_choice_allocate(P, C: int) -> RoutingTensors:
    return expert_choice_allocate_split(P, P, C)


# -- soft routing --------------------------------------------------------------


def soft_routing_tensors(Z) -> RoutingTensors:
    """Dispatch: softmax of ``Z`` over tokens. Combine: softmax over all (expert, slot)."""
    if isinstance(Z, SlotLogits):
        Z = Z.Z
    Z = tn.as_node(Z)
    if Z.ndim != 3:
        raise ValueError(f"slot logits must be (T, E, C), got {Z.shape}")
    T, E, C = Z.shape
    dispatch = tn.softmax(Z, axis=0)
    combine = tn.reshape(tn.softmax(tn.reshape(Z, (T, E * C)), axis=1), (T, E, C))
    return RoutingTensors(dispatch, combine, C, RoutingMode.SOFT)


# -- statistics ----------------------------------------------------------------

REPORT_FIELDS = (
    "mode",
    "num_tokens",
    "num_experts",
    "capacity",
    "dropped_token_fraction",
    "underused_slots",
    "per_expert_occupancy",
    "experts_per_token_histogram",
    "row_residual",
    "col_residual",
    "solver_iterations",
    "wall_time_s",
)


@dataclass
class RoutingReport:
    mode: str
    num_tokens: int
    num_experts: int
    capacity: int
    dropped_token_fraction: float
    underused_slots: int
    per_expert_occupancy: list[int]
    experts_per_token_histogram: dict[int, int]
    row_residual: float = 0.0
    col_residual: float = 0.0
    solver_iterations: int = 0
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experts_per_token_histogram"] = {str(k): v for k, v in self.experts_per_token_histogram.items()}
        if not d["extra"]:
            d.pop("extra")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def csv_row(self) -> list[str]:
        """Values in ``REPORT_FIELDS`` order; lists are ``;``-joined, the
        histogram is written as ``experts:tokens`` pairs."""
        row = []
        for name in REPORT_FIELDS:
            v = getattr(self, name)
            if name == "per_expert_occupancy":
                v = ";".join(str(x) for x in v)
            elif name == "experts_per_token_histogram":
                v = ";".join(f"{a}:{b}" for a, b in sorted(v.items()))
            row.append(str(v))
        return row

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(REPORT_FIELDS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def routing_report(rt: RoutingTensors, residuals=None, wall_time: float = 0.0) -> RoutingReport:
    """Drop rate, occupancy and experts-per-token counts.

    Soft routing has no drops by definition and every expert counts as full.
    """
    T, E, C = rt.shape
    if rt.mode is RoutingMode.SOFT:
        occupancy = [C] * E
        hist = {E: T}
        dropped = 0.0
    else:
        D = rt.D
        occupancy = [int(v) for v in np.count_nonzero(D, axis=(0, 2))]
        per_token = np.count_nonzero(D, axis=(1, 2))
        dropped = float(np.count_nonzero(per_token == 0)) / T
        values, counts = np.unique(per_token, return_counts=True)
        hist = {int(a): int(b) for a, b in zip(values, counts)}
    report = RoutingReport(
        mode=rt.mode.value,
        num_tokens=T,
        num_experts=E,
        capacity=C,
        dropped_token_fraction=dropped,
        underused_slots=int(sum(C - o for o in occupancy)),
        per_expert_occupancy=occupancy,
        experts_per_token_histogram=hist,
        wall_time_s=wall_time,
    )
    if residuals is not None:
        report.row_residual = float(residuals.row)
        report.col_residual = float(residuals.col)
        report.solver_iterations = int(residuals.iterations)
    return report
