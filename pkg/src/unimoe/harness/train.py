"""Desk-scale training: embedding -> MoE layer(s) -> mean pool -> linear head."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as tn
from ..affinity import GateParams
from ..allocation import capacity
from ..layer import ExpertBank, RouterKind, moe_layer_step
from ..losses import combined_aux_loss
from ..serialize import load_model, save_model
from ..tensor import Node, NonFiniteError, Rng
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic_task

__all__ = [
    "TrainingDiverged",
    "Model",
    "TrainResult",
    "build_model",
    "forward",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "ablate_softmax_combine",
]

# Rng stream ids
_DATA, _INIT, _BATCH, _NOISE = range(4)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite values at step {record['step']}: {record['error']}")
        self.record = record


@dataclass
class Model:
    embed_w: Node
    embed_b: Node
    banks: list[ExpertBank]
    gates: list[GateParams | None]
    head_w: Node
    head_b: Node

    def parameters(self) -> dict[str, Node]:
        params = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for i, (bank, gate) in enumerate(zip(self.banks, self.gates)):
            for name, p in bank.parameters().items():
                params[f"layer{i}.expert.{name}"] = p
            if gate is not None:
                params[f"layer{i}.gate.W"] = gate.W
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params


def build_model(cfg: ExperimentConfig, rng: Rng) -> Model:
    m = cfg.model
    D, E = m.dim, m.experts
    soft = cfg.router.kind is RouterKind.SOFT_MOE
    slots = capacity(cfg.router.capacity_factor, cfg.data.tokens_per_image, E) if soft else None
    banks, gates = [], []
    bias = None
    if cfg.gate_skew:
        bias = np.zeros(E)
        bias[0] = cfg.gate_skew
    for _ in range(m.layers):
        banks.append(ExpertBank.init(rng, E, D, m.hidden, slots))
        gates.append(
            None if soft else GateParams(tn.parameter(rng.normal((D, E), 1.0 / np.sqrt(D))), cfg.effective_noise_std, bias)
        )
    return Model(
        tn.parameter(np.eye(D) + rng.normal((D, D), 0.1 / np.sqrt(D))),
        tn.parameter(np.zeros(D)),
        banks,
        gates,
        tn.parameter(rng.normal((D, cfg.data.classes), 1.0 / np.sqrt(D))),
        tn.parameter(np.zeros(cfg.data.classes)),
    )


def save_checkpoint(path, model: Model, cfg: ExperimentConfig) -> Path:
    """Layer 0 goes in the expert-bank layout; everything else rides along as extra arrays."""
    extra = {k: p.value for k, p in model.parameters().items() if not k.startswith("layer0.")}
    return save_model(path, model.banks[0], model.gates[0], {"config": cfg.to_dict()}, extra)


def load_checkpoint(path) -> tuple[Model, ExperimentConfig]:
    bank, gate, meta, extra = load_model(path)
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg, Rng(cfg.seed))
    model.banks[0], model.gates[0] = bank, gate
    params = model.parameters()
    for name, value in extra.items():
        params[name].value = value
    return model, cfg


@dataclass
class StepOutput:
    loss: Node
    task_loss: float
    aux_loss: float
    accuracy: float
    reports: list = field(default_factory=list)
    routings: list = field(default_factory=list)


def forward(
    model: Model,
    cfg: ExperimentConfig,
    tokens: np.ndarray,
    labels: np.ndarray,
    rng: Rng | None,
    training: bool = True,
) -> StepOutput:
    B, T, D = tokens.shape
    kind = cfg.router.kind
    h = tn.constant(tokens.reshape(B * T, D)) @ model.embed_w + model.embed_b
    aux = tn.constant(0.0)
    reports, routings = [], []
    for bank, gate in zip(model.banks, model.gates):
        if kind is RouterKind.SOFT_MOE:
            # soft MoE mixes tokens only within one image
            outs = []
            for b in range(B):
                piece = tn.reshape(
                    tn.take_along_axis(h, np.arange(b * T, (b + 1) * T)[:, None].repeat(D, 1), axis=0),
                    (T, D),
                )
                out = moe_layer_step(piece, bank, None, cfg.router, rng, training)
                outs.append(out.Y)
                reports.append(out.report)
                routings.append(out.routing)
            y = tn.concat(outs, axis=0)
        else:
            out = moe_layer_step(h, bank, gate, cfg.router, rng, training)
            y = out.Y
            reports.append(out.report)
            routings.append(out.routing)
            if kind is RouterKind.SOFTMAX_TOKEN_CHOICE and training:
                aux = aux + combined_aux_loss(cfg.aux, h, gate, out.routing.noise)
        h = h + y if cfg.model.residual else y
    pooled = tn.mean(tn.reshape(h, (B, T, D)), axis=1)
    logits = pooled @ model.head_w + model.head_b
    logp = tn.log_softmax(logits, axis=1)
    task = tn.neg(tn.mean(tn.take_along_axis(logp, labels[:, None], axis=1)))
    acc = float(np.mean(np.argmax(logits.value, axis=1) == labels))
    return StepOutput(task + aux, float(task.value), float(aux.value), acc, reports, routings)


def evaluate(model: Model, cfg: ExperimentConfig, data: Dataset) -> float:
    """Accuracy over the whole dataset in evaluation mode (no gate noise)."""
    bs = cfg.optim.batch_size
    correct = 0
    for lo in range(0, len(data), bs):
        sl = slice(lo, lo + bs)
        out = forward(model, cfg, data.tokens[sl], data.labels[sl], None, training=False)
        correct += round(out.accuracy * data.labels[sl].size)
    return correct / len(data)


@dataclass
class TrainResult:
    config: ExperimentConfig
    model: Model
    log: list[dict]
    report: dict
    data: Dataset = field(repr=False, default=None)


def _record(step: int, out: StepOutput, wall: float) -> dict:
    dropped = [r.dropped_token_fraction for r in out.reports]
    underused = [r.underused_slots for r in out.reports]
    rep = out.reports[0]
    return {
        "step": step,
        "loss": float(out.loss.value),
        "task_loss": out.task_loss,
        "aux_loss": out.aux_loss,
        "train_accuracy": out.accuracy,
        "dropped_token_fraction": float(np.mean(dropped)),
        "underused_slots": int(np.sum(underused)),
        "per_expert_occupancy": rep.per_expert_occupancy,
        "row_residual": rep.row_residual,
        "col_residual": rep.col_residual,
        "wall_time_s": wall,
    }


def train(cfg: ExperimentConfig, output_dir=None) -> TrainResult:
    """Run SGD with momentum on the synthetic task; deterministic given ``cfg.seed``.

    If an output directory is given (argument or ``cfg.output_dir``) it
    receives ``config.json``, ``log.jsonl``, ``report.json`` and
    ``checkpoint.bin`` (+ ``checkpoint.bin.json``).
    """
    root = Rng(cfg.seed)
    data = generate_synthetic_task(cfg.data, root.child(_DATA))
    model = build_model(cfg, root.child(_INIT))
    batch_rng = root.child(_BATCH)
    noise_rng = root.child(_NOISE)
    params = model.parameters()
    velocity = {name: np.zeros_like(p.value) for name, p in params.items()}
    lr, mu = cfg.optim.lr, cfg.optim.momentum

    out_dir = Path(output_dir or cfg.output_dir) if (output_dir or cfg.output_dir) else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")
        log_fh = open(out_dir / "log.jsonl", "w")

    log: list[dict] = []
    order = np.array([], dtype=np.int64)
    start = time.perf_counter()
    try:
        for step in range(cfg.optim.steps):
            if order.size < cfg.optim.batch_size:
                order = np.concatenate([order, batch_rng.permutation(len(data))])
            idx, order = order[: cfg.optim.batch_size], order[cfg.optim.batch_size :]
            try:
                # non-finite values are caught by the tape itself
                with np.errstate(all="ignore"):
                    out = forward(model, cfg, data.tokens[idx], data.labels[idx], noise_rng, training=True)
                    grads = tn.backward(out.loss)
            except NonFiniteError as err:
                record = {"step": step, "event": "nan", "error": str(err)}
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                raise TrainingDiverged(record) from err
            for name, p in params.items():
                g = grads.get(p)
                if g is None:
                    continue
                velocity[name] = mu * velocity[name] + g
                p.value = p.value - lr * velocity[name]
            if step % cfg.log_every == 0 or step == cfg.optim.steps - 1:
                record = _record(step, out, time.perf_counter() - start)
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    steps_logged = [r for r in log if "event" not in r]
    report = {
        "router": cfg.router.kind.value,
        "steps": cfg.optim.steps,
        "final_train_accuracy": evaluate(model, cfg, data),
        "final_loss": steps_logged[-1]["loss"] if steps_logged else None,
        "nan_events": 0,
        "mean_dropped_token_fraction": float(np.mean([r["dropped_token_fraction"] for r in steps_logged]))
        if steps_logged
        else 0.0,
        "max_underused_slots": max((r["underused_slots"] for r in steps_logged), default=0),
        "wall_time_s": time.perf_counter() - start,
    }
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(report, indent=2))
        save_checkpoint(out_dir / "checkpoint.bin", model, cfg)
    return TrainResult(cfg, model, log, report, data)


def ablate_softmax_combine(cfg: ExperimentConfig, output_dir=None) -> dict[str, TrainResult]:
    """Train the same Sinkhorn-router config with and without softmax combine."""
    if not cfg.router.kind.is_sinkhorn:
        raise ValueError(f"ablation needs a Sinkhorn router, got {cfg.router.kind.value}")
    base = Path(output_dir or cfg.output_dir) if (output_dir or cfg.output_dir) else None
    results = {}
    for label, flag in (("with_softmax_combine", True), ("without_softmax_combine", False)):
        arm = cfg.with_router(softmax_combine=flag)
        results[label] = train(arm, base / label if base else None)
    return results
