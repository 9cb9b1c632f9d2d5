"""Command line entry point: ``unimoe {route,train,bench,ablate,grad-check,golden}``.

Exit codes: 0 success, 1 invalid input or failed check, 2 non-finite values.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .. import tensor as tn
from ..affinity import GateParams
from ..layer import ExpertBank, RouterConfig, RouterKind, route
from ..serialize import save_arrays
from ..tensor import NonFiniteError, Rng
from .bench import BenchConfig, bench_route, write_bench_csv
from .config import ExperimentConfig
from .golden import compare_golden, write_golden
from .gradcheck import GRADIENT_TOLERANCE, gradient_checks
from .train import TrainingDiverged, ablate_softmax_combine, train

# flag -> dotted config key
_FLAGS = {
    "router": "router.kind",
    "k": "router.k",
    "capacity_factor": "router.capacity_factor",
    "dim": "model.dim",
    "hidden": "model.hidden",
    "experts": "model.experts",
    "layers": "model.layers",
    "classes": "data.classes",
    "tokens_per_image": "data.tokens_per_image",
    "spread": "data.spread",
    "images": "data.images",
    "lr": "optim.lr",
    "steps": "optim.steps",
    "batch_size": "optim.batch_size",
    "seed": "seed",
    "noise_std": "noise_std",
    "gate_skew": "gate_skew",
    "log_every": "log_every",
    "output_dir": "output_dir",
}
_TYPES = {"router": str, "output_dir": str, "k": int, "dim": int, "hidden": int, "experts": int, "layers": int}
_TYPES.update(classes=int, tokens_per_image=int, images=int, steps=int, batch_size=int, seed=int, log_every=int)


def _set_dotted(d: dict, key: str, value) -> None:
    *path, last = key.split(".")
    for part in path:
        if not isinstance(d.get(part), dict):
            d[part] = {}
        d = d[part]
    d[last] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> ExperimentConfig:
    d = ExperimentConfig.load(args.config).to_dict() if args.config else {}
    if args.config and d.get("data") is not None:
        # let an overridden model dim flow through to the data dim
        d["data"].pop("dim", None)
    for flag, key in _FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_dotted(d, key, value)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        _set_dotted(d, key, _parse_value(value))
    return ExperimentConfig.from_dict(d)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. optim.lr=0.1")
    for flag in _FLAGS:
        kind = _TYPES.get(flag, float)
        extra = {"choices": [k.value for k in RouterKind]} if flag == "router" else {}
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind, **extra)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_route(args) -> int:
    rng = Rng(args.seed)
    kind = RouterKind(args.router)
    T, D, E = args.tokens, args.dim, args.experts
    X = rng.normal((T, D))
    cfg = RouterConfig(kind=kind, k=args.k, capacity_factor=args.capacity_factor)
    slots = cfg.buffer_capacity(T, E) if kind is RouterKind.SOFT_MOE else None
    bank = ExpertBank.init(rng, E, D, D, slots=slots)
    gate = None if slots else GateParams(tn.parameter(rng.normal((D, E), 1.0 / np.sqrt(D))), args.noise_std or 0.0)
    result = route(X, bank, gate, cfg, rng.child(1), training=bool(args.noise_std))
    if args.format == "csv":
        sys.stdout.write(result.report.to_csv())
    else:
        _emit(result.report.to_dict())
    if args.save:
        save_arrays(args.save, {"dispatch": result.tensors.D, "combine": result.tensors.Cmb}, result.report.to_dict())
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    result = train(cfg)
    _emit(result.report)
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    results = ablate_softmax_combine(cfg)
    _emit({label: r.report for label, r in results.items()})
    return 0


def cmd_bench(args) -> int:
    cfg = BenchConfig(
        tokens=tuple(args.tokens),
        experts=args.experts,
        factors=tuple(args.factors),
        dim=args.dim,
        seed=args.seed,
    )
    text = write_bench_csv(bench_route(cfg, args.trials), args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def cmd_grad_check(args) -> int:
    errors = gradient_checks(args.seed)
    ok = all(e < args.tolerance for e in errors.values())
    _emit({"tolerance": args.tolerance, "max_relative_error": errors, "passed": ok})
    return 0 if ok else 1


def cmd_golden(args) -> int:
    if args.check:
        errors = compare_golden(args.dir)
        ok = all(e <= args.tolerance for e in errors.values())
        _emit({"max_abs_error": errors, "passed": ok})
        return 0 if ok else 1
    for path in write_golden(args.dir):
        print(path)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unimoe", description="Mixture-of-experts routing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("route", help="route one random token group and print the routing report")
    p.add_argument("--router", default=RouterKind.SOFTMAX_TOKEN_CHOICE.value, choices=[k.value for k in RouterKind])
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--capacity-factor", type=float, default=1.0)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--save", help="write dispatch/combine tensors in the binary format")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("train", help="train on the synthetic task")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="Sinkhorn router with and without softmax combine")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="routing wall-time grid as CSV")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--tokens", type=int, nargs="+", default=[256, 1024, 4096])
    p.add_argument("--experts", type=int, default=32)
    p.add_argument("--factors", type=float, nargs="+", default=[1.0, 2.0])
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference checks of the differentiable paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRADIENT_TOLERANCE)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("golden", help="regenerate (or --check) the per-router golden fixtures")
    p.add_argument("--dir", default="tests/golden")
    p.add_argument("--check", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.set_defaults(func=cmd_golden)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteError, TrainingDiverged) as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
