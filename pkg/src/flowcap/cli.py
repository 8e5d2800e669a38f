"""``flowcap`` command line.

Exit status: 0 on success, 2 for usage or configuration problems, 3 for
numerical failures (diverged training, non-convergent inversion).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from .construct import REGISTRY, EmbeddingOracle, OffImageError, counterexample_suite, get_homeomorphism, integrate_embedding
from .experiments import (
    ConfigError,
    ExperimentConfig,
    TrainingDivergence,
    default_config,
    run_augmentation_sweep,
    run_experiment,
    run_flow_regression,
    run_negation_iresnet,
)
from .iresnet import InversionError
from .odenet import IntegrationError
from .persist import atomic_write_json, invert, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("flowcap")

_NEGATIVE_VECTOR = re.compile(r"^-(\d|\.\d)[\d.,eE+\- ]*$")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_vector(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise _Fail(EXIT_USAGE, f"error: cannot parse vector {text!r}; expected comma-separated numbers") from None
    if not vals:
        raise _Fail(EXIT_USAGE, "error: empty vector")
    return np.asarray(vals)


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise _Fail(EXIT_USAGE, f"error: --set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _env_seed() -> int | None:
    raw = os.environ.get("FLOWCAP_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise _Fail(EXIT_USAGE, f"error: FLOWCAP_SEED must be an integer, got {raw!r}") from None


def _load_config(path: str | None, default_name: str | None, sets, out: str | None) -> ExperimentConfig:
    if path is None:
        if default_name is None:
            raise _Fail(EXIT_USAGE, "error: --config is required")
        doc = {"experiment": default_name}
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise _Fail(EXIT_USAGE, f"{path}: error: cannot read config ({exc.strerror})") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise _Fail(EXIT_USAGE, f"{path}:{exc.lineno}:{exc.colno}: error: invalid JSON ({exc.msg})") from None
    label = path or "<defaults>"
    try:
        if isinstance(doc, dict) and "seed" not in doc:
            seed = _env_seed()
            if seed is not None:
                doc = {**doc, "seed": seed}
        cfg = ExperimentConfig.from_dict(doc)
        cfg = cfg.with_overrides(_parse_sets(sets))
    except ConfigError as exc:
        raise _Fail(EXIT_USAGE, f"{label}:{_key_line(path, exc)}: error: {exc}") from None
    if out is not None:
        cfg.out = out
    return cfg


def _key_line(path: str | None, exc: ConfigError) -> int:
    """Line of the first quoted key named in ``exc`` (1 if not found)."""
    if path is None:
        return 1
    msg = str(exc)
    if "'" in msg:
        key = msg.split("'")[1].split(".")[-1]
        for i, line in enumerate(Path(path).read_text().splitlines(), 1):
            if f'"{key}"' in line:
                return i
    return 1


def _print_summary(summary: dict) -> None:
    print(json.dumps(summary, indent=2))


def cmd_train(args) -> int:
    cfg = _load_config(args.config, None, args.set, args.out)
    if cfg.out is None:
        cfg.out = str(Path("runs") / f"{cfg.experiment}-seed{cfg.seed}")
    result = run_experiment(cfg)
    if isinstance(result, dict):
        for d, m in result.items():
            print(f"d={d} train_loss={m.final_train_loss:.6g} test_loss={m.final_test_loss:.6g}")
    else:
        _print_summary(result.summary())
    print(f"outputs written to {cfg.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, "augmentation-sweep", args.set, args.out)
    if cfg.experiment != "augmentation-sweep":
        raise _Fail(EXIT_USAGE, f"error: sweep needs an augmentation-sweep config, got {cfg.experiment!r}")
    if cfg.out is None:
        cfg.out = str(Path("runs") / f"sweep-seed{cfg.seed}")
    results = run_augmentation_sweep(cfg)
    print(f"{'d':>3} {'train_loss':>14} {'test_loss':>14}")
    for d, m in results.items():
        print(f"{d:>3} {m.final_train_loss:>14.6g} {m.final_test_loss:>14.6g}")
    print(f"outputs written to {cfg.out}")
    return EXIT_OK


def cmd_invert(args) -> int:
    try:
        model = load_model(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise _Fail(EXIT_USAGE, f"{args.model}: error: cannot load model ({exc})") from None
    y = _parse_vector(args.y)
    try:
        x, residual = invert(model, y, tol=args.tol, max_iters=args.max_iters)
    except InversionError as exc:
        raise _Fail(EXIT_NUMERIC, f"error: fixed-point inversion did not converge (residual {exc.residual:.3e})") from None
    except TypeError as exc:
        raise _Fail(EXIT_USAGE, f"error: {exc}") from None
    except ValueError as exc:
        raise _Fail(EXIT_USAGE, f"error: {exc}") from None
    print("x = " + ",".join(repr(float(v)) for v in np.ravel(x)))
    print(f"residual = {residual:.3e}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.name not in REGISTRY:
        raise _Fail(EXIT_USAGE, f"error: unknown homeomorphism {args.name!r}; registered: {', '.join(sorted(REGISTRY))}")
    h = get_homeomorphism(args.name)
    x = _parse_vector(args.x)
    if x.size != h.p:
        raise _Fail(EXIT_USAGE, f"error: {args.name} acts on R^{h.p}, got {x.size} values")
    if args.steps < 1:
        raise _Fail(EXIT_USAGE, "error: steps must be >= 1")
    if h.contains is not None and not bool(h.contains(x[None, :])[0]):
        raise _Fail(EXIT_USAGE, f"error: point {x.tolist()} is outside the domain of {args.name}")
    try:
        end = integrate_embedding(EmbeddingOracle(h), x, args.steps)
    except (OffImageError, IntegrationError) as exc:
        raise _Fail(EXIT_NUMERIC, f"error: {exc}") from None
    want = np.concatenate([h(x), np.zeros_like(x)])
    print("endpoint = " + ",".join(repr(float(v)) for v in end))
    print("target   = " + ",".join(repr(float(v)) for v in want))
    print(f"max error = {float(np.max(np.abs(end - want))):.3e}")
    return EXIT_OK


def _demo_runs(name: str, seed: int, epochs: int | None):
    """``(restricted, augmented)`` final losses for one counterexample."""
    if name == "negation":
        base = default_config("negation-iresnet").with_overrides({"seed": seed})
        if epochs:
            base.optim.epochs = epochs
        lo = run_negation_iresnet(base.with_overrides({"model.d": 0})).final_test_loss
        hi = run_negation_iresnet(base.with_overrides({"model.d": 1})).final_test_loss
        return ("i-ResNet width 1", lo), ("i-ResNet width 2", hi)
    if name == "radial-swap":
        base = default_config("augmentation-sweep").with_overrides({"seed": seed})
        d_aug = 2
    else:
        base = default_config("negation-odenet").with_overrides({"seed": seed, "model.target": name})
        d_aug = base.model.d
    if epochs:
        base.optim.epochs = epochs
    p = get_homeomorphism(name).p
    lo = run_flow_regression(base, 0, write=False)[0].final_train_loss
    hi = run_flow_regression(base, d_aug, write=False)[0].final_train_loss
    return (f"ODE-Net q={p}", lo), (f"ODE-Net q={p + d_aug}", hi)


def cmd_demo_counterexample(args) -> int:
    names = [c.name for c in counterexample_suite()] + ["identity"]
    if args.name not in names:
        raise _Fail(EXIT_USAGE, f"error: unknown counterexample {args.name!r}; choose from {', '.join(names)}")
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    (lab_r, loss_r), (lab_a, loss_a) = _demo_runs(args.name, seed, args.epochs)
    ratio = loss_r / loss_a if loss_a > 0 else float("inf")
    print(f"{'model':<20} {'final loss':>14}")
    print(f"{lab_r:<20} {loss_r:>14.6g}")
    print(f"{lab_a:<20} {loss_a:>14.6g}")
    print(f"ratio restricted/augmented = {ratio:.6g}")
    if args.out:
        atomic_write_json(Path(args.out) / "demo.json", {"name": args.name, "seed": seed, "restricted": loss_r,
                                                         "augmented": loss_a, "ratio": ratio})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowcap", description="Augmented ODE-Net and i-ResNet experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{train,invert,oracle,demo-counterexample,sweep}")

    p = sub.add_parser("train", help="run one experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. optim.lr=0.001")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invert", help="preimage of a point under a saved model")
    p.add_argument("model", help="model.json written by train")
    p.add_argument("y", help="comma-separated output values")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=500)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("oracle", help="integrate the analytic embedding flow for a registered map")
    p.add_argument("name")
    p.add_argument("x", help="comma-separated point")
    p.add_argument("steps", type=int, nargs="?", default=1000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("demo-counterexample", help="restricted vs augmented training on an obstructed map")
    p.add_argument("name")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_demo_counterexample)

    p = sub.add_parser("sweep", help="augmentation sweep over d")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    # let "-3,0" through as a positional value
    for parser in [ap, *sub.choices.values()]:
        parser._negative_number_matcher = _NEGATIVE_VECTOR
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
