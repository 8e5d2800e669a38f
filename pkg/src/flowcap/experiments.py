"""Experiment drivers.

Each ``run_*`` function takes an :class:`ExperimentConfig`, trains from a
seeded start, and returns a :class:`MetricsLog`.  With ``config.out`` set it
also writes ``config.json``, ``metrics.csv``, ``summary.json`` and
``model.json`` there, enough to reproduce and reload the run.
"""
from __future__ import annotations

import copy
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .autodiff import Tape, Tensor, backward, columns, make_rng, mse
from .construct import cap_field, get_homeomorphism, integrate_embedding, linear_cap
from .iresnet import IResNet
from .mlp import Mlp
from .odenet import IntegrationError, OdeBlock, integrate, inverse, mlp_field
from .optim import make_optimizer
from .persist import CappedOdeNet, atomic_write_json, atomic_write_text, save_model

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "TrainingDivergence",
    "DataSpec",
    "ModelSpec",
    "OptimSpec",
    "ExperimentConfig",
    "MetricsLog",
    "default_config",
    "run_experiment",
    "run_negation_iresnet",
    "run_negation_odenet",
    "run_flow_regression",
    "run_augmentation_sweep",
    "run_cap_regression",
    "EXPERIMENTS",
]


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


class TrainingDivergence(ArithmeticError):
    def __init__(self, epoch: int, config: "ExperimentConfig"):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}; config: {json.dumps(config.to_dict())}")
        self.epoch = epoch
        self.config = config


# --------------------------------------------------------------------- config


@dataclass
class DataSpec:
    n_train: int = 10_000
    n_test: int = 2_000
    # None: use the target map's own domain
    low: float | None = None
    high: float | None = None


@dataclass
class ModelSpec:
    d: int = 1
    blocks: int = 5
    hidden: list[int] = field(default_factory=list)
    activation: str = "tanh"
    c: float = 0.9
    power_iters: int = 50
    steps: int = 20
    target: str = "negation"
    d_values: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class OptimSpec:
    name: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 128


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    out: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if "experiment" not in doc:
            raise ConfigError("missing key 'experiment'")
        name = doc["experiment"]
        if name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(sorted(EXPERIMENTS))}")
        base = default_config(name)
        _merge(base, doc, "")
        base.validate()
        return base

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        for key, value in overrides.items():
            _set_dotted(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        m, o, d = self.model, self.optim, self.data
        if o.epochs < 1 or o.batch_size < 1 or not o.lr > 0:
            raise ConfigError("optim.epochs, optim.batch_size and optim.lr must be positive")
        if d.n_train < 1 or d.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be positive")
        if (d.low is None) != (d.high is None) or (d.low is not None and not d.low < d.high):
            raise ConfigError("data.low and data.high must both be set with low < high, or both null")
        if m.d < 0 or any(v < 0 for v in m.d_values):
            raise ConfigError("augmentation dims must be >= 0")
        if m.steps < 1 or m.blocks < 1:
            raise ConfigError("model.steps and model.blocks must be >= 1")
        if not 0 < m.c < 1:
            raise ConfigError("model.c must lie in (0, 1)")
        if o.name not in ("sgd", "adam"):
            raise ConfigError(f"optim.name must be 'sgd' or 'adam', got {o.name!r}")
        if self.experiment == "negation-iresnet" and m.d not in (0, 1):
            raise ConfigError("negation-iresnet supports model.d in {0, 1}")


def _merge(obj, doc: dict, prefix: str) -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(current, value, path + ".")
        else:
            setattr(obj, key, _coerce(path, current, value, names[key]))


def _coerce(path: str, current, value, fdef):
    if value is None:
        return None
    want = type(current) if current is not None else None
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float) or (current is None and "float" in str(fdef.type)):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else [v for v in value.split(",") if v]
            return [int(v) for v in value]
        if isinstance(current, str) or (current is None and "str" in str(fdef.type)):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {path!r}: cannot use {value!r} ({exc})") from None
    return value if want is None else want(value)


def _set_dotted(cfg, key: str, raw) -> None:
    parts = key.split(".")
    obj = cfg
    for i, part in enumerate(parts[:-1]):
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if leaf not in fields or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown config key {key!r}")
    value = raw
    if isinstance(raw, str):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
    setattr(obj, leaf, _coerce(key, getattr(obj, leaf), value, fields[leaf]))


def default_config(name: str) -> ExperimentConfig:
    if name == "negation-iresnet":
        return ExperimentConfig(
            name,
            data=DataSpec(10_000, 2_000, -10.0, 10.0),
            model=ModelSpec(d=1, blocks=5, c=0.9, power_iters=50),
            optim=OptimSpec("sgd", 1e-2, 0.9, 100, 128),
        )
    if name == "negation-odenet":
        return ExperimentConfig(
            name,
            data=DataSpec(2_000, 2_000, -10.0, 10.0),
            model=ModelSpec(d=1, hidden=[], steps=20, target="negation"),
            optim=OptimSpec("adam", 1e-2, 0.9, 100, 128),
        )
    if name == "augmentation-sweep":
        return ExperimentConfig(
            name,
            data=DataSpec(1_000, 1_000, None, None),
            model=ModelSpec(hidden=[64], activation="tanh", steps=20, target="radial-swap", d_values=[0, 1, 2, 3, 4]),
            optim=OptimSpec("adam", 1e-2, 0.9, 60, 128),
        )
    if name == "cap-regression":
        return ExperimentConfig(
            name,
            data=DataSpec(1_000, 1_000, -2.0, 2.0),
            model=ModelSpec(d=1, hidden=[16], activation="tanh", steps=20),
            optim=OptimSpec("adam", 1e-2, 0.9, 60, 128),
        )
    raise ConfigError(f"unknown experiment {name!r}")


# --------------------------------------------------------------------- metrics


@dataclass
class MetricsLog:
    experiment: str
    seed: int
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    final_test_mse: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def add(self, epoch: int, train_loss: float, test_loss: float) -> None:
        if self.rows and epoch <= self.rows[-1][0]:
            raise ValueError("epochs must increase strictly")
        self.rows.append((int(epoch), float(train_loss), float(test_loss)))

    @property
    def final_train_loss(self) -> float:
        return self.rows[-1][1]

    @property
    def final_test_loss(self) -> float:
        return self.rows[-1][2]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,test_loss\n")
        for e, tr, te in self.rows:
            buf.write(f"{e},{tr!r},{te!r}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        doc = {
            "experiment": self.experiment,
            "seed": self.seed,
            "final_test_mse": [float(v) for v in self.final_test_mse],
            "wall_seconds": self.wall_seconds,
        }
        doc.update(self.extra)
        return doc


# --------------------------------------------------------------------- training


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _fit(cfg: ExperimentConfig, params, batch_loss: Callable, evaluate: Callable, n_train: int,
         rng: np.random.Generator, metrics: MetricsLog, after_step: Callable | None = None) -> None:
    """Shared epoch loop; ``evaluate()`` returns ``(train_loss, test_loss)``."""
    opt = make_optimizer(cfg.optim.name, params, cfg.optim.lr, cfg.optim.momentum)
    for epoch in range(1, cfg.optim.epochs + 1):
        # overflow is caught explicitly below, so keep numpy quiet about it
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                for idx in _batches(n_train, cfg.optim.batch_size, rng):
                    opt.zero_grad()
                    with Tape() as tape:
                        loss = batch_loss(idx)
                    if not np.isfinite(loss.data):
                        raise TrainingDivergence(epoch, cfg)
                    backward(tape, loss)
                    opt.step()
                    if after_step is not None:
                        after_step()
                tr, te = evaluate()
            except IntegrationError:
                raise TrainingDivergence(epoch, cfg) from None
        if not (np.isfinite(tr) and np.isfinite(te)):
            raise TrainingDivergence(epoch, cfg)
        metrics.add(epoch, tr, te)
        log.debug("%s epoch %d train %.6g test %.6g", cfg.experiment, epoch, tr, te)


def _domain_sampler(target: str, data: DataSpec):
    h = get_homeomorphism(target)
    if data.low is not None:
        h.box = np.tile([data.low, data.high], (h.p, 1))
    return h


def _write_outputs(cfg: ExperimentConfig, metrics: MetricsLog, model=None, extra_files: dict | None = None) -> None:
    if not cfg.out:
        return
    out = Path(cfg.out)
    atomic_write_json(out / "config.json", cfg.to_dict())
    atomic_write_text(out / "metrics.csv", metrics.to_csv())
    if model is not None:
        save_model(model, out / "model.json")
    for name, text in (extra_files or {}).items():
        atomic_write_text(out / name, text)
    atomic_write_json(out / "summary.json", metrics.summary())


def _per_output_mse(pred: np.ndarray, target: np.ndarray) -> list[float]:
    return [float(v) for v in np.mean((pred - target) ** 2, axis=0)]


def run_negation_iresnet(cfg: ExperimentConfig) -> MetricsLog:
    """Five single-linear residual blocks learning ``x -> -x`` on width ``1 + d``."""
    t_start = time.perf_counter()
    d = cfg.model.d
    rng = make_rng(cfg.seed)
    lo, hi = (cfg.data.low, cfg.data.high) if cfg.data.low is not None else (-10.0, 10.0)
    x_tr = rng.uniform(lo, hi, size=(cfg.data.n_train, 1))
    x_te = rng.uniform(lo, hi, size=(cfg.data.n_test, 1))
    pad = lambda a: np.concatenate([a, np.zeros((a.shape[0], d))], axis=1)
    X_tr, Y_tr, X_te, Y_te = pad(x_tr), pad(-x_tr), pad(x_te), pad(-x_te)

    net = IResNet.linear(1 + d, cfg.model.blocks, c=cfg.model.c, seed=cfg.seed, power_iters=cfg.model.power_iters)
    net.normalize(iters=cfg.model.power_iters)
    metrics = MetricsLog(cfg.experiment, cfg.seed)

    def batch_loss(idx):
        return mse(net.forward(Tensor(X_tr[idx])), Y_tr[idx])

    def evaluate():
        return float(np.mean((net.forward(X_tr) - Y_tr) ** 2)), float(np.mean((net.forward(X_te) - Y_te) ** 2))

    _fit(cfg, net.params(), batch_loss, evaluate, cfg.data.n_train, rng, metrics,
         after_step=lambda: net.normalize(iters=1))
    net.normalize(iters=cfg.model.power_iters)

    pred = net.forward(X_te)
    metrics.final_test_mse = _per_output_mse(pred, Y_te)
    slope = float(np.dot(x_te[:, 0], pred[:, 0]) / np.dot(x_te[:, 0], x_te[:, 0]))
    metrics.extra = {
        "mean_test_mse": float(np.mean(metrics.final_test_mse)),
        "slope": slope,
        "final_train_loss": metrics.final_train_loss,
        "block_sigmas": [b.sigmas[0] for b in net.blocks],
    }
    metrics.wall_seconds = time.perf_counter() - t_start
    _write_outputs(cfg, metrics, net)
    return metrics


def _two_part_loss(pred, target_head, p: int, d: int):
    if d == 0:
        return mse(pred, target_head)
    head = columns(pred, 0, p)
    tail = columns(pred, p, p + d)
    return mse(head, target_head) + mse(tail, np.zeros(tail.shape))


def _two_part_np(pred, target_head, p: int, d: int) -> tuple[float, float]:
    head = float(np.mean((pred[:, :p] - target_head) ** 2))
    tail = float(np.mean(pred[:, p:] ** 2)) if d else 0.0
    return head, tail


def run_flow_regression(cfg: ExperimentConfig, d: int | None = None, write: bool = True) -> tuple[MetricsLog, OdeBlock]:
    """Train a ``(p + d)``-ODE-Net on ``[x, 0] -> [h(x), 0]`` for the configured target."""
    t_start = time.perf_counter()
    d = cfg.model.d if d is None else int(d)
    h = _domain_sampler(cfg.model.target, cfg.data)
    p = h.p
    rng = make_rng(cfg.seed)
    x_tr = h.sample(cfg.data.n_train, rng)
    x_te = h.sample(cfg.data.n_test, rng)
    y_tr, y_te = h(x_tr), h(x_te)
    pad = lambda a: np.concatenate([a, np.zeros((a.shape[0], d))], axis=1)
    X_tr, X_te = pad(x_tr), pad(x_te)

    field = mlp_field(p + d, tuple(cfg.model.hidden), cfg.model.activation, seed=cfg.seed)
    block = OdeBlock(field, 0.0, 1.0, cfg.model.steps)
    metrics = MetricsLog(cfg.experiment, cfg.seed)

    def batch_loss(idx):
        return _two_part_loss(integrate(block, Tensor(X_tr[idx])), y_tr[idx], p, d)

    def evaluate():
        return sum(_two_part_np(integrate(block, X_tr), y_tr, p, d)), sum(_two_part_np(integrate(block, X_te), y_te, p, d))

    _fit(cfg, block.params(), batch_loss, evaluate, cfg.data.n_train, rng, metrics)

    pred = integrate(block, X_te)
    head, tail = _two_part_np(pred, y_te, p, d)
    metrics.final_test_mse = [head, tail] if d else [head]
    back = inverse(block, pred)
    back_from_target = inverse(block, pad(y_te))
    metrics.extra = {
        "d": d,
        "target": cfg.model.target,
        "final_train_loss": metrics.final_train_loss,
        "inverse_roundtrip": float(np.max(np.abs(back[:, :p] - x_te))),
        "inverse_from_target": float(np.max(np.abs(back_from_target[:, :p] - x_te))),
    }
    metrics.wall_seconds = time.perf_counter() - t_start
    if write:
        _write_outputs(cfg, metrics, block)
    return metrics, block


def run_negation_odenet(cfg: ExperimentConfig) -> MetricsLog:
    return run_flow_regression(cfg)[0]


def run_augmentation_sweep(cfg: ExperimentConfig) -> dict[int, MetricsLog]:
    """One flow-regression run per ``d`` in ``model.d_values`` with a shared seed."""
    t_start = time.perf_counter()
    results: dict[int, MetricsLog] = {}
    for d in cfg.model.d_values:
        sub = copy.deepcopy(cfg)
        sub.model.d = d
        sub.out = str(Path(cfg.out) / f"d{d}") if cfg.out else None
        results[d] = run_flow_regression(sub, d)[0]
    if cfg.out:
        lines = ["d,final_train_loss,final_test_loss,head_test_mse,tail_test_mse"]
        for d, m in results.items():
            tail = m.final_test_mse[1] if len(m.final_test_mse) > 1 else 0.0
            lines.append(f"{d},{m.final_train_loss!r},{m.final_test_loss!r},{m.final_test_mse[0]!r},{tail!r}")
        out = Path(cfg.out)
        atomic_write_json(out / "config.json", cfg.to_dict())
        atomic_write_text(out / "sweep.csv", "\n".join(lines) + "\n")
        atomic_write_json(
            out / "summary.json",
            {
                "experiment": cfg.experiment,
                "seed": cfg.seed,
                "d_values": list(results),
                "final_test_mse": [m.final_test_loss for m in results.values()],
                "final_train_loss": [m.final_train_loss for m in results.values()],
                "wall_seconds": time.perf_counter() - t_start,
            },
        )
    return results


def sweep_table(results: dict[int, MetricsLog]) -> list[tuple[int, float, float]]:
    return [(d, m.final_train_loss, m.final_test_loss) for d, m in results.items()]


def run_cap_regression(cfg: ExperimentConfig) -> MetricsLog:
    """``x -> x^2`` on a ``(1 + 1)``-ODE-Net read out by a trainable affine cap."""
    t_start = time.perf_counter()
    p, r = 1, cfg.model.d if cfg.model.d > 0 else 1
    rng = make_rng(cfg.seed)
    lo, hi = (cfg.data.low, cfg.data.high) if cfg.data.low is not None else (-2.0, 2.0)
    x_tr = rng.uniform(lo, hi, size=(cfg.data.n_train, p))
    x_te = rng.uniform(lo, hi, size=(cfg.data.n_test, p))
    y_tr, y_te = x_tr**2, x_te**2
    pad = lambda a: np.concatenate([a, np.zeros((a.shape[0], r))], axis=1)
    X_tr, X_te = pad(x_tr), pad(x_te)

    field = mlp_field(p + r, tuple(cfg.model.hidden), cfg.model.activation, seed=cfg.seed)
    model = CappedOdeNet(OdeBlock(field, 0.0, 1.0, cfg.model.steps),
                         Mlp([p + r, 1], bias=True, seed=cfg.seed + 1, prefix="cap."))
    metrics = MetricsLog(cfg.experiment, cfg.seed)

    def batch_loss(idx):
        return mse(model.cap(integrate(model.block, Tensor(X_tr[idx]))), y_tr[idx])

    def evaluate():
        return float(np.mean((model(X_tr) - y_tr) ** 2)), float(np.mean((model(X_te) - y_te) ** 2))

    _fit(cfg, model.params(), batch_loss, evaluate, cfg.data.n_train, rng, metrics)

    metrics.final_test_mse = [float(np.mean((model(X_te) - y_te) ** 2))]
    analytic = OdeBlock(cap_field(lambda x: x**2, p, 1), 0.0, 1.0, cfg.model.steps)
    cap_out = integrate(analytic, X_te) @ linear_cap(p, 1).T
    metrics.extra = {
        "ode_width": p + r,
        "final_train_loss": metrics.final_train_loss,
        "analytic_cap_mse": float(np.mean((cap_out - y_te) ** 2)),
    }
    metrics.wall_seconds = time.perf_counter() - t_start
    _write_outputs(cfg, metrics, model)
    return metrics


EXPERIMENTS: dict[str, Callable] = {
    "negation-iresnet": run_negation_iresnet,
    "negation-odenet": run_negation_odenet,
    "augmentation-sweep": run_augmentation_sweep,
    "cap-regression": run_cap_regression,
}


def run_experiment(cfg: ExperimentConfig):
    return EXPERIMENTS[cfg.experiment](cfg)


def witness_error(target: str, n: int = 100, steps: int = 1000, seed: int = 0) -> float:
    """Max endpoint error of the analytic embedding flow on ``n`` domain points."""
    from .construct import EmbeddingOracle

    h = get_homeomorphism(target)
    x = h.sample(n, make_rng(seed))
    y = integrate_embedding(EmbeddingOracle(h), x, steps)
    return float(np.max(np.abs(y - np.concatenate([h(x), np.zeros_like(x)], axis=-1))))
