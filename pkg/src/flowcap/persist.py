"""Model files and atomic output writes."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .iresnet import IResNet
from .mlp import Mlp
from .odenet import OdeBlock, integrate, inverse as ode_inverse


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


@dataclass
class CappedOdeNet:
    """ODE block followed by a trainable affine read-out."""

    block: OdeBlock
    cap: Mlp

    def params(self):
        return [*self.block.params(), *self.cap.params()]

    def __call__(self, x):
        return self.cap(integrate(self.block, x))

    def to_dict(self) -> dict:
        return {"kind": "capped-odenet", "block": self.block.to_dict(), "cap": self.cap.spec(),
                "cap_store": self.cap.store.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "CappedOdeNet":
        store = ParamStore.from_dict(doc["cap_store"])
        spec = doc["cap"]
        cap = Mlp.attach(store, spec["sizes"], spec["activation"], spec["bias"], spec["prefix"])
        return cls(OdeBlock.from_dict(doc["block"]), cap)


def model_to_dict(model) -> dict:
    return model.to_dict()


def model_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "odenet":
        return OdeBlock.from_dict(doc)
    if kind == "iresnet":
        return IResNet.from_dict(doc)
    if kind == "capped-odenet":
        return CappedOdeNet.from_dict(doc)
    if kind == "constructed-iresnet":
        from .construct import build_iresnet_for, get_homeomorphism

        return build_iresnet_for(get_homeomorphism(doc["homeomorphism"]), doc["k"], strict=doc.get("strict", False))
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    atomic_write_json(path, model_to_dict(model))


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def invert(model, y, tol: float = 1e-10, max_iters: int = 100) -> tuple[np.ndarray, float]:
    """Preimage of ``y`` under an ODE block or an i-ResNet, with the round-trip residual."""
    y = np.asarray(y, dtype=np.float64)
    if isinstance(model, OdeBlock):
        x = ode_inverse(model, y)
        return x, float(np.max(np.abs(integrate(model, x) - y)))
    if isinstance(model, IResNet):
        return model.inverse(y, tol=tol, max_iters=max_iters, return_residual=True)
    raise TypeError(f"cannot invert a {type(model).__name__}")
