"""Augmented neural ODEs, invertible ResNets and the constructions linking them."""
from .autodiff import Tape, Tensor, backward, grad_of
from .construct import build_iresnet_for, cap_field, get_homeomorphism, integrate_embedding
from .iresnet import IResNet, spectral_norm
from .odenet import OdeBlock, integrate, inverse, mlp_field
from .persist import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "grad_of",
    "build_iresnet_for", "cap_field", "get_homeomorphism", "integrate_embedding",
    "IResNet", "spectral_norm",
    "OdeBlock", "integrate", "inverse", "mlp_field",
    "load_model", "save_model",
]
