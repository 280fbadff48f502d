from .backend import BACKEND
from . import layers
from .gradcheck import grad_check

__all__ = ["BACKEND", "layers", "grad_check"]
