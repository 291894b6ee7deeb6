"""Structure-guided low-light image enhancement, built on a small
numpy-backed reverse-mode autodiff kernel."""

__version__ = "0.1.0"

from .precision import get_precision, precision, set_precision  # noqa: F401
from .tensor import Tensor, no_grad  # noqa: F401
