"""Shadow removal with scene-prior-guided attention and adaptive dual-branch fusion."""

__version__ = "0.1.0"

from .autodiff import Tensor, Parameter, Module, grad_check, param_init_normal  # noqa: F401
