"""Dense-array engine: autodiff tensors, counter-based RNG, UPTN files."""

from .gradcheck import finite_diff_grad, relative_error
from .kernels import BACKEND
from .rng import RandomStream, rng_normal
from .tensor import Tensor, as_tensor, backward, no_grad, softmax
from .uptn import read_tensor, write_tensor

__all__ = [
    "BACKEND",
    "RandomStream",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_diff_grad",
    "no_grad",
    "read_tensor",
    "relative_error",
    "rng_normal",
    "softmax",
    "write_tensor",
]
