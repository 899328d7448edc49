"""Cross-lingual multiple-choice transfer with gated split embeddings.

The package trains a small transformer encoder whose token states are split
by a learned attention gate into a "shared signal" embedding and a residual
"everything else" embedding, then aligns the shared part across two
languages with cosine losses. All math runs on a float64 autograd engine in
:mod:`cskt.tensor`; hot kernels live in :mod:`cskt._kernels` with an
optional compiled backend.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .tensor import (
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    cosine_similarity,
    cross_entropy,
    grad_check,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "grad_check",
    "no_grad",
    "cosine_similarity",
    "cross_entropy",
    "KERNEL_BACKEND",
    "__version__",
]
