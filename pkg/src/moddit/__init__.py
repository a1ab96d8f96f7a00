"""Per-token modulation offsets for a miniature flow-matching DiT.

A reference image is turned into additive offsets on the modulation
conditioning of individual text tokens, so one subject phrase in a caption
can be steered toward the reference identity while the rest of the scene
keeps the base model's behaviour. The package ships the full desk-scale
stack: a numpy autodiff engine, toy text/image encoders, the modulated
transformer backbone, the offset adapter, regularized training, a
synthetic shapes dataset, and a detection-based benchmark.
"""

from .autodiff import Tensor, backward, no_grad
from .errors import InvariantError, ValidationError
from .gradcheck import grad_check
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "grad_check",
    "Rng",
    "ValidationError",
    "InvariantError",
    "__version__",
]
