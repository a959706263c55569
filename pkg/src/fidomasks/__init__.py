"""fidomasks: perturbation-based attribution masks via concrete dropout.

Implements the FIDO mask-optimization loop over a minimal tape-based autodiff
engine, with both the original chained concrete-dropout sampler and the
numerically stable simplified sigmoid form, plus the synthetic benchmark,
evaluation metrics and test-time-augmentation utilities around it.
"""

from fidomasks.tensor import NonFiniteError, Tape, Tensor, permissive

__version__ = "0.1.0"

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "permissive",
    "__version__",
]
