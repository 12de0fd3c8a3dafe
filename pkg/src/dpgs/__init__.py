"""Dynamic probabilistic Gaussian decomposition: a desk-scale differentiable splatting library."""

import os

# the TBB layer shipped on many distros is too old for numba and warns on every import
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .core import (CATEGORIES, AugmentedGaussian, Category, CategoryProbs, FrameRecord,  # noqa: E402
                   GaussianScene, PinholeCamera, category_probs, hard_label, init_from_pointcloud)
from .errors import (ContractViolation, DPGSError, FormatError, InvalidInput, IoError,  # noqa: E402
                     NumericalError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES", "AugmentedGaussian", "Category", "CategoryProbs", "FrameRecord",
    "GaussianScene", "PinholeCamera", "category_probs", "hard_label", "init_from_pointcloud",
    "ContractViolation", "DPGSError", "FormatError", "InvalidInput", "IoError",
    "NumericalError", "UsageError",
]
