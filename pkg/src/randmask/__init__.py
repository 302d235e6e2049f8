"""Random sparse masks for parameter-efficient fine-tuning.

Subpackages and modules:

``linalg``         eigen solvers, pseudo-inverses and seeded random streams
``masking``        random masks and sparse updates
``linreg``         masked least squares: gradient descent and its closed form
``concentration``  Monte-Carlo checks of masked spectra
``sandbox``        small MLPs with masked, LoRA and full fine-tuning
``sweep``          ratio x learning-rate grid search
``cli``            the ``randmask`` command
"""
__version__ = "0.1.0"

from .exceptions import (
    ConvergenceError,
    InvalidInputError,
    NoValidCellError,
    NumericError,
    PreconditionError,
    PretrainingFailedError,
)
from .linalg import RngStream, Spectrum, gram_pinv, power_method_norm, sym_eigen
from .linreg import MaskedLinearRegression, RegressionProblem
from .masking import Mask, SparseUpdate, gen_random_mask, gen_structured_mask
from .sandbox import RandomMaskingClassifier

__all__ = [
    "ConvergenceError", "InvalidInputError", "NoValidCellError", "NumericError",
    "PreconditionError", "PretrainingFailedError", "RngStream", "Spectrum", "gram_pinv",
    "power_method_norm", "sym_eigen", "MaskedLinearRegression", "RegressionProblem", "Mask",
    "SparseUpdate", "gen_random_mask", "gen_structured_mask", "RandomMaskingClassifier",
]
