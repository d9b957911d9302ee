"""Low-rank matrix-covariate GLMs: estimation, sandwich inference and resampling tests."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConvergenceError,
    DegenerateCovarianceError,
    IllPosedError,
    LowRankError,
    NumericalError,
    ValidationError,
)
from .model import (  # noqa: E402
    CoefVector,
    CvGrid,
    FactorParams,
    Family,
    FitResult,
    MatrixDataset,
    ModelSpec,
    beta_of_theta,
    effective_params,
)
from .estimator import fit, fit_alternating, select_lambda_cv  # noqa: E402
from .testing import StatisticKind, resampling_test  # noqa: E402

__all__ = [
    "CoefVector",
    "ConvergenceError",
    "CvGrid",
    "DegenerateCovarianceError",
    "FactorParams",
    "Family",
    "FitResult",
    "IllPosedError",
    "LowRankError",
    "MatrixDataset",
    "ModelSpec",
    "NumericalError",
    "StatisticKind",
    "ValidationError",
    "beta_of_theta",
    "effective_params",
    "fit",
    "fit_alternating",
    "resampling_test",
    "select_lambda_cv",
]
