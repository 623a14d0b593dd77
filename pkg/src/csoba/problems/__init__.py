from .base import (
    AnalyticOracle,
    BilevelOracle,
    BilevelProblem,
    Directions,
    OracleSample,
    compute_directions,
    compute_directions_accumulated,
    hypergrad,
)
from .logistic import LogisticAnalytic, LogisticOracle, make_logistic_hpo, tiny_logistic
from .quadratic import (
    QuadraticAnalytic,
    QuadraticBilevelSpec,
    QuadraticOracle,
    make_quadratic,
    quadratic_from_arrays,
    scalar_problem,
)

__all__ = [
    "AnalyticOracle", "BilevelOracle", "BilevelProblem", "Directions", "OracleSample",
    "compute_directions", "compute_directions_accumulated", "hypergrad",
    "LogisticAnalytic", "LogisticOracle", "make_logistic_hpo", "tiny_logistic",
    "QuadraticAnalytic", "QuadraticBilevelSpec", "QuadraticOracle", "make_quadratic",
    "quadratic_from_arrays", "scalar_problem",
]
