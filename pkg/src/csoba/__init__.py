"""Distributed stochastic bilevel optimization with compressed communication."""

from .algorithms import (
    DEFAULT_STEPSIZE_GRID,
    Algo,
    AlgoConfig,
    RoundOutcome,
    ServerState,
    WorkerState,
    clip,
    round_c_soba,
    round_cm_soba,
    round_ef_soba,
    round_msc_variant,
    round_nc_soba,
    run,
)
from .compressors import (
    CompressedMessage,
    CompressorSpec,
    bit_cost,
    compress,
    compress_many,
    msc_compress,
    omega_of,
    recommended_k_pair,
)
from .estimator import SOBASolver
from .exceptions import (
    ConfigError,
    ConsistencyError,
    DivergenceError,
    InfeasibleError,
    InputError,
    InvalidSpecError,
    SearchFailure,
    SobaError,
    UnsupportedError,
)
from .metrics import RunTrace, TraceRow, averaged_stationarity, measure, read_csv, write_csv
from .problems import (
    BilevelProblem,
    QuadraticBilevelSpec,
    compute_directions,
    compute_directions_accumulated,
    hypergrad,
    make_logistic_hpo,
    make_quadratic,
)
from .simnet import BitLedger, RngStream, record, substream

__version__ = "0.1.0"
