"""scikit-learn style front end over :func:`csoba.algorithms.run`."""

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .algorithms import AlgoConfig, run
from .compressors import IDENTITY
from .exceptions import InputError
from .problems.base import BilevelProblem


class SOBASolver(BaseEstimator):
    """Fit a distributed bilevel problem with one of the SOBA recursions.

    ``fit`` takes a :class:`BilevelProblem` where scikit-learn would take ``X``.
    After fitting, ``x_``, ``y_`` and ``z_`` hold the final iterate and
    ``trace_`` the per-round measurements.
    """

    def __init__(self, algo="CSoba", alpha=0.01, beta=0.01, gamma=0.01, theta=None,
                 rho=None, delta_u=None, delta_l=None, R=1, upper_comp=IDENTITY,
                 lower_comp=IDENTITY, n_rounds=1000, random_state=0, record_every=1):
        self.algo = algo
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.theta = theta
        self.rho = rho
        self.delta_u = delta_u
        self.delta_l = delta_l
        self.R = R
        self.upper_comp = upper_comp
        self.lower_comp = lower_comp
        self.n_rounds = n_rounds
        self.random_state = random_state
        self.record_every = record_every

    def _config(self):
        return AlgoConfig(self.algo, self.alpha, self.beta, self.gamma, theta=self.theta,
                          rho=self.rho, delta_u=self.delta_u, delta_l=self.delta_l, R=self.R,
                          upper_comp=self.upper_comp, lower_comp=self.lower_comp)

    def fit(self, problem, y=None):
        if not isinstance(problem, BilevelProblem):
            raise InputError(f"fit expects a BilevelProblem, got {type(problem).__name__}")
        cfg = self._config().resolve(problem)
        seed = 0 if self.random_state is None else int(self.random_state)
        trace = run(cfg, problem, self.n_rounds, seed, record_every=self.record_every)
        server, _ = trace.final_state
        self.config_ = cfg
        self.trace_ = trace
        self.x_, self.y_, self.z_ = server.x, server.y, server.z
        self.n_workers_ = problem.n_workers
        return self

    def predict(self, problem=None):
        """Return the fitted upper-level variable."""
        check_is_fitted(self, "x_")
        return self.x_.copy()

    def score(self, problem=None, y=None):
        """Negative final squared hypergradient norm (higher is better)."""
        check_is_fitted(self, "trace_")
        last = self.trace_.rows[-1].grad_norm_sq
        if last is None:
            raise InputError("score needs a problem with an analytic oracle")
        return -last
