import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .._validation import check_positive_int, check_vector
from ..exceptions import InputError, UnsupportedError


class OracleSample(NamedTuple):
    """Stochastic oracle outputs drawn from ONE sample pair (phi, xi).

    Arrays carry a leading batch axis when the draw was requested with ``size``.
    """

    grad_x_F: np.ndarray
    grad_y_F: np.ndarray
    grad_y_G: np.ndarray
    jvp_xy_G: np.ndarray  # d^2_xy G(x, y; xi) @ z
    jvp_yy_G: np.ndarray  # d^2_yy G(x, y; xi) @ z


@dataclass
class Directions:
    Dx: np.ndarray
    Dy: np.ndarray
    Dz: np.ndarray

    @classmethod
    def from_sample(cls, s):
        return cls(s.jvp_xy_G + s.grad_x_F, s.grad_y_G, s.jvp_yy_G + s.grad_y_F)


class BilevelOracle(ABC):
    """Stochastic first/second-order oracle of one worker's (f_i, g_i) pair.

    Jacobians only ever appear as Jacobian-vector products.
    """

    worker_id: int
    d_x: int
    d_y: int
    sigma: Optional[float]

    # population quantities
    @abstractmethod
    def grad_f(self, x, y):
        """Return (grad_x f_i, grad_y f_i)."""

    @abstractmethod
    def grad_y_g(self, x, y):
        ...

    @abstractmethod
    def jvp_xy_g(self, x, y, z):
        ...

    @abstractmethod
    def jvp_yy_g(self, x, y, z):
        ...

    @abstractmethod
    def sample(self, x, y, z, rng, repeats=1, size=None):
        """Draw stochastic oracle outputs, each averaged over ``repeats`` samples.

        ``repeats=1`` must reproduce the single-sample draw exactly.
        """


class AnalyticOracle(ABC):
    """Ground truth for the averaged problem: y*, z*, grad Phi, Phi."""

    @abstractmethod
    def y_star(self, x):
        ...

    @abstractmethod
    def z_star(self, x):
        ...

    @abstractmethod
    def hypergrad(self, x):
        ...

    @abstractmethod
    def phi_value(self, x):
        ...


@dataclass
class BilevelProblem:
    oracles: list
    analytic: Optional[AnalyticOracle] = None
    x0: np.ndarray = None
    y0: np.ndarray = None
    rho: Optional[float] = None
    name: str = "problem"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.oracles:
            raise InputError("a problem needs at least one worker oracle")
        d_x, d_y = self.oracles[0].d_x, self.oracles[0].d_y
        for o in self.oracles:
            if (o.d_x, o.d_y) != (d_x, d_y):
                raise InputError("all workers must share (d_x, d_y)")
        self.x0 = np.zeros(d_x) if self.x0 is None else check_vector(self.x0, d_x, "x0")
        self.y0 = np.zeros(d_y) if self.y0 is None else check_vector(self.y0, d_y, "y0")

    @property
    def n_workers(self):
        return len(self.oracles)

    @property
    def d_x(self):
        return self.oracles[0].d_x

    @property
    def d_y(self):
        return self.oracles[0].d_y

    def digest(self):
        blob = json.dumps({"name": self.name, "params": self.params}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_xyz(oracle, x, y, z):
    x = check_vector(x, oracle.d_x, "x")
    y = check_vector(y, oracle.d_y, "y")
    z = check_vector(z, oracle.d_y, "z")
    return x, y, z


def compute_directions(oracle, x, y, z, rng):
    """Local directions (Dx, Dy, Dz) from a single fresh sample pair."""
    x, y, z = _check_xyz(oracle, x, y, z)
    return Directions.from_sample(oracle.sample(x, y, z, rng))


def compute_directions_accumulated(oracle, x, y, z, rounds, rng):
    """Directions averaged over ``rounds`` independent sample pairs."""
    rounds = check_positive_int(rounds, "rounds", error=InputError)
    x, y, z = _check_xyz(oracle, x, y, z)
    return Directions.from_sample(oracle.sample(x, y, z, rng, repeats=rounds))


def hypergrad(analytic, x):
    if analytic is None:
        raise UnsupportedError("this problem has no analytic oracle")
    return analytic.hypergrad(x)
