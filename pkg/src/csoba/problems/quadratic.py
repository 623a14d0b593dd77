"""Quadratic bilevel suite with closed-form ground truth.

Worker ``i`` owns::

    g_i(x, y) = 1/2 y'A_i y - x'B_i y + c_i'y
    f_i(x, y) = 1/2 ||y - t_i||^2 + mu_x/2 ||x||^2

so y*(x) = Abar^{-1}(Bbar'x - cbar) and every hypergradient quantity is exact.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .._rng import as_generator
from .._validation import check_positive_float, check_positive_int, check_vector
from ..exceptions import ConsistencyError, InvalidSpecError
from .base import AnalyticOracle, BilevelOracle, BilevelProblem, OracleSample


@dataclass(frozen=True)
class QuadraticBilevelSpec:
    n: int = 4
    d_x: int = 5
    d_y: int = 3
    mu_g: float = 0.5
    L_g: float = 2.0
    mu_x: float = 0.5
    hetero: float = 0.0
    sigma: float = 0.0
    seed: int = 0
    domain_radius: float = 10.0
    x0_scale: float = 0.0

    def __post_init__(self):
        for name in ("n", "d_x", "d_y"):
            check_positive_int(getattr(self, name), name)
        check_positive_float(self.mu_g, "mu_g")
        check_positive_float(self.L_g, "L_g")
        check_positive_float(self.mu_x, "mu_x")
        check_positive_float(self.domain_radius, "domain_radius")
        if self.L_g < self.mu_g:
            raise InvalidSpecError(f"L_g ({self.L_g}) must be >= mu_g ({self.mu_g})")
        if not (np.isfinite(self.hetero) and self.hetero >= 0):
            raise InvalidSpecError(f"hetero must be >= 0, got {self.hetero}")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise InvalidSpecError(f"sigma must be >= 0, got {self.sigma}")
        if not (np.isfinite(self.x0_scale) and self.x0_scale >= 0):
            raise InvalidSpecError(f"x0_scale must be >= 0, got {self.x0_scale}")


class QuadraticOracle(BilevelOracle):
    """Exact quadratic worker plus additive Gaussian oracle noise.

    Noise is scaled so that every oracle meets the variance bound ``sigma**2``
    in Euclidean norm: the joint gradient of F gets per-coordinate variance
    sigma^2/(d_x + d_y), grad_y G gets sigma^2/d_y, and Jacobian samples are
    J + E with E iid N(0, sigma^2 / (rows*cols)) entries, so ``E @ z`` is
    Gaussian with per-coordinate variance sigma^2 ||z||^2 / (rows*cols).
    """

    def __init__(self, worker_id, A, B, c, t, mu_x, sigma=0.0):
        self.worker_id = worker_id
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        self.mu_x = float(mu_x)
        self.sigma = float(sigma)
        self.d_x, self.d_y = self.B.shape

    def grad_f(self, x, y):
        return self.mu_x * x, y - self.t

    def grad_y_g(self, x, y):
        return self.A @ y - self.B.T @ x + self.c

    def jvp_xy_g(self, x, y, z):
        return -(self.B @ z)

    def jvp_yy_g(self, x, y, z):
        return self.A @ z

    def sample(self, x, y, z, rng, repeats=1, size=None):
        gx, gy = self.grad_f(x, y)
        pop = (gx, gy, self.grad_y_g(x, y), self.jvp_xy_g(x, y, z), self.jvp_yy_g(x, y, z))
        if self.sigma == 0.0:
            if size is None:
                return OracleSample(*pop)
            return OracleSample(*(np.broadcast_to(p, (size,) + p.shape).copy() for p in pop))

        gen = as_generator(rng)
        d_x, d_y, s = self.d_x, self.d_y, self.sigma
        # one draw per sample, split as [grad_x F | grad_y F | grad_y G | JVP_xy | JVP_yy]
        width = 2 * d_x + 3 * d_y
        lead = (repeats,) if size is None else (size, repeats)
        E = gen.standard_normal(lead + (width,))
        E = E[..., 0, :] if repeats == 1 else E.mean(axis=-2)
        znorm = np.sqrt(z @ z)
        scales = (s / np.sqrt(d_x + d_y), s / np.sqrt(d_x + d_y), s / np.sqrt(d_y),
                  s * znorm / np.sqrt(d_x * d_y), s * znorm / d_y)
        cuts = np.cumsum([0, d_x, d_y, d_y, d_x, d_y])
        return OracleSample(*(p + E[..., a:b] * c for p, a, b, c in zip(pop, cuts[:-1], cuts[1:], scales)))


class QuadraticAnalytic(AnalyticOracle):
    def __init__(self, oracles, mu_g, domain_radius):
        n = len(oracles)
        self.mu_x = oracles[0].mu_x
        self.A_bar = sum(o.A for o in oracles) / n
        self.B_bar = sum(o.B for o in oracles) / n
        self.c_bar = sum(o.c for o in oracles) / n
        self.t_bar = sum(o.t for o in oracles) / n
        self._targets = [o.t for o in oracles]
        self._chol = cho_factor(self.A_bar)
        self.mu_g = float(mu_g)
        self.domain_radius = float(domain_radius)

        # sup over ||x|| <= r of max_i ||grad_y f_i(x, y*(x))||
        lin = cho_solve(self._chol, self.B_bar.T)
        off = cho_solve(self._chol, self.c_bar)
        self.grad_y_f_bound = (np.linalg.norm(lin, 2) * self.domain_radius
                               + max(np.linalg.norm(off + t) for t in self._targets))

    @property
    def rho_default(self):
        return self.grad_y_f_bound / self.mu_g

    def y_star(self, x):
        return cho_solve(self._chol, self.B_bar.T @ x - self.c_bar)

    def z_star(self, x):
        return -cho_solve(self._chol, self.y_star(x) - self.t_bar)

    def hypergrad(self, x):
        x = check_vector(x, self.B_bar.shape[0])
        return self.mu_x * x - self.B_bar @ self.z_star(x)

    def phi_value(self, x):
        x = check_vector(x, self.B_bar.shape[0])
        ys = self.y_star(x)
        upper = np.mean([0.5 * np.sum((ys - t) ** 2) for t in self._targets])
        return float(upper + 0.5 * self.mu_x * (x @ x))

    def x_star(self):
        """Unique stationary point of Phi (Phi is strongly convex here)."""
        M = cho_solve(self._chol, self.B_bar.T)  # dy* / dx transposed
        H = M.T @ M + self.mu_x * np.eye(self.B_bar.shape[0])
        rhs = M.T @ (cho_solve(self._chol, self.c_bar) + self.t_bar)
        return np.linalg.solve(H, rhs)


def _check_spd(A, lo, hi, worker, error=ConsistencyError):
    eig = np.linalg.eigvalsh(A)
    tol = 1e-9 * max(1.0, abs(eig[-1]))
    if not np.allclose(A, A.T) or eig[0] < lo - tol or eig[-1] > hi + tol:
        raise error(
            f"worker {worker}: lower Hessian spectrum [{eig[0]:.4g}, {eig[-1]:.4g}] "
            f"outside [{lo}, {hi}]"
        )


def make_quadratic(spec):
    """Build the seeded quadratic suite described by ``spec``.

    Per-worker deviations are centered, so the averaged problem (and therefore
    y*, z*, grad Phi) does not depend on ``hetero``. With ``x0_scale > 0`` the
    start point is a random direction of that norm (its own stream, so the
    problem data do not change); otherwise x starts at zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n, d_x, d_y = spec.n, spec.d_x, spec.d_y
    margin = (spec.L_g - spec.mu_g) / 4.0

    eigs = rng.uniform(spec.mu_g + margin, spec.L_g - margin, d_y)
    Q, _ = np.linalg.qr(rng.standard_normal((d_y, d_y)))
    A_bar = (Q * eigs) @ Q.T
    A_bar = 0.5 * (A_bar + A_bar.T)
    # Gaussian d_x-by-d_y matrices have spectral norm about sqrt(d_x) + sqrt(d_y)
    b_scale = 1.0 / (np.sqrt(d_x) + np.sqrt(d_y))
    B_bar = rng.standard_normal((d_x, d_y)) * b_scale
    c_bar = rng.standard_normal(d_y)
    t_bar = rng.standard_normal(d_y)

    G = rng.standard_normal((n, d_y, d_y))
    dA = 0.5 * (G + G.transpose(0, 2, 1))
    dA -= dA.mean(axis=0)
    top = max(np.abs(np.linalg.eigvalsh(m)).max() for m in dA)
    if top > 0:
        dA /= top
    dB = rng.standard_normal((n, d_x, d_y)) * b_scale
    dB -= dB.mean(axis=0)
    dc = rng.standard_normal((n, d_y))
    dc -= dc.mean(axis=0)
    dt = rng.standard_normal((n, d_y))
    dt -= dt.mean(axis=0)

    b = float(spec.hetero)
    a = margin * b / (1.0 + b)
    oracles = []
    for i in range(n):
        A_i = A_bar + a * dA[i]
        _check_spd(A_i, spec.mu_g, spec.L_g, i)
        oracles.append(QuadraticOracle(i, A_i, B_bar + b * dB[i], c_bar + b * dc[i],
                                       t_bar + b * dt[i], spec.mu_x, spec.sigma))
    x0 = None
    if spec.x0_scale > 0:
        u = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,))).standard_normal(d_x)
        x0 = spec.x0_scale * u / np.linalg.norm(u)
    analytic = QuadraticAnalytic(oracles, spec.mu_g, spec.domain_radius)
    return BilevelProblem(oracles, analytic, x0=x0, rho=analytic.rho_default,
                          name="quadratic", params=asdict(spec))


def quadratic_from_arrays(A, B, c, t, mu_x=1.0, sigma=0.0, mu_g=None,
                          domain_radius=10.0, x0=None, y0=None):
    """Hand-specified quadratic suite: one entry per worker in each of A, B, c, t."""
    A = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in A]
    B = [np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in B]
    c = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in c]
    t = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in t]
    if not (len(A) == len(B) == len(c) == len(t)) or not A:
        raise InvalidSpecError("A, B, c, t need one entry per worker")
    lows = [np.linalg.eigvalsh(a)[0] for a in A]
    if mu_g is None:
        mu_g = min(lows)
    if not mu_g > 0:
        raise InvalidSpecError(f"lower Hessians must be positive definite, smallest eigenvalue {mu_g:.4g}")
    for i, a in enumerate(A):
        _check_spd(a, mu_g, np.inf, i, error=InvalidSpecError)
    oracles = [QuadraticOracle(i, A[i], B[i], c[i], t[i], mu_x, sigma) for i in range(len(A))]
    analytic = QuadraticAnalytic(oracles, mu_g, domain_radius)
    params = {"A": [a.tolist() for a in A], "B": [m.tolist() for m in B],
              "c": [v.tolist() for v in c], "t": [v.tolist() for v in t],
              "mu_x": mu_x, "sigma": sigma, "mu_g": mu_g, "domain_radius": domain_radius}
    return BilevelProblem(oracles, analytic, x0=x0, y0=y0, rho=analytic.rho_default,
                          name="quadratic_arrays", params=params)


def scalar_problem(sigma=0.0, x0: Optional[float] = None):
    """The 1-D instance A = B = 1, c = t = 0, mu_x = 1: y*(x) = x, grad Phi(x) = 2x."""
    return quadratic_from_arrays([[[1.0]]], [[[1.0]]], [[0.0]], [[0.0]], mu_x=1.0,
                                 sigma=sigma, x0=None if x0 is None else [x0])
