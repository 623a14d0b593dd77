"""Hyperparameter optimisation for l2-regularised logistic regression.

Upper variable lam holds per-feature log regularisation weights, lower
variable w the classifier. Worker i sees

    g_i(lam, w) = mean train logistic loss + 1/2 sum_j exp(lam_j) w_j^2
    f_i(lam, w) = mean validation logistic loss

and stochastic oracles draw minibatches (with replacement) from the worker's
own data.
"""

import numpy as np
from scipy.special import expit

from .._rng import as_generator
from .._validation import check_positive_float, check_positive_int, check_vector
from ..exceptions import InvalidSpecError
from .base import AnalyticOracle, BilevelOracle, BilevelProblem, OracleSample

_TRUTH_KEY = 2**32 - 1
_MAX_ATTEMPTS = 100


def _margins(X, yv, w):
    return yv * (X @ w)


def _loss(X, yv, w):
    return np.logaddexp(0.0, -_margins(X, yv, w)).mean(axis=-1)


def _grad(X, yv, w):
    # d/dw log(1 + exp(-y x'w)) = -y x sigmoid(-y x'w)
    coef = -yv * expit(-_margins(X, yv, w))
    return np.einsum("...b,...bp->...p", coef, X) / X.shape[-2]


def _hvp(X, w, v):
    s = expit(X @ w)
    curv = s * (1.0 - s)
    return np.einsum("...b,...bp->...p", curv * (X @ v), X) / X.shape[-2]


def _hessian(X, w):
    s = expit(X @ w)
    return (X.T * (s * (1.0 - s))) @ X / X.shape[0]


class LogisticOracle(BilevelOracle):
    """Minibatch oracle for one worker's (f_i, g_i); x = lam, y = w."""

    sigma = None  # variance bound depends on data; not declared

    def __init__(self, worker_id, X_train, y_train, X_val, y_val, batch_size=50):
        self.worker_id = worker_id
        self.X_train, self.y_train = X_train, y_train
        self.X_val, self.y_val = X_val, y_val
        self.batch_size = check_positive_int(batch_size, "batch_size")
        self.d_x = self.d_y = X_train.shape[1]

    def grad_f(self, x, y):
        return np.zeros(self.d_x), _grad(self.X_val, self.y_val, y)

    def grad_y_g(self, x, y):
        return _grad(self.X_train, self.y_train, y) + np.exp(x) * y

    def jvp_xy_g(self, x, y, z):
        return np.exp(x) * y * z

    def jvp_yy_g(self, x, y, z):
        return _hvp(self.X_train, y, z) + np.exp(x) * z

    def hess_yy_g(self, x, y):
        return _hessian(self.X_train, y) + np.diag(np.exp(x))

    def sample(self, x, y, z, rng, repeats=1, size=None):
        gen = as_generator(rng)
        lead = (repeats,) if size is None else (size, repeats)
        b = self.batch_size
        iv = gen.integers(0, self.X_val.shape[0], size=lead + (b,))
        it = gen.integers(0, self.X_train.shape[0], size=lead + (b,))
        Xv, yv = self.X_val[iv], self.y_val[iv]
        Xt, yt = self.X_train[it], self.y_train[it]

        ex = np.exp(x)
        gyF = _grad(Xv, yv, y).mean(axis=-2)
        gyG = _grad(Xt, yt, y).mean(axis=-2) + ex * y
        jyy = _hvp(Xt, y, z).mean(axis=-2) + ex * z
        gxF = np.zeros_like(gyF) if size is None else np.zeros((size, self.d_x))
        jxy = ex * y * z
        if size is not None:
            jxy = np.broadcast_to(jxy, (size, self.d_x)).copy()
        return OracleSample(gxF, gyF, gyG, jxy, jyy)


class LogisticAnalytic(AnalyticOracle):
    """Ground truth by exact inner solves (damped Newton on the averaged G)."""

    def __init__(self, oracles, tol=1e-12, max_iter=200):
        self.oracles = oracles
        self.tol = tol
        self.max_iter = max_iter

    def _g_value(self, lam, w):
        loss = np.mean([_loss(o.X_train, o.y_train, w) for o in self.oracles])
        return loss + 0.5 * np.sum(np.exp(lam) * w * w)

    def _g_grad(self, lam, w):
        return np.mean([o.grad_y_g(lam, w) for o in self.oracles], axis=0)

    def hess_yy(self, lam, w):
        return np.mean([o.hess_yy_g(lam, w) for o in self.oracles], axis=0)

    def y_star(self, x):
        lam = check_vector(x, self.oracles[0].d_x, "x")
        w = np.zeros_like(lam)
        g = self._g_grad(lam, w)
        for _ in range(self.max_iter):
            if np.linalg.norm(g) <= self.tol:
                break
            step = np.linalg.solve(self.hess_yy(lam, w), g)
            # near the solution value decreases drop below float resolution,
            # so a full step that halves the gradient is taken as is
            g_full = self._g_grad(lam, w - step)
            if np.linalg.norm(g_full) <= 0.5 * np.linalg.norm(g):
                w, g = w - step, g_full
                continue
            t, val = 1.0, self._g_value(lam, w)
            slope = g @ step
            while t > 1e-10 and self._g_value(lam, w - t * step) > val - 1e-4 * t * slope:
                t *= 0.5
            w_new = w - t * step
            if np.array_equal(w_new, w):
                break
            w = w_new
            g = self._g_grad(lam, w)
        return w

    def z_star(self, x):
        w = self.y_star(x)
        gy = np.mean([_grad(o.X_val, o.y_val, w) for o in self.oracles], axis=0)
        return -np.linalg.solve(self.hess_yy(x, w), gy)

    def hypergrad(self, x):
        lam = check_vector(x, self.oracles[0].d_x, "x")
        w = self.y_star(lam)
        gy = np.mean([_grad(o.X_val, o.y_val, w) for o in self.oracles], axis=0)
        z = -np.linalg.solve(self.hess_yy(lam, w), gy)
        return np.exp(lam) * w * z

    def phi_value(self, x):
        w = self.y_star(x)
        return float(np.mean([_loss(o.X_val, o.y_val, w) for o in self.oracles]))


def _worker_features(rng, i, m, p):
    # i is the 1-based worker index of the alternating recipe
    if i % 2 == 0:
        mean, std = 0.0, float(i)
        X = rng.normal(0.0, std, size=(m, p))
    else:
        mean, std = float(i), np.sqrt(2.0 * i)
        X = rng.chisquare(i, size=(m, p))
    return np.clip(X, mean - 10 * std, mean + 10 * std)


def make_logistic_hpo(n=5, p=100, samples=500, noise=0.1, seed=0, batch_size=50, rho=None):
    """Synthetic heterogeneous logistic HPO suite.

    Features of worker i (1-based) are N(0, i^2) for even i and chi^2(i) for
    odd i, clipped at mean +- 10 std and divided by sqrt(p). Labels follow
    sign(x'w_true + noise * N(0,1)) with one w_true shared by all workers.
    """
    n = check_positive_int(n, "n")
    p = check_positive_int(p, "p")
    samples = check_positive_int(samples, "samples")
    if not (np.isfinite(noise) and noise >= 0):
        raise InvalidSpecError(f"noise must be >= 0, got {noise}")
    if rho is not None:
        rho = check_positive_float(rho, "rho")

    truth_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_TRUTH_KEY,)))
    w_true = truth_rng.standard_normal(p) / np.sqrt(p)

    oracles = []
    for w in range(n):
        for attempt in range(_MAX_ATTEMPTS):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(w, attempt)))
            X = _worker_features(rng, w + 1, 2 * samples, p) / np.sqrt(p)
            y = np.where(X @ w_true + noise * rng.standard_normal(2 * samples) >= 0, 1.0, -1.0)
            tr, va = y[:samples], y[samples:]
            if np.unique(tr).size == 2 and np.unique(va).size == 2:
                break
        else:
            raise InvalidSpecError(f"worker {w}: could not draw data with both labels")
        oracles.append(LogisticOracle(w, X[:samples], tr, X[samples:], va, batch_size))

    params = dict(n=n, p=p, samples=samples, noise=noise, seed=seed,
                  batch_size=batch_size, rho=rho)
    return BilevelProblem(oracles, LogisticAnalytic(oracles), rho=rho,
                          name="logistic", params=params)


def tiny_logistic(X, y, X_val=None, y_val=None, batch_size=None):
    """Single-worker instance from explicit arrays (validation defaults to train)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X_val = X if X_val is None else np.asarray(X_val, dtype=np.float64)
    y_val = y if y_val is None else np.asarray(y_val, dtype=np.float64)
    oracle = LogisticOracle(0, X, y, X_val, y_val, batch_size or X.shape[0])
    return BilevelProblem([oracle], LogisticAnalytic([oracle]), name="logistic_tiny",
                          params={"X": X.tolist(), "y": y.tolist()})
