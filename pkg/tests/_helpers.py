import numpy as np


def within_stderr(samples, target, k=4.0):
    """Coordinate-wise |mean - target| <= k standard errors (exact hits allowed)."""
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    return bool(np.all(np.abs(mean - target) <= k * se + 1e-12))


def error_energy(samples, x):
    """Empirical E||C(x) - x||^2."""
    diff = samples - x
    return float(np.mean(np.sum(diff * diff, axis=1)))


# filled by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES = []
