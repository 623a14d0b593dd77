"""Server/worker recursions of the SOBA family with compressed uplinks.

A round is a superstep: every worker draws fresh samples and builds its
messages, then the server reduces the messages in worker-index order, updates
(x, y, z) and broadcasts. Randomness is keyed by (seed, round, worker, slot),
so the outcome does not depend on the order workers are visited in.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from ._validation import check_positive_float, check_positive_int
from .compressors import IDENTITY, CompressorSpec, Kind, compress, omega_of
from .exceptions import ConsistencyError, DivergenceError, InvalidSpecError
from .metrics import RunTrace, measure
from .problems.base import Directions
from .simnet import (
    SLOT_INIT,
    SLOT_LOWER_Y,
    SLOT_LOWER_Z,
    SLOT_SAMPLE,
    SLOT_UPPER,
    BitLedger,
    LogEntry,
    substream,
)

# App. F grid, with the elided middle filled in on a 1-5 decade pattern
DEFAULT_STEPSIZE_GRID = (0.001, 0.005, 0.01, 0.05, 0.1, 0.5)
DIVERGENCE_NORM = 1e12
DEFAULT_THETA = 0.1
FLOAT_BITS = 64


class Algo(str, Enum):
    NC_SOBA = "NcSoba"
    C_SOBA = "CSoba"
    CM_SOBA = "CmSoba"
    EF_SOBA = "EfSoba"
    CM_SOBA_MSC = "CmSobaMsc"
    EF_SOBA_MSC = "EfSobaMsc"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = "".join(ch for ch in str(value).lower() if ch.isalnum())
        for algo in cls:
            if algo.value.lower() == key:
                return algo
        raise InvalidSpecError(f"unknown algorithm {value!r}")

    @property
    def uses_momentum(self):
        return self in (Algo.CM_SOBA, Algo.CM_SOBA_MSC)

    @property
    def uses_ef(self):
        return self in (Algo.EF_SOBA, Algo.EF_SOBA_MSC)

    @property
    def uses_msc(self):
        return self in (Algo.CM_SOBA_MSC, Algo.EF_SOBA_MSC)


@dataclass(frozen=True)
class AlgoConfig:
    algo: Algo
    alpha: float
    beta: float
    gamma: float
    theta: float = None
    rho: float = None
    delta_u: float = None
    delta_l: float = None
    R: int = 1
    upper_comp: CompressorSpec = IDENTITY
    lower_comp: CompressorSpec = IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "algo", Algo.parse(self.algo))
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, check_positive_float(getattr(self, name), name))
        if self.theta is not None:
            object.__setattr__(self, "theta", check_positive_float(self.theta, "theta", upper=1.0))
        if self.rho is not None:
            object.__setattr__(self, "rho", check_positive_float(self.rho, "rho"))
        for name in ("delta_u", "delta_l"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, check_positive_float(getattr(self, name), name, upper=1.0))
        check_positive_int(self.R, "R")
        for name in ("upper_comp", "lower_comp"):
            spec = getattr(self, name)
            if isinstance(spec, dict):
                spec = CompressorSpec.from_dict(spec)
                object.__setattr__(self, name, spec)
            if not isinstance(spec, CompressorSpec):
                raise InvalidSpecError(f"{name} must be a CompressorSpec")
            if spec.kind is Kind.MSC:
                raise InvalidSpecError(f"{name}: give the inner compressor and R, not an Msc spec")
        if self.algo is Algo.NC_SOBA:
            object.__setattr__(self, "upper_comp", IDENTITY)
            object.__setattr__(self, "lower_comp", IDENTITY)
        if self.R != 1 and not self.algo.uses_msc:
            raise InvalidSpecError(f"R applies to MSC variants only, got R={self.R} for {self.algo.value}")

    def transmitted(self, level):
        """Compressor actually applied on the wire for ``level`` in {'upper', 'lower'}."""
        spec = self.upper_comp if level == "upper" else self.lower_comp
        if self.algo.uses_msc:
            return CompressorSpec.msc(spec, self.R)
        return spec

    def resolve(self, problem):
        """Fill defaults that depend on the problem (rho, theta, EF deltas)."""
        self.upper_comp.validate_for(problem.d_x)
        self.lower_comp.validate_for(problem.d_y)
        rho = self.rho if self.rho is not None else problem.rho
        if rho is None:
            raise InvalidSpecError("rho: the problem has no default clipping radius; set it in the config")
        changes = {"rho": float(rho)}
        if (self.algo.uses_momentum or self.algo.uses_ef) and self.theta is None:
            changes["theta"] = DEFAULT_THETA
        if self.algo.uses_ef:
            if self.delta_u is None:
                changes["delta_u"] = 1.0 / (1.0 + self._omega("upper", problem.d_x))
            if self.delta_l is None:
                changes["delta_l"] = 1.0 / (1.0 + self._omega("lower", problem.d_y))
        return replace(self, **changes)

    def _omega(self, level, dim):
        spec = self.transmitted(level)
        if spec.kind is Kind.MSC and spec.rounds == 1:
            # MSC with one round is the inner operator itself
            spec = spec.inner
        return omega_of(spec, dim)

    def to_dict(self):
        out = {"algo": self.algo.value}
        for name in ("alpha", "beta", "gamma", "theta", "rho", "delta_u", "delta_l", "R"):
            out[name] = getattr(self, name)
        out["upper_comp"] = self.upper_comp.to_dict()
        out["lower_comp"] = self.lower_comp.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**dict(data))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class WorkerState:
    h_xi: np.ndarray
    m_xi: np.ndarray
    m_yi: np.ndarray
    m_zi: np.ndarray

    def copy(self):
        return WorkerState(self.h_xi.copy(), self.m_xi.copy(), self.m_yi.copy(), self.m_zi.copy())


@dataclass
class ServerState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    h_x: np.ndarray = None
    hhat_x: np.ndarray = None
    m_y: np.ndarray = None
    m_z: np.ndarray = None
    round: int = 0

    def arrays(self):
        return [a for a in (self.x, self.y, self.z, self.h_x, self.hhat_x, self.m_y, self.m_z)
                if a is not None]

    def copy(self):
        def cp(a):
            return None if a is None else a.copy()
        return ServerState(cp(self.x), cp(self.y), cp(self.z), cp(self.h_x), cp(self.hhat_x),
                           cp(self.m_y), cp(self.m_z), self.round)

    def digest(self):
        h = hashlib.sha256(str(self.round).encode())
        for a in (self.x, self.y, self.z, self.h_x, self.hhat_x, self.m_y, self.m_z):
            h.update(b"-" if a is None else np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class RoundOutcome:
    server: ServerState
    workers: list
    uplink_bits: int
    broadcast_bits: int
    messages: list = field(default_factory=list)


def clip(z_tilde, rho):
    """Projection onto the closed Euclidean ball of radius ``rho``."""
    rho = check_positive_float(rho, "rho")
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    norm = np.sqrt(z_tilde @ z_tilde)
    if norm <= rho:
        return z_tilde.copy()
    return (rho / norm) * z_tilde


def ordered_mean(vectors):
    """Mean with a fixed left-to-right summation order."""
    total = vectors[0].copy()
    for v in vectors[1:]:
        total += v
    return total / len(vectors)


def ef_estimate(m_global, received):
    """Unbiased EF direction m + (1/n) sum C(D_i - m_i), without the delta factor."""
    return m_global + ordered_mean(received)


def _directions(oracle, state, cfg, seed, worker, slot=SLOT_SAMPLE, round_index=None):
    k = state.round if round_index is None else round_index
    rng = substream(seed, k, worker, slot)
    if cfg.R == 1:
        s = oracle.sample(state.x, state.y, state.z, rng)
    else:
        s = oracle.sample(state.x, state.y, state.z, rng, repeats=cfg.R)
    return Directions.from_sample(s)


def _send(spec, vec, seed, k, worker, slot, log):
    if spec.is_lossless and log is None:
        return vec.copy(), FLOAT_BITS * vec.shape[0]
    msg = compress(spec, vec, substream(seed, k, worker, slot))
    if log is not None:
        log.append(LogEntry(k, worker, slot, msg))
    return msg.materialize(), msg.bit_cost


def _order(n, worker_order):
    if worker_order is None:
        return range(n)
    order = [int(i) for i in worker_order]
    if sorted(order) != list(range(n)):
        raise InvalidSpecError(f"worker_order must permute 0..{n - 1}")
    return order


def _broadcast_bits(state):
    return FLOAT_BITS * (state.x.shape[0] + 2 * state.y.shape[0])


def _guard(state):
    for a in state.arrays():
        if not np.all(np.isfinite(a)) or np.sqrt(a @ a) > DIVERGENCE_NORM:
            raise DivergenceError(state.round, f"state left the finite region in round {state.round}")


def _plain_round(server, oracles, cfg, seed, log, worker_order):
    """Shared body of NC-, C- and CM-SOBA (and CM-SOBA-MSC)."""
    n = len(oracles)
    k = server.round
    up, lo = cfg.transmitted("upper"), cfg.transmitted("lower")
    cx, cy, cz = [None] * n, [None] * n, [None] * n
    bits = 0
    for i in _order(n, worker_order):
        d = _directions(oracles[i], server, cfg, seed, i)
        if cfg.algo is Algo.NC_SOBA:
            cx[i], cy[i], cz[i] = d.Dx, d.Dy, d.Dz
            if log is not None:
                for slot, v in ((SLOT_UPPER, d.Dx), (SLOT_LOWER_Y, d.Dy), (SLOT_LOWER_Z, d.Dz)):
                    log.append(LogEntry(k, i, slot, compress(IDENTITY, v)))
            bits += FLOAT_BITS * (d.Dx.shape[0] + d.Dy.shape[0] + d.Dz.shape[0])
            continue
        cx[i], b1 = _send(up, d.Dx, seed, k, i, SLOT_UPPER, log)
        cy[i], b2 = _send(lo, d.Dy, seed, k, i, SLOT_LOWER_Y, log)
        cz[i], b3 = _send(lo, d.Dz, seed, k, i, SLOT_LOWER_Z, log)
        bits += b1 + b2 + b3

    mx, my, mz = ordered_mean(cx), ordered_mean(cy), ordered_mean(cz)
    new = server.copy()
    new.round = k + 1
    if cfg.algo.uses_momentum:
        new.x = server.x - cfg.alpha * server.h_x
        new.h_x = (1.0 - cfg.theta) * server.h_x + cfg.theta * mx
    else:
        new.x = server.x - cfg.alpha * mx
    new.y = server.y - cfg.beta * my
    new.z = clip(server.z - cfg.gamma * mz, cfg.rho)
    _guard(new)
    return new, bits


def _check_ef_books(server, workers):
    for name, local in (("hhat_x", "m_xi"), ("m_y", "m_yi"), ("m_z", "m_zi")):
        agg = getattr(server, name)
        ref = ordered_mean([getattr(w, local) for w in workers])
        scale = 1.0 + max(np.abs(ref).max(), np.abs(agg).max())
        if np.abs(agg - ref).max() > 1e-9 * scale:
            raise ConsistencyError(
                f"round {server.round}: {name} drifted from the mean of {local} "
                f"by {np.abs(agg - ref).max():.3g}"
            )


def _ef_round(server, workers, oracles, cfg, seed, log, worker_order):
    n = len(oracles)
    k = server.round
    up, lo = cfg.transmitted("upper"), cfg.transmitted("lower")
    cx, cy, cz = [None] * n, [None] * n, [None] * n
    new_workers = [None] * n
    bits = 0
    for i in _order(n, worker_order):
        w = workers[i]
        d = _directions(oracles[i], server, cfg, seed, i)
        h_new = (1.0 - cfg.theta) * w.h_xi + cfg.theta * d.Dx
        cx[i], b1 = _send(up, h_new - w.m_xi, seed, k, i, SLOT_UPPER, log)
        cy[i], b2 = _send(lo, d.Dy - w.m_yi, seed, k, i, SLOT_LOWER_Y, log)
        cz[i], b3 = _send(lo, d.Dz - w.m_zi, seed, k, i, SLOT_LOWER_Z, log)
        bits += b1 + b2 + b3
        new_workers[i] = WorkerState(
            h_new,
            w.m_xi + cfg.delta_u * cx[i],
            w.m_yi + cfg.delta_l * cy[i],
            w.m_zi + cfg.delta_l * cz[i],
        )

    d_y = ef_estimate(server.m_y, cy)
    d_z = ef_estimate(server.m_z, cz)
    new = server.copy()
    new.round = k + 1
    new.x = server.x - cfg.alpha * server.hhat_x
    new.y = server.y - cfg.beta * d_y
    new.z = clip(server.z - cfg.gamma * d_z, cfg.rho)
    new.hhat_x = server.hhat_x + cfg.delta_u * ordered_mean(cx)
    new.m_y = server.m_y + cfg.delta_l * ordered_mean(cy)
    new.m_z = server.m_z + cfg.delta_l * ordered_mean(cz)
    _guard(new)
    _check_ef_books(new, new_workers)
    return new, new_workers, bits


def _require(cfg, *algos):
    if cfg.algo not in algos:
        names = ", ".join(a.value for a in algos)
        raise InvalidSpecError(f"this round function runs {names}, got {cfg.algo.value}")
    if cfg.rho is None:
        raise InvalidSpecError("rho is unset; call cfg.resolve(problem) first")


def _outcome(server, workers, bits, log):
    return RoundOutcome(server, workers, bits, _broadcast_bits(server), log if log is not None else [])


def round_nc_soba(server, oracles, cfg, rng, log_messages=False, worker_order=None):
    """One uncompressed round. ``rng`` is the root seed of the run."""
    _require(cfg, Algo.NC_SOBA)
    log = [] if log_messages else None
    new, bits = _plain_round(server, oracles, cfg, rng, log, worker_order)
    return _outcome(new, [], bits, log)


def round_c_soba(server, oracles, cfg, rng, log_messages=False, worker_order=None):
    _require(cfg, Algo.C_SOBA)
    log = [] if log_messages else None
    new, bits = _plain_round(server, oracles, cfg, rng, log, worker_order)
    return _outcome(new, [], bits, log)


def round_cm_soba(server, oracles, cfg, rng, log_messages=False, worker_order=None):
    """x moves along the pre-refresh momentum, then h_x absorbs the new messages."""
    _require(cfg, Algo.CM_SOBA)
    log = [] if log_messages else None
    new, bits = _plain_round(server, oracles, cfg, rng, log, worker_order)
    return _outcome(new, [], bits, log)


def round_ef_soba(server, workers, oracles, cfg, rng, log_messages=False, worker_order=None):
    _require(cfg, Algo.EF_SOBA)
    log = [] if log_messages else None
    new, new_workers, bits = _ef_round(server, workers, oracles, cfg, rng, log, worker_order)
    return _outcome(new, new_workers, bits, log)


def round_msc_variant(server, workers, oracles, cfg, rng, log_messages=False, worker_order=None):
    """CM-SOBA-MSC / EF-SOBA-MSC: R-sample directions, R-round MSC messages."""
    _require(cfg, Algo.CM_SOBA_MSC, Algo.EF_SOBA_MSC)
    log = [] if log_messages else None
    if cfg.algo is Algo.CM_SOBA_MSC:
        new, bits = _plain_round(server, oracles, cfg, rng, log, worker_order)
        return _outcome(new, [], bits, log)
    new, new_workers, bits = _ef_round(server, workers, oracles, cfg, rng, log, worker_order)
    return _outcome(new, new_workers, bits, log)


def step(server, workers, oracles, cfg, rng, log_messages=False, worker_order=None):
    """Dispatch one round to the recursion named by ``cfg.algo``."""
    kw = dict(log_messages=log_messages, worker_order=worker_order)
    if cfg.algo is Algo.NC_SOBA:
        return round_nc_soba(server, oracles, cfg, rng, **kw)
    if cfg.algo is Algo.C_SOBA:
        return round_c_soba(server, oracles, cfg, rng, **kw)
    if cfg.algo is Algo.CM_SOBA:
        return round_cm_soba(server, oracles, cfg, rng, **kw)
    if cfg.algo is Algo.EF_SOBA:
        return round_ef_soba(server, workers, oracles, cfg, rng, **kw)
    return round_msc_variant(server, workers, oracles, cfg, rng, **kw)


def initial_state(problem, cfg, seed):
    """Round-0 state. Momenta and EF memories start from one extra (unbilled) sample."""
    x = problem.x0.copy()
    y = problem.y0.copy()
    z = np.zeros(problem.d_y)
    server = ServerState(x, y, z)
    workers = []
    if cfg.algo.uses_momentum or cfg.algo.uses_ef:
        dx = [_directions(o, server, cfg, seed, i, slot=SLOT_INIT, round_index=0).Dx
              for i, o in enumerate(problem.oracles)]
        if cfg.algo.uses_momentum:
            server.h_x = ordered_mean(dx)
        else:
            zeros = np.zeros(problem.d_y)
            workers = [WorkerState(d.copy(), d.copy(), zeros.copy(), zeros.copy()) for d in dx]
            server.hhat_x = ordered_mean([w.m_xi for w in workers])
            server.m_y = zeros.copy()
            server.m_z = zeros.copy()
    return server, workers


def run(cfg, problem, K, seed, log_messages=False, worker_order=None, record_every=1):
    """Run K rounds and return the per-round trace.

    The final server state is attached as ``trace.final_state`` and, when
    ``log_messages`` is set, the message log as ``trace.messages``.
    Divergence re-raises with the partial trace on ``err.trace``.
    """
    K = check_positive_int(K, "K", minimum=0)
    record_every = check_positive_int(record_every, "record_every")
    cfg = cfg.resolve(problem)
    server, workers = initial_state(problem, cfg, seed)
    ledger = BitLedger()
    header = {"algo": cfg.algo.value, "cfg_digest": cfg.digest(), "seed": seed,
              "problem_digest": problem.digest(), "rounds": K}
    trace = RunTrace([], header)
    trace.messages = [] if log_messages else None
    trace.rows.append(measure(server, problem.analytic))
    tick = time.perf_counter()
    for k in range(K):
        try:
            out = step(server, workers, problem.oracles, cfg, seed, log_messages, worker_order)
        except DivergenceError as err:
            err.trace = trace
            trace.final_state = server
            raise
        server, workers = out.server, out.workers
        ledger.uplink_bits += out.uplink_bits
        ledger.record_broadcast(out.broadcast_bits)
        if log_messages:
            trace.messages.extend(out.messages)
        if (k + 1) % record_every == 0 or k + 1 == K:
            now = time.perf_counter()
            trace.rows.append(measure(server, problem.analytic, ledger.uplink_bits,
                                      ledger.broadcast_bits, now - tick))
            tick = now
    trace.final_state = (server, workers)
    return trace
