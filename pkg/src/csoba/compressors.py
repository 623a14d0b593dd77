"""Unbiased compression operators with exact wire accounting.

Every operator is stateless.  ``compress`` returns a :class:`CompressedMessage`
holding the transmitted payload; ``materialize`` turns it back into the dense
vector the receiver reconstructs.  ``compress_many`` runs the very same kernels
on a stack of inputs and returns only the dense reconstructions, which is what
Monte Carlo checks need.

Wire encodings (bits of payload, headers not billed)::

    Identity               64 * d
    RandKScaled            k * (ceil(log2 d) + 64)
    StochasticQuantizer    d * ceil(log2(2s + 1)) + 64
    Msc                    R * (inner cost)
"""

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._rng import as_generator
from ._validation import check_batch, check_positive_int, check_vector
from .exceptions import InfeasibleError, InvalidSpecError

FLOAT_BITS = 64


class Kind(str, Enum):
    IDENTITY = "Identity"
    RAND_K = "RandKScaled"
    QUANTIZER = "StochasticQuantizer"
    MSC = "Msc"


_TAG = {Kind.IDENTITY: 0, Kind.RAND_K: 1, Kind.QUANTIZER: 2, Kind.MSC: 3}
_KIND_OF_TAG = {v: k for k, v in _TAG.items()}


@dataclass(frozen=True)
class CompressorSpec:
    kind: Kind
    k: int = None
    levels: int = None
    inner: "CompressorSpec" = None
    rounds: int = None

    def __post_init__(self):
        try:
            kind = Kind(self.kind)
        except ValueError:
            raise InvalidSpecError(f"unknown compressor kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        if kind is Kind.RAND_K:
            check_positive_int(self.k, "k")
        elif kind is Kind.QUANTIZER:
            check_positive_int(self.levels, "levels")
        elif kind is Kind.MSC:
            check_positive_int(self.rounds, "rounds")
            if not isinstance(self.inner, CompressorSpec):
                raise InvalidSpecError("Msc requires an inner CompressorSpec")
            if self.inner.kind is Kind.MSC:
                raise InvalidSpecError("Msc cannot wrap another Msc")

    @classmethod
    def identity(cls):
        return cls(Kind.IDENTITY)

    @classmethod
    def rand_k(cls, k):
        return cls(Kind.RAND_K, k=k)

    @classmethod
    def quantizer(cls, levels):
        return cls(Kind.QUANTIZER, levels=levels)

    @classmethod
    def msc(cls, inner, rounds):
        return cls(Kind.MSC, inner=inner, rounds=rounds)

    def validate_for(self, dim):
        check_positive_int(dim, "dim")
        if self.kind is Kind.RAND_K and self.k > dim:
            raise InvalidSpecError(f"rand-K needs k <= d, got k={self.k}, d={dim}")
        if self.kind is Kind.MSC:
            self.inner.validate_for(dim)
        return self

    @property
    def is_lossless(self):
        return self.kind is Kind.IDENTITY

    def to_dict(self):
        out = {"kind": self.kind.value}
        if self.kind is Kind.RAND_K:
            out["k"] = self.k
        elif self.kind is Kind.QUANTIZER:
            out["levels"] = self.levels
        elif self.kind is Kind.MSC:
            out["inner"] = self.inner.to_dict()
            out["rounds"] = self.rounds
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "inner" in data and isinstance(data["inner"], dict):
            data["inner"] = cls.from_dict(data["inner"])
        unknown = set(data) - {"kind", "k", "levels", "inner", "rounds"}
        if unknown:
            raise InvalidSpecError(f"unknown compressor fields {sorted(unknown)}")
        if "kind" not in data:
            raise InvalidSpecError("compressor block needs a 'kind'")
        return cls(**data)


IDENTITY = CompressorSpec.identity()


def omega_of(spec, dim):
    """Declared variance parameter of ``spec`` acting on ``dim`` coordinates."""
    spec.validate_for(dim)
    if spec.kind is Kind.IDENTITY:
        return 0.0
    if spec.kind is Kind.RAND_K:
        return dim / spec.k - 1.0
    if spec.kind is Kind.QUANTIZER:
        s = spec.levels
        return min(dim / s**2, math.sqrt(dim) / s)
    w = omega_of(spec.inner, dim)
    return w * (w / (1.0 + w)) ** spec.rounds


def _index_width(dim):
    return (dim - 1).bit_length()


def _level_width(levels):
    return (2 * levels).bit_length()


def message_bits(spec, dim):
    if spec.kind is Kind.IDENTITY:
        return FLOAT_BITS * dim
    if spec.kind is Kind.RAND_K:
        return spec.k * (_index_width(dim) + FLOAT_BITS)
    if spec.kind is Kind.QUANTIZER:
        return dim * _level_width(spec.levels) + FLOAT_BITS
    return spec.rounds * message_bits(spec.inner, dim)


def bit_cost(msg):
    return message_bits(msg.spec, msg.dim)


# -- kernels ---------------------------------------------------------------
#
# Kernels act on a stack X of shape (n, d) and return a "batch payload".
# compress() calls them with n == 1, so the single-message and batched paths
# consume identical random numbers and perform identical arithmetic per row.


def _encode_batch(spec, X, rng):
    n, d = X.shape
    if spec.kind is Kind.IDENTITY:
        return (X.copy(),)
    if spec.kind is Kind.RAND_K:
        k = spec.k
        if k == d:
            idx = np.broadcast_to(np.arange(d), (n, d)).copy()
        else:
            keys = as_generator(rng).random((n, d))
            idx = np.argpartition(keys, k - 1, axis=1)[:, :k]
            idx.sort(axis=1)
        vals = X[np.arange(n)[:, None], idx] * (d / k)
        return (idx, vals)
    if spec.kind is Kind.QUANTIZER:
        s = spec.levels
        u = as_generator(rng).random((n, d))
        norms = np.sqrt((X * X).sum(axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        scaled = np.abs(X) / safe[:, None] * s
        low = np.floor(scaled)
        mag = np.minimum(low + (u < scaled - low), s)
        levels = (np.sign(X) * mag).astype(np.int64)
        levels[norms == 0] = 0
        return (norms, levels)
    # Msc: R residual rounds of the inner compressor
    w = omega_of(spec.inner, d)
    if not spec.inner.is_lossless:
        rng = as_generator(rng)  # one generator across all R rounds
    v = np.zeros_like(X)
    parts = []
    for _ in range(spec.rounds):
        part = _encode_batch(spec.inner, X - v, rng)
        parts.append(part)
        v = v + _materialize_batch(spec.inner, part, d) / (1.0 + w)
    return tuple(parts)


def _materialize_batch(spec, payload, d):
    if spec.kind is Kind.IDENTITY:
        return payload[0].copy()
    if spec.kind is Kind.RAND_K:
        idx, vals = payload
        out = np.zeros((idx.shape[0], d))
        out[np.arange(idx.shape[0])[:, None], idx] = vals
        return out
    if spec.kind is Kind.QUANTIZER:
        norms, levels = payload
        return levels * norms[:, None] / spec.levels
    inner = spec.inner
    if spec.rounds == 1:
        # v^1 / (1 - q) is algebraically C(x); skip the round trip through (1+w)
        return _materialize_batch(inner, payload[0], d)
    w = omega_of(inner, d)
    v = None
    for part in payload:
        c = _materialize_batch(inner, part, d)
        v = c / (1.0 + w) if v is None else v + c / (1.0 + w)
    q = w / (1.0 + w)
    return v / (1.0 - q**spec.rounds)


def _row(payload, spec):
    if spec.kind is Kind.MSC:
        return tuple(_row(p, spec.inner) for p in payload)
    return tuple(np.asarray(a)[0] if np.ndim(a) else a for a in payload)


def _as_batch(payload, spec):
    if spec.kind is Kind.MSC:
        return tuple(_as_batch(p, spec.inner) for p in payload)
    return tuple(np.asarray(a)[None, ...] for a in payload)


@dataclass(frozen=True, eq=False)
class CompressedMessage:
    """One uplink transmission.

    ``payload`` depends on ``spec.kind``: ``(values,)`` for Identity,
    ``(indices, values)`` for rand-K, ``(scale, levels)`` for the quantizer and
    one inner payload per round for Msc.
    """

    spec: CompressorSpec
    dim: int
    payload: tuple

    @property
    def origin_kind(self):
        return self.spec.kind

    @property
    def bit_cost(self):
        return message_bits(self.spec, self.dim)

    def materialize(self):
        return _materialize_batch(self.spec, _as_batch(self.payload, self.spec), self.dim)[0]

    def to_bytes(self):
        return _serialize(self.spec, self.dim, self.payload)

    @classmethod
    def from_bytes(cls, data):
        msg, used = _deserialize(memoryview(bytes(data)), 0)
        if used != len(data):
            raise ValueError("trailing bytes after message")
        return msg

    def __eq__(self, other):
        if not isinstance(other, CompressedMessage):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None


def compress(spec, x, rng=None):
    """Compress one vector; the result materializes to an unbiased estimate of ``x``."""
    x = check_vector(x)
    spec.validate_for(x.shape[0])
    payload = _encode_batch(spec, x[None, :], rng)
    return CompressedMessage(spec, x.shape[0], _row(payload, spec))


def msc_compress(inner, rounds, x, rng=None):
    return compress(CompressorSpec.msc(inner, rounds), x, rng)


def compress_many(spec, X, rng=None):
    """Independently compress every row of ``X``; returns dense reconstructions."""
    X = check_batch(X)
    d = X.shape[1]
    spec.validate_for(d)
    return _materialize_batch(spec, _encode_batch(spec, X, rng), d)


def recommended_k_pair(d_x, d_y, budget):
    """Split ``budget`` kept coordinates between upper and lower rand-K.

    Targets (1 + w_u) / (1 + w_l) = sqrt(d_x / d_y).  Exhaustive over feasible
    pairs; ties go to the larger total, then the larger upper share.
    """
    d_x = check_positive_int(d_x, "d_x", error=InfeasibleError)
    d_y = check_positive_int(d_y, "d_y", error=InfeasibleError)
    budget = check_positive_int(budget, "budget", minimum=2, error=InfeasibleError)
    target = 0.5 * math.log(d_x / d_y)
    best = None
    for k_u in range(1, min(d_x, budget - 1) + 1):
        hi = min(d_y, budget - k_u)
        # the objective is V-shaped in log k_l, so the optimum is next to the ideal
        ideal = k_u * math.exp(target) * d_y / d_x
        for k_l in {math.floor(ideal), math.ceil(ideal)}:
            k_l = min(max(k_l, 1), hi)
            err = abs(math.log((d_x / k_u) / (d_y / k_l)) - target)
            key = (round(err, 12), -(k_u + k_l), -k_u)
            if best is None or key < best[0]:
                best = (key, k_u, k_l)
    _, k_u, k_l = best
    ratio = (d_x / k_u) / (d_y / k_l)
    if abs(math.log(ratio) - target) > math.log(2.0):
        raise InfeasibleError(
            f"budget {budget} cannot bring (1+w_u)/(1+w_l) within a factor 2 of "
            f"sqrt({d_x}/{d_y}); best ratio {ratio:.4g}"
        )
    return k_u, k_l


# -- canonical byte layout ---------------------------------------------------
# kind tag: u8, dim: u32, then a kind-specific parameter (u32) and the payload,
# packed MSB-first to exactly bit_cost bits and zero padded to a byte boundary.

_HEAD = struct.Struct("<BI")
_U32 = struct.Struct("<I")


def _float_bits(values):
    return np.asarray(values, dtype="<f8").view("<u8").tolist()


def _bits_to_floats(ints):
    return np.asarray(ints, dtype="<u8").view("<f8")


def _pack(fields):
    acc = 0
    nbits = 0
    for value, width in fields:
        acc = (acc << width) | int(value)
        nbits += width
    pad = (-nbits) % 8
    return (acc << pad).to_bytes((nbits + pad) // 8, "big")


def _unpack(data, widths):
    total = sum(widths)
    nbytes = (total + 7) // 8
    acc = int.from_bytes(bytes(data[:nbytes]), "big") >> (nbytes * 8 - total)
    out = []
    for width in reversed(widths):
        out.append(acc & ((1 << width) - 1))
        acc >>= width
    out.reverse()
    return out, nbytes


def _serialize(spec, dim, payload):
    head = _HEAD.pack(_TAG[spec.kind], dim)
    if spec.kind is Kind.IDENTITY:
        return head + np.asarray(payload[0], dtype="<f8").tobytes()
    if spec.kind is Kind.RAND_K:
        idx, vals = payload
        w = _index_width(dim)
        fields = [(int(i), w) for i in idx] + [(b, FLOAT_BITS) for b in _float_bits(vals)]
        return head + _U32.pack(spec.k) + _pack(fields)
    if spec.kind is Kind.QUANTIZER:
        scale, levels = payload
        w = _level_width(spec.levels)
        fields = [(_float_bits([scale])[0], FLOAT_BITS)]
        fields += [(int(lv) + spec.levels, w) for lv in levels]
        return head + _U32.pack(spec.levels) + _pack(fields)
    body = b"".join(_serialize(spec.inner, dim, part) for part in payload)
    return head + _U32.pack(spec.rounds) + body


def _deserialize(buf, pos):
    tag, dim = _HEAD.unpack_from(buf, pos)
    pos += _HEAD.size
    kind = _KIND_OF_TAG[tag]
    if kind is Kind.IDENTITY:
        vals = np.frombuffer(buf[pos:pos + 8 * dim], dtype="<f8").astype(np.float64)
        return CompressedMessage(IDENTITY, dim, (vals,)), pos + 8 * dim
    (param,) = _U32.unpack_from(buf, pos)
    pos += _U32.size
    if kind is Kind.RAND_K:
        spec = CompressorSpec.rand_k(param)
        w = _index_width(dim)
        ints, used = _unpack(buf[pos:], [w] * param + [FLOAT_BITS] * param)
        idx = np.asarray(ints[:param], dtype=np.int64)
        vals = _bits_to_floats(ints[param:]).astype(np.float64)
        return CompressedMessage(spec, dim, (idx, vals)), pos + used
    if kind is Kind.QUANTIZER:
        spec = CompressorSpec.quantizer(param)
        w = _level_width(param)
        ints, used = _unpack(buf[pos:], [FLOAT_BITS] + [w] * dim)
        scale = float(_bits_to_floats(ints[:1])[0])
        levels = np.asarray(ints[1:], dtype=np.int64) - param
        return CompressedMessage(spec, dim, (np.float64(scale), levels)), pos + used
    parts = []
    for _ in range(param):
        part, pos = _deserialize(buf, pos)
        parts.append(part)
    spec = CompressorSpec.msc(parts[0].spec, param)
    return CompressedMessage(spec, dim, tuple(p.payload for p in parts)), pos
