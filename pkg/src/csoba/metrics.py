"""Per-round measurements against the analytic oracle, and CSV traces."""

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import UnsupportedError

COLUMNS = ("round", "grad_norm_sq", "lower_err", "z_err", "phi", "uplink_bits", "broadcast_bits")
_FLOAT_COLS = ("grad_norm_sq", "lower_err", "z_err", "phi")


@dataclass
class TraceRow:
    round: int
    grad_norm_sq: Optional[float] = None
    lower_err: Optional[float] = None
    z_err: Optional[float] = None
    phi: Optional[float] = None
    uplink_bits: int = 0
    broadcast_bits: int = 0
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def hypergrad_norm(self):
        return None if self.grad_norm_sq is None else float(np.sqrt(self.grad_norm_sq))


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    header: dict = field(default_factory=dict)
    final_state: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.header = {str(k): str(v) for k, v in self.header.items()}

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]


def measure(state, analytic=None, uplink_bits=0, broadcast_bits=0, wall_clock=0.0):
    """Trace row for ``state``; analytic columns stay empty without an oracle."""
    row = TraceRow(int(state.round), uplink_bits=int(uplink_bits),
                   broadcast_bits=int(broadcast_bits), wall_clock=wall_clock)
    if analytic is None:
        return row
    x = np.array(state.x, dtype=np.float64)
    g = analytic.hypergrad(x)
    row.grad_norm_sq = float(g @ g)
    row.lower_err = float(np.linalg.norm(state.y - analytic.y_star(x)))
    row.z_err = float(np.linalg.norm(state.z - analytic.z_star(x)))
    row.phi = float(analytic.phi_value(x))
    return row


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def format_csv(trace):
    buf = io.StringIO()
    for key, value in trace.header.items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in trace.rows:
        writer.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def write_csv(trace, path):
    text = format_csv(trace)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc.strerror or exc}") from exc


def parse_csv(text):
    header = {}
    lines = text.splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = i
            break
        key, _, value = line[1:].strip().partition("=")
        header[key] = value
    else:
        body_start = len(lines)
    reader = csv.reader(lines[body_start:])
    cols = next(reader, None)
    if cols is not None and tuple(cols) != COLUMNS:
        raise ValueError(f"unexpected trace columns {cols}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        vals = dict(zip(COLUMNS, rec))
        rows.append(TraceRow(
            round=int(vals["round"]),
            uplink_bits=int(vals["uplink_bits"]),
            broadcast_bits=int(vals["broadcast_bits"]),
            **{c: (float(vals[c]) if vals[c] != "" else None) for c in _FLOAT_COLS},
        ))
    return RunTrace(rows, header)


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    try:
        return parse_csv(text)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def averaged_stationarity(trace):
    """Mean of ||grad Phi(x^k)||^2 over k = 0..K-1.

    The last row (the state after round K-1) is not part of the average, so a
    trace of K rounds averages its first K rows. A trace with only the initial
    row returns that row's value.
    """
    rows = trace.rows
    if not rows:
        raise UnsupportedError("empty trace")
    last = rows[-1].round
    used = [r for r in rows if r.round < last] or rows[-1:]
    vals = [r.grad_norm_sq for r in used]
    if any(v is None for v in vals):
        raise UnsupportedError("trace has no hypergradient column")
    return float(np.mean(vals))


def first_hit(trace, target):
    """Row of the first round with grad_norm_sq <= target, or None."""
    for row in trace.rows:
        if row.grad_norm_sq is not None and row.grad_norm_sq <= target:
            return row
    return None
