from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csoba.algorithms import AlgoConfig, initial_state, run
from csoba.compressors import CompressorSpec
from csoba.exceptions import UnsupportedError
from csoba.metrics import (
    COLUMNS,
    RunTrace,
    TraceRow,
    averaged_stationarity,
    first_hit,
    format_csv,
    measure,
    parse_csv,
    read_csv,
    write_csv,
)
from csoba.problems import QuadraticBilevelSpec, make_quadratic, scalar_problem

from golden.regenerate import build

GOLDEN = Path(__file__).parent / "golden"
maybe_float = st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False))


def rows_strategy():
    row = st.builds(TraceRow, round=st.integers(0, 10**6), grad_norm_sq=maybe_float,
                    lower_err=maybe_float, z_err=maybe_float, phi=maybe_float,
                    uplink_bits=st.integers(0, 2**62), broadcast_bits=st.integers(0, 2**62))
    return st.lists(row, max_size=6)


def test_measure_scalar_suite():
    p = scalar_problem(x0=1.0)
    cfg = AlgoConfig("NcSoba", 0.1, 0.1, 0.1).resolve(p)
    server, _ = initial_state(p, cfg, 0)
    row = measure(server, p.analytic)
    assert row.hypergrad_norm == 2.0
    server.x = np.zeros(1)
    assert measure(server, p.analytic).hypergrad_norm == 0.0
    server.x, server.y = np.array([0.7]), np.array([0.7])
    assert measure(server, p.analytic).lower_err == 0.0


def test_measure_without_oracle_leaves_fields_empty():
    p = scalar_problem()
    server, _ = initial_state(p, AlgoConfig("NcSoba", 1, 1, 1).resolve(p), 0)
    row = measure(server, None, uplink_bits=5)
    assert row.grad_norm_sq is None and row.phi is None and row.uplink_bits == 5


def test_measure_is_pure():
    p = make_quadratic(QuadraticBilevelSpec(seed=3, sigma=0.1))
    cfg = AlgoConfig("EfSoba", 0.1, 0.1, 0.1).resolve(p)
    server, _ = initial_state(p, cfg, 0)
    before = server.digest()
    measure(server, p.analytic)
    assert server.digest() == before


@given(rows_strategy(), st.dictionaries(st.text("abcxyz_", min_size=1), st.text("0123abc", max_size=5),
                                       max_size=3))
def test_csv_roundtrip(rows, header):
    trace = RunTrace(rows, header)
    back = parse_csv(format_csv(trace))
    assert back.rows == trace.rows
    assert back.header == trace.header


def test_empty_trace_is_header_only(tmp_path):
    write_csv(RunTrace([], {}), tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == ",".join(COLUMNS) + "\n"
    assert read_csv(tmp_path / "t.csv").rows == []


def test_three_rows_roundtrip_field_exact(tmp_path):
    rows = [TraceRow(0, 0.1, 1 / 3, 2.0 ** -40, np.pi, 0, 0),
            TraceRow(1, 1e-300, None, 5e300, -0.0, 7, 9),
            TraceRow(2, 2.5, 0.0, 1.0, None, 14, 18)]
    write_csv(RunTrace(rows, {"seed": 1}), tmp_path / "t.csv")
    back = read_csv(tmp_path / "t.csv")
    assert back.rows == rows and back.header == {"seed": "1"}


def test_golden_trace_bytes(tmp_path):
    trace, _ = build()
    write_csv(trace, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_bytes() == (GOLDEN / "nc_soba_seed7.csv").read_bytes()


def test_io_errors_name_the_path(tmp_path):
    with pytest.raises(OSError, match="missing.csv"):
        read_csv(tmp_path / "missing.csv")
    with pytest.raises(OSError, match="nodir"):
        write_csv(RunTrace(), tmp_path / "nodir" / "t.csv")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="bad.csv"):
        read_csv(tmp_path / "bad.csv")


def test_averaged_stationarity():
    zeros = RunTrace([TraceRow(k, 0.0) for k in range(4)])
    assert averaged_stationarity(zeros) == 0.0
    # rows 0..K-1 of a K=2 run; the state after the last round is not averaged
    two = RunTrace([TraceRow(0, 1.0), TraceRow(1, 4.0), TraceRow(2, 100.0)])
    assert averaged_stationarity(two) == 2.5
    with pytest.raises(UnsupportedError):
        averaged_stationarity(RunTrace([TraceRow(0), TraceRow(1)]))
    with pytest.raises(UnsupportedError):
        averaged_stationarity(RunTrace([]))


def test_averaged_stationarity_settles_after_burn_in():
    p = make_quadratic(QuadraticBilevelSpec(n=4, d_x=5, d_y=3, seed=7))
    cfg = AlgoConfig("CSoba", 0.1, 0.5, 0.5, upper_comp=CompressorSpec.rand_k(3),
                     lower_comp=CompressorSpec.rand_k(2))
    full = run(cfg, p, 2000, seed=0)
    vals = [averaged_stationarity(RunTrace(full.rows[:K + 1])) for K in range(200, 2001, 100)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_first_hit():
    t = RunTrace([TraceRow(0, 3.0, uplink_bits=0), TraceRow(1, 0.5, uplink_bits=10),
                  TraceRow(2, 0.1, uplink_bits=20)])
    assert first_hit(t, 1.0).uplink_bits == 10
    assert first_hit(t, 0.01) is None
