from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from csoba.compressors import CompressorSpec, compress
from csoba.simnet import (
    BitLedger,
    LogEntry,
    RngStream,
    dump_log,
    load_log,
    record,
    replay_uplink,
    substream,
)

from golden.regenerate import build

GOLDEN = Path(__file__).parent / "golden"
words = st.integers(0, 2**64 - 1)


def draws(stream, n):
    return stream.generator.random(n)


@given(st.integers(0, 2**64 - 1), words, words, words)
def test_same_path_same_stream(root, r, w, s):
    a = draws(substream(root, r, w, s), 100)
    b = draws(substream(root, r, w, s), 100)
    np.testing.assert_array_equal(a, b)


def test_adjacent_slots_look_independent():
    a = draws(substream(7, 3, 1, 2), 10_000)
    b = draws(substream(7, 3, 1, 3), 10_000)
    table = np.histogram2d(a, b, bins=10, range=[[0, 1], [0, 1]])[0]
    assert chi2_contingency(table)[1] > 1e-3


def test_distinct_workers_distinct_streams():
    firsts = {tuple(draws(substream(0, 5, w, 1), 4)) for w in range(64)}
    assert len(firsts) == 64


def test_stream_domain_checked():
    with pytest.raises(ValueError):
        RngStream(-1, (0, 0, 0))
    with pytest.raises(ValueError):
        RngStream(0, (0, 2**64, 0))
    with pytest.raises(ValueError):
        RngStream(0, (0, 0, 0, 0))


def test_record_adds_exact_cost():
    msg = compress(CompressorSpec.rand_k(10), np.arange(1024.0), rng=0)
    assert record(BitLedger(), msg).uplink_bits == 740
    assert BitLedger().uplink_bits == 0 and BitLedger().broadcast_bits == 0
    ledger = BitLedger()
    for _ in range(10 * 3):
        record(ledger, msg)
    assert ledger.uplink_bits == 22200


def test_ledger_rows_are_monotone():
    ledger = BitLedger()
    msg = compress(CompressorSpec.rand_k(1), [1.0, 2.0], rng=0)
    for k in range(5):
        ledger.record(msg).record_broadcast(8).close_round(k)
    ups = [r[1] for r in ledger.rows]
    assert ups == sorted(ups) and ledger.rows[-1] == (4, 5 * 65, 40)
    with pytest.raises(ValueError):
        ledger.record_broadcast(-1)


def test_log_file_roundtrip(tmp_path):
    _, log = build()
    path = tmp_path / "log.bin"
    dump_log(log, path)
    back = load_log(path)
    assert [(e.round, e.worker, e.slot) for e in back] == [(e.round, e.worker, e.slot) for e in log]
    assert all(a.message == b.message for a, b in zip(back, log))
    assert replay_uplink(back) == replay_uplink(log)


def test_log_matches_golden_bytes(tmp_path):
    _, log = build()
    dump_log(log, tmp_path / "log.bin")
    assert (tmp_path / "log.bin").read_bytes() == (GOLDEN / "c_soba_messages.bin").read_bytes()


def test_golden_log_replays_to_ledger():
    log = load_log(GOLDEN / "c_soba_messages.bin")
    per_worker = (2 * (3 + 64)) + 2 * (1 * (2 + 64))
    assert replay_uplink(log) == 3 * 4 * per_worker
    assert isinstance(log[0], LogEntry)


def test_large_path_words_stay_distinct():
    top = 2**64 - 1
    assert not np.array_equal(draws(substream(0, top, 0, 0), 8), draws(substream(0, top - 1, 0, 0), 8))
