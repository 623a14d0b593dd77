"""Deterministic star-topology message layer: streams, logs, bit ledger."""

import struct
from dataclasses import dataclass, field

from ._rng import RngStream, as_generator, substream  # noqa: F401
from .compressors import CompressedMessage, bit_cost

# message slots within one (round, worker) cell
SLOT_SAMPLE = 0
SLOT_UPPER = 1
SLOT_LOWER_Y = 2
SLOT_LOWER_Z = 3
SLOT_INIT = 4


@dataclass
class LogEntry:
    round: int
    worker: int
    slot: int
    message: CompressedMessage


@dataclass
class BitLedger:
    uplink_bits: int = 0
    broadcast_bits: int = 0
    rows: list = field(default_factory=list)

    def record(self, message):
        self.uplink_bits += bit_cost(message)
        return self

    def record_broadcast(self, bits):
        if bits < 0:
            raise ValueError("broadcast bits must be nonnegative")
        self.broadcast_bits += int(bits)
        return self

    def close_round(self, round_index):
        self.rows.append((round_index, self.uplink_bits, self.broadcast_bits))
        return self


def record(ledger, message):
    return ledger.record(message)


def replay_uplink(log):
    """Recount uplink bits from a message log, independently of any ledger."""
    return sum(bit_cost(entry.message) for entry in log)


_ENTRY_HEADER = struct.Struct("<IIBI")


def dump_log(log, path):
    with open(path, "wb") as fh:
        for entry in log:
            blob = entry.message.to_bytes()
            fh.write(_ENTRY_HEADER.pack(entry.round, entry.worker, entry.slot, len(blob)))
            fh.write(blob)


def load_log(path):
    entries = []
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        rnd, worker, slot, size = _ENTRY_HEADER.unpack_from(data, pos)
        pos += _ENTRY_HEADER.size
        msg = CompressedMessage.from_bytes(data[pos:pos + size])
        pos += size
        entries.append(LogEntry(rnd, worker, slot, msg))
    return entries
