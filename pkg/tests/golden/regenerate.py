"""Rebuild the frozen golden files. Only run this on a deliberate format change."""

from pathlib import Path

from csoba.algorithms import AlgoConfig, run
from csoba.compressors import CompressorSpec
from csoba.metrics import write_csv
from csoba.problems import QuadraticBilevelSpec, make_quadratic
from csoba.simnet import dump_log

HERE = Path(__file__).parent
SPEC = QuadraticBilevelSpec(n=4, d_x=5, d_y=3, sigma=0.1, seed=7)
NC = AlgoConfig("NcSoba", 0.1, 0.5, 0.5)
C = AlgoConfig("CSoba", 0.1, 0.5, 0.5, upper_comp=CompressorSpec.rand_k(2),
               lower_comp=CompressorSpec.rand_k(1))


def build():
    problem = make_quadratic(SPEC)
    trace = run(NC, problem, 25, seed=3)
    logged = run(C, problem, 3, seed=3, log_messages=True)
    return trace, logged.messages


if __name__ == "__main__":
    trace, messages = build()
    write_csv(trace, HERE / "nc_soba_seed7.csv")
    dump_log(messages, HERE / "c_soba_messages.bin")
