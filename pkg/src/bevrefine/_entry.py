"""Console entry point.

Pins BLAS/OpenMP pools to one thread before numpy loads: the numeric core is
single-threaded by contract (results must not depend on thread count), and
oversubscribed pools only add overhead. Explicit environment settings win.
"""
import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")


def main() -> None:
    import sys

    from .cli import main as run

    raise SystemExit(run(sys.argv[1:]))
