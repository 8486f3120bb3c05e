"""Thread-count pinning, applied before numpy is first imported.

DLF_THREADS caps the BLAS worker pools (default 1 so runs are
bit-reproducible). Must run ahead of any `import numpy` in this package.
"""

import os

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def configure_threads() -> int:
    n = os.environ.get("DLF_THREADS", "1")
    try:
        count = max(1, int(n))
    except ValueError:
        count = 1
    for var in _BLAS_VARS:
        os.environ.setdefault(var, str(count))
    return count
