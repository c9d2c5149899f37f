"""Passive imitation of experimenting experts on random causal DAGs."""

import os as _os

# Must run before numpy loads BLAS: pin thread pools so float reductions are
# reproducible run to run.
if _os.environ.get("PASSIVE_CAUSAL_DETERMINISTIC", "0") == "1":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ[_var] = "1"

__version__ = "0.1.0"
