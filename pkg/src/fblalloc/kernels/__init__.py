"""Hot-kernel backend selection.

The jitted path is the default. Set FBLALLOC_NO_NUMBA=1 to force the
pure-numpy fallback; it is also used automatically when numba cannot be
imported. Both backends expose the same functions:

    q_array, inv_q_array, tx_power_array, k_star_array, node_profile

benchmarks/bench_kernels.py compares the two.
"""

from __future__ import annotations

import logging
import os

from . import _numpy as numpy_backend

_log = logging.getLogger(__name__)

if os.environ.get("FBLALLOC_NO_NUMBA", "").lower() in ("1", "true", "yes"):
    numba_backend = None
    active = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _numba as numba_backend

        active = numba_backend
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - exercised only without numba
        _log.warning("numba unavailable; falling back to pure-numpy kernels")
        numba_backend = None
        active = numpy_backend
        BACKEND = "numpy"

q_array = active.q_array
inv_q_array = active.inv_q_array
tx_power_array = active.tx_power_array
k_star_array = active.k_star_array
node_profile = active.node_profile
