"""Sparse-view fan-beam CT reconstruction with multi-scale sinogram score priors."""
import os

import numba

# Avoid the TBB layer warning on machines without a matching TBB build.
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"


def set_threads(count: int | None = None) -> int:
    """Cap numba and torch worker threads (``MSDIFF_THREADS`` when ``count`` is None)."""
    import torch

    if count is None:
        count = int(os.environ.get("MSDIFF_THREADS", "0")) or os.cpu_count() or 1
    count = max(1, min(count, numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    torch.set_num_threads(count)
    return count
