"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The tree-descent sampling walk is the one scalar loop numpy cannot
vectorize (its control flow is data dependent), so it ships both as a
Cython extension and as a line-for-line Python twin. Both consume uniforms
from the same buffered stream in the same order, so trajectories are
bit-identical across lanes. Set NEGTREE_PURE_PYTHON=1 to force the
fallback; ``bench/bench_walk.py`` compares the two.
"""

import os

from . import walk_py

if os.environ.get("NEGTREE_PURE_PYTHON") == "1":
    _walk_impl = walk_py
    KERNEL_LANE = "python"
else:
    try:
        from . import _walk as _walk_impl  # type: ignore[attr-defined]
        KERNEL_LANE = "compiled"
    except ImportError:
        _walk_impl = walk_py
        KERNEL_LANE = "python"

walk_batch = _walk_impl.walk_batch

__all__ = ["walk_batch", "walk_py", "KERNEL_LANE"]
