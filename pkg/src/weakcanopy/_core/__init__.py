"""Hot kernels: a compiled extension when built, otherwise pure Python.

Set ``WEAKCANOPY_PURE_PYTHON=1`` to force the fallback.
"""
import os

BACKEND = "python"

if os.environ.get("WEAKCANOPY_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._watershed import flood as flood  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

if BACKEND == "python":
    from ._watershed_py import flood as flood  # noqa: F811

from ._watershed_py import flood as flood_python  # noqa: E402

__all__ = ["BACKEND", "flood", "flood_python", "COST_SCALE"]

# Step costs are stored as integers in units of 2**-32.
COST_SCALE = float(2 ** 32)
