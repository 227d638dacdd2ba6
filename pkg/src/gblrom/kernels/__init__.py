"""Element assembly kernels with a compiled core and a pure-numpy fallback.

The backend is chosen once at import: the Cython extension if it built,
otherwise the numpy reference. Set GBLROM_KERNELS=python to force the
fallback (used by the benchmark and the cross-checking tests).
"""

from __future__ import annotations

import os

from . import reference

if os.environ.get("GBLROM_KERNELS", "").lower() in ("python", "numpy", "reference"):
    _impl = reference
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = reference
        BACKEND = "python"

weighted_mass_blocks = _impl.weighted_mass_blocks
squared_weighted_mass_blocks = _impl.squared_weighted_mass_blocks
cubic_load = _impl.cubic_load
double_well_integral = _impl.double_well_integral
scatter_add = _impl.scatter_add

__all__ = [
    "BACKEND",
    "reference",
    "weighted_mass_blocks",
    "squared_weighted_mass_blocks",
    "cubic_load",
    "double_well_integral",
    "scatter_add",
]
