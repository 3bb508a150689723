"""Kernel backend selection.

The hot numeric kernels (blocked PCG, CSR matvec, row-wise simplex
projection) exist twice: a numba-jitted implementation and a pure
numpy/scipy one. The environment variable RWSEG_BACKEND picks which one
the package uses:

    RWSEG_BACKEND=numba   force the jitted kernels (error if numba missing)
    RWSEG_BACKEND=numpy   force the pure-numpy fallback
    RWSEG_BACKEND=auto    numba when importable, numpy otherwise (default)
"""

from __future__ import annotations

import os

_VALID = ("auto", "numba", "numpy")


def resolve_backend(name: str | None = None) -> str:
    """Return "numba" or "numpy" for the requested (or env-configured) backend."""
    requested = (name if name is not None else os.environ.get("RWSEG_BACKEND", "auto"))
    requested = requested.strip().lower() or "auto"
    if requested not in _VALID:
        raise ValueError(f"unknown backend {requested!r}; expected one of {_VALID}")
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise
        return "numpy"
    return "numba"
