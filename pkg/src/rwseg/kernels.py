"""Hot-kernel dispatch.

Imports the backend chosen by ``rwseg.backend.resolve_backend`` and
re-exports its kernels. Everything downstream imports from here.
"""

from __future__ import annotations

from .backend import resolve_backend

BACKEND = resolve_backend()

if BACKEND == "numba":
    from . import _kernels_numba as _impl
else:
    from . import _kernels_numpy as _impl

PCG_CONVERGED = _impl.PCG_CONVERGED
PCG_MAX_ITER = _impl.PCG_MAX_ITER
PCG_BREAKDOWN = _impl.PCG_BREAKDOWN

csr_matvec = _impl.csr_matvec
csr_matvec_block = _impl.csr_matvec_block
pcg_block = _impl.pcg_block
project_rows = _impl.project_rows
pg_simplex_blocks = _impl.pg_simplex_blocks

# stencil-form PCG exists on the numba backend only; grid problems fall
# back to the CSR path when it is unavailable
pcg_stencil = getattr(_impl, "pcg_stencil", None)


def warmup():
    """Precompile jitted kernels (no-op on the numpy backend)."""
    if BACKEND == "numba":
        _impl.warmup()
