"""glyphforge: unpaired glyph generation via explicit shape warps + texture transfer.

GLYPHFORGE_THREADS caps the BLAS worker count (0 means deterministic
single-thread). It must be set before numpy is first imported, which is why
this block runs ahead of any submodule import.
"""

import os as _os

_threads = _os.environ.get("GLYPHFORGE_THREADS")
if _threads is not None:
    try:
        _n = max(1, int(_threads))
    except ValueError:
        _n = 1
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ[_var] = str(_n)

from . import autodiff, checks, data, evaluation, geometry, imagecore, losses, networks, training  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "checks",
    "data",
    "evaluation",
    "geometry",
    "imagecore",
    "losses",
    "networks",
    "training",
]
