"""Backend selection for the hot kernels.

The compiled extension (``gatnerf._ckernels``) is used when it imports;
otherwise the numpy versions in :mod:`gatnerf._kernels_py` are used.
Set ``GATNERF_KERNELS=python`` to force the fallback, or
``GATNERF_KERNELS=compiled`` to make a missing extension an error.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_NAMES = (
    "layernorm_forward",
    "layernorm_backward",
    "composite_forward",
    "composite_backward",
    "sample_pdf",
)

_python = _kernels_py

try:
    from . import _ckernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def available_backends():
    return ["python"] + (["compiled"] if _compiled is not None else [])


def get_backend(name):
    """Return the kernel module for ``name`` ("python" or "compiled")."""
    if name == "python":
        return _python
    if name == "compiled":
        if _compiled is None:
            raise ImportError("gatnerf._ckernels is not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name):
    """Rebind the module-level kernel functions to backend ``name``."""
    global BACKEND
    mod = get_backend(name)
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name


_requested = os.environ.get("GATNERF_KERNELS", "").strip().lower()
if _requested in ("python", "compiled"):
    use_backend(_requested)
else:
    if _requested:
        log.warning("ignoring GATNERF_KERNELS=%r", _requested)
    use_backend("compiled" if _compiled is not None else "python")
