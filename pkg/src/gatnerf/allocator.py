"""Keep large numpy temporaries on the heap between training steps.

A step allocates and frees the same multi-megabyte activation arrays over
and over.  glibc hands blocks that size out as fresh mmap regions, so every
step pays page faults on memory it just released.  Raising the mmap and trim
thresholds lets freed blocks be reused instead.  No-op outside glibc.
"""

import ctypes
import ctypes.util
import logging
import platform

log = logging.getLogger(__name__)

M_TRIM_THRESHOLD = -1
M_TOP_PAD = -2
M_MMAP_THRESHOLD = -3
# glibc caps the mmap threshold at 32 MiB on 64-bit builds
MMAP_THRESHOLD = 32 << 20
TRIM_THRESHOLD = 1 << 30
TOP_PAD = 64 << 20

_done = False


def tune_for_reuse():
    """Apply the thresholds once per process; returns whether they took effect."""
    global _done
    if _done:
        return True
    if platform.system() != "Linux" or platform.libc_ver()[0] != "glibc":
        return False
    path = ctypes.util.find_library("c")
    if path is None:
        return False
    libc = ctypes.CDLL(path)
    ok = all(libc.mallopt(opt, val) == 1 for opt, val in (
        (M_MMAP_THRESHOLD, MMAP_THRESHOLD), (M_TRIM_THRESHOLD, TRIM_THRESHOLD), (M_TOP_PAD, TOP_PAD)))
    if not ok:
        log.debug("mallopt rejected the allocator thresholds")
    _done = ok
    return ok
