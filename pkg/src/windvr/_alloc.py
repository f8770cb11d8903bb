"""Keep large numpy temporaries on the glibc heap instead of fresh mmaps.

Every op here allocates arrays of ~1 MB; served by mmap each one page-faults
on first touch, which costs more than the arithmetic. Raising the mmap and
trim thresholds lets freed blocks be reused.
"""

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator() -> bool:
    global _done
    if _done or not sys.platform.startswith("linux") or os.environ.get("WINDVR_NO_MALLOC_TUNING"):
        return _done
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
