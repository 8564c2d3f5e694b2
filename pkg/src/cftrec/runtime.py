"""Process-level tuning for the numpy-heavy training loop."""

from __future__ import annotations

import ctypes
import ctypes.util
import os

# glibc mallopt parameters
_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Keep freed activation buffers in the heap instead of returning them to the OS.

    Every forward pass allocates a few MB per op; with glibc defaults most of
    those go through mmap/munmap and page faults dominate the step time.
    Returns True when the settings were applied. Set ``CFTREC_NO_MALLOPT=1``
    to skip.
    """
    global _done
    if _done:
        return True
    if os.environ.get("CFTREC_NO_MALLOPT"):
        return False
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    mallopt.restype = ctypes.c_int
    ok = mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024)
    ok &= mallopt(_M_TRIM_THRESHOLD, 1024 * 1024 * 1024)
    ok &= mallopt(_M_TOP_PAD, 256 * 1024 * 1024)
    _done = bool(ok)
    return _done
