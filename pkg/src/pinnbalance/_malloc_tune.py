"""Allocator tuning for large per-call numpy workspaces.

The field kernels allocate multi-megabyte scratch arrays on every forward
and reverse pass.  glibc malloc serves blocks above its mmap threshold with
fresh mmap/munmap pairs, so each training step pays page-fault and TLB
costs that can triple the step time on a single core.  Raising the mmap
and trim thresholds keeps those blocks on the main heap free lists, where
they are recycled without kernel round trips.

The tuning is process-global but strictly a performance hint: it never
changes results, only where the allocator places large blocks.  Set
PINNBALANCE_MALLOC_TUNE=0 to disable it.  Platforms without glibc
mallopt (macOS, musl, Windows) are silently left untouched.
"""

from __future__ import annotations

import ctypes
import os

# mallopt parameter ids from glibc malloc.h.
_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_THRESHOLD_BYTES = 1 << 26  # 64 MiB: larger than any kernel workspace

_applied: bool | None = None


def tune_malloc() -> bool:
    """Raise glibc's mmap/trim thresholds once per process.

    Returns True when the tuning call succeeded, False when disabled or
    unavailable.  Safe to call repeatedly.
    """
    global _applied
    if _applied is not None:
        return _applied
    if os.environ.get("PINNBALANCE_MALLOC_TUNE", "1") == "0":
        _applied = False
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok_mmap = libc.mallopt(_M_MMAP_THRESHOLD, _THRESHOLD_BYTES)
        ok_trim = libc.mallopt(_M_TRIM_THRESHOLD, _THRESHOLD_BYTES)
        _applied = bool(ok_mmap) and bool(ok_trim)
    except (OSError, AttributeError):
        _applied = False
    return _applied
