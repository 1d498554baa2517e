"""Process-level allocator tuning.

The training loop allocates and frees many ~0.5 MB arrays per iteration.  By
default glibc serves those via mmap and returns them to the kernel on free,
so every iteration pays page-fault costs again.  Raising the mmap/trim
thresholds keeps the buffers on the heap free-list, which speeds the tape up
by an order of magnitude on small VMs.  Best effort: silently skipped where
glibc is unavailable.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold_bytes: int = 1 << 26) -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold_bytes)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, threshold_bytes)
        return bool(ok)
    except Exception:
        return False


tuned = tune_allocator()
