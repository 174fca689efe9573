"""
Host introspection used to size worker pools
"""

import os
from typing import Optional

import psutil


def machine_cores() -> int:
    """Logical core count, falling back to 1 when it cannot be determined"""
    return psutil.cpu_count(logical=True) or os.cpu_count() or 1


def worker_threads(requested: Optional[int] = None) -> int:
    """Number of worker threads: an explicit cap (SBAT_THREADS) or the machine's cores"""
    if requested is not None and requested > 0:
        return requested
    return machine_cores()
