"""Durable user-space write-back cache for file I/O.

Writes become synchronously durable by logging to a persistent-memory
region; a background cleaner propagates them to slower backing storage.
A simulated persistence domain plus crash-injection harness lets the test
suite prove recovery correctness at every flush/fence boundary.
"""

from .core import WriteBackCache
from .pmem import (ADVERSARIAL_SUBSET, DROP_ALL_UNFLUSHED, PERSIST_ALL,
                   CrashSchedule, MappedPmem, SimulatedPmem)

__all__ = [
    "WriteBackCache",
    "SimulatedPmem",
    "MappedPmem",
    "CrashSchedule",
    "DROP_ALL_UNFLUSHED",
    "ADVERSARIAL_SUBSET",
    "PERSIST_ALL",
]

__version__ = "0.1.0"
