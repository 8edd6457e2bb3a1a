"""Shared harness bits for the test suite."""

from wbcache.backstore import SimBackstore, SimDiskConfig
from wbcache.cleaner import BatchPolicy
from wbcache.core import WriteBackCache
from wbcache.pmem import ADVERSARIAL_SUBSET, CrashSchedule, SimulatedPmem
from wbcache.wlog import WriteLog, region_size_for


def trace_region(entry_data_size=128, nb_entries=16, line=64):
    size = region_size_for(entry_data_size, nb_entries, line)
    return SimulatedPmem(size, line, record_trace=True)


def fast_region(entry_data_size=128, nb_entries=16, line=64):
    size = region_size_for(entry_data_size, nb_entries, line)
    return SimulatedPmem(size, line, record_trace=False)


def new_log(entry_data_size=128, nb_entries=16, trace=True):
    region = trace_region(entry_data_size, nb_entries) if trace \
        else fast_region(entry_data_size, nb_entries)
    return WriteLog.create(region, entry_data_size, nb_entries)


def reattach(region, point, seed=0, policy=ADVERSARIAL_SUBSET, trace=False):
    """Crash the region at an event ordinal and attach a log to the image."""
    img = region.crash(CrashSchedule(seed=seed, policy=policy, crash_point=point))
    return WriteLog.attach(SimulatedPmem.from_image(img, record_trace=trace))


def sweep_points(region, stride=1):
    return range(0, region.event_count + 1, stride)


def build_cache(page_size=256, entry_size=256, nb_entries=64, cache_pages=8,
                min_batch=1, max_batch=1000, poll=0.0005, trace=False,
                threaded=True, store=None, **kw):
    """A full stack on simulated pmem + simulated disk, scaled for tests."""
    region = SimulatedPmem(region_size_for(entry_size, nb_entries),
                           record_trace=trace)
    if store is None:
        store = SimBackstore(SimDiskConfig())
    cache = WriteBackCache(region, store, entry_data_size=entry_size,
                           nb_entries=nb_entries, page_size=page_size,
                           cache_pages=cache_pages,
                           batch=BatchPolicy(min_batch, max_batch, poll),
                           start_cleaner=threaded, **kw)
    return cache, store


class ShadowFile:
    """Plain in-memory reference file for oracle comparisons."""

    def __init__(self, data=b""):
        self.data = bytearray(data)
        self.cursor = 0

    @property
    def size(self):
        return len(self.data)

    def _apply(self, offset, payload):
        end = offset + len(payload)
        if end > len(self.data):
            self.data.extend(bytes(end - len(self.data)))
        self.data[offset:end] = payload

    def write(self, payload):
        self._apply(self.cursor, payload)
        self.cursor += len(payload)
        return len(payload)

    def pwrite(self, payload, offset):
        self._apply(offset, payload)
        return len(payload)

    def read(self, length):
        out = bytes(self.data[self.cursor:self.cursor + length])
        self.cursor += len(out)
        return out

    def pread(self, length, offset):
        return bytes(self.data[offset:offset + length])

    def seek(self, offset, whence=0):
        base = (0, self.cursor, len(self.data))[whence]
        target = base + offset
        if target < 0:
            raise ValueError("negative seek")
        self.cursor = target
        return target
