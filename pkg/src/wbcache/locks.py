"""Lock wrappers with optional contention accounting.

When instrumentation is off the factory hands out plain ``threading.Lock``
objects.  When on, every blocking acquisition that actually waits records
(lock kind, waiter role, owner role), and blocking acquisitions of page
"atomic" locks are checked for ascending page order per thread, which is
the artifact's deadlock-freedom argument:

  * readers and writers block-acquire atomic locks in ascending page order,
    then at most one cleanup lock for the page they already own;
  * the LRU lock may be taken while holding atomic locks, but inside it
    victim atomic locks are only try-acquired, never blocked on.
"""

from __future__ import annotations

import threading


class LockRegistry:
    """Thread roles, contention events and the lock-order watchdog."""

    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self._roles: dict[int, str] = {}
        self._mu = threading.Lock()
        self.waits: list[tuple[str, str, str]] = []  # (kind, waiter, owner)
        self.order_violations: list[tuple[int, int]] = []
        self._held_atomic = threading.local()

    def set_role(self, role: str) -> None:
        with self._mu:
            self._roles[threading.get_ident()] = role

    def role_of(self, tid: int | None) -> str:
        with self._mu:
            return self._roles.get(tid, "unknown") if tid else "none"

    def note_wait(self, kind: str, owner_tid: int | None) -> None:
        waiter = self.role_of(threading.get_ident())
        owner = self.role_of(owner_tid)
        with self._mu:
            self.waits.append((kind, waiter, owner))

    def waits_on(self, owner_role: str, waiter_role: str | None = None) -> int:
        with self._mu:
            return sum(1 for kind, waiter, owner in self.waits
                       if owner == owner_role
                       and (waiter_role is None or waiter == waiter_role))

    # ascending-page watchdog for blocking atomic acquisitions
    def _atomic_stack(self) -> list[int]:
        stack = getattr(self._held_atomic, "stack", None)
        if stack is None:
            stack = self._held_atomic.stack = []
        return stack

    def push_atomic(self, page_no: int) -> None:
        stack = self._atomic_stack()
        if stack and page_no <= stack[-1]:
            with self._mu:
                self.order_violations.append((stack[-1], page_no))
        stack.append(page_no)

    def pop_atomic(self, page_no: int) -> None:
        stack = self._atomic_stack()
        if page_no in stack:
            stack.remove(page_no)


class TrackedLock:
    """Mutex that records who it blocked and, for page locks, their order."""

    __slots__ = ("_lock", "_registry", "kind", "tag", "owner")

    def __init__(self, registry: LockRegistry, kind: str, tag: int = -1):
        self._lock = threading.Lock()
        self._registry = registry
        self.kind = kind
        self.tag = tag
        self.owner: int | None = None

    def acquire(self, blocking: bool = True) -> bool:
        if self._lock.acquire(blocking=False):
            self._after_acquire(blocking)
            return True
        if not blocking:
            return False
        self._registry.note_wait(self.kind, self.owner)
        self._lock.acquire()
        self._after_acquire(blocking)
        return True

    def _after_acquire(self, blocking: bool) -> None:
        self.owner = threading.get_ident()
        if blocking and self.kind == "atomic":
            self._registry.push_atomic(self.tag)

    def release(self) -> None:
        if self.kind == "atomic":
            self._registry.pop_atomic(self.tag)
        self.owner = None
        self._lock.release()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
        return False


def make_lock(registry: LockRegistry | None, kind: str, tag: int = -1):
    if registry is not None and registry.enabled:
        return TrackedLock(registry, kind, tag)
    return threading.Lock()
