"""Modeled heap allocator with configurable hardening policies.

Arenas carve 64 KiB slabs out of one pooled heap region.  Small requests
bump-allocate within a slab and reuse freed chunks LIFO per size class;
slab-sized requests take dedicated slab runs.  Slabs whose chunks are all
dead return to the pool scrubbed (bytes zeroed, tags cleared), modeling
the OS zero-filling recycled pages, and may later back a different
arena.  Retained capabilities into recycled slabs therefore stay valid
unless the revocation policy sweeps them: quarantined chunks are released
only after every stored capability pointing into them has been untagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .capability import PERM_RWRW, Capability
from .errors import DoubleFree, ForeignChunk, OutOfMemory
from .memory import MappedRegion, TaggedMemory

SLAB_SIZE = 0x10000

SHARED_OWNER = "shared"


@dataclass(frozen=True)
class AllocatorPolicy:
    zero_on_free: bool = False
    per_compartment_arenas: bool = False
    revocation: bool = False
    quarantine_epoch_len: int = 1024

    def __post_init__(self) -> None:
        if self.revocation and self.quarantine_epoch_len < 1:
            raise ValueError("quarantine epoch must be at least one free")


class HeapPool:
    """Slab-grained backing store shared by every arena of one machine."""

    def __init__(self, memory: TaggedMemory, region: MappedRegion, root: Capability) -> None:
        if region.length % SLAB_SIZE:
            raise ValueError("heap region must be slab-aligned")
        self.memory = memory
        self.region = region
        self.root = root
        count = region.length // SLAB_SIZE
        # stack of free slab indexes; pop() yields ascending addresses until
        # recycled slabs (pushed back on release) take priority
        self._free: list[int] = list(range(count - 1, -1, -1))

    def slab_base(self, idx: int) -> int:
        return self.region.base + idx * SLAB_SIZE

    def acquire_one(self) -> int:
        if not self._free:
            raise OutOfMemory("heap pool exhausted")
        return self._free.pop()

    def acquire_run(self, count: int) -> list[int]:
        if count == 1:
            return [self.acquire_one()]
        available = sorted(self._free)
        for i in range(len(available) - count + 1):
            if available[i + count - 1] - available[i] == count - 1:
                chosen = available[i : i + count]
                picked = set(chosen)
                self._free = [s for s in self._free if s not in picked]
                return chosen
        raise OutOfMemory(f"no contiguous run of {count} slabs")

    def release(self, indexes: list[int]) -> None:
        """Scrub and return slabs; the most recently released is handed out first."""
        for idx in indexes:
            self.memory.store_data(self.root, self.slab_base(idx), bytes(SLAB_SIZE))
            self._free.append(idx)


@dataclass
class Arena:
    """One compartment's view of the heap."""

    owner: str
    pool: HeapPool
    policy: AllocatorPolicy
    _slabs: list[int] = field(default_factory=list)
    _open: tuple[int, int] | None = None  # (slab index, bump offset)
    _runs: dict[int, list[int]] = field(default_factory=dict)  # chunk base -> slab indexes
    _live: dict[int, int] = field(default_factory=dict)  # chunk base -> size
    _free: dict[int, list[int]] = field(default_factory=dict)  # size -> LIFO of bases
    _freed: set[int] = field(default_factory=set)
    _quarantine: list[tuple[int, int]] = field(default_factory=list)
    _epoch: int = 0

    @property
    def region(self) -> MappedRegion:
        return self.pool.region

    @property
    def memory(self) -> TaggedMemory:
        return self.pool.memory

    def live_ranges(self) -> list[tuple[int, int]]:
        return sorted((b, b + s) for b, s in self._live.items())

    def quarantined(self) -> list[tuple[int, int]]:
        return list(self._quarantine)

    def free_chunks(self) -> list[tuple[int, int]]:
        return sorted(
            (b, b + size) for size, stack in self._free.items() for b in stack
        )

    def alloc(self, size: int) -> Capability:
        """Hand out a read/write capability bounded exactly to the chunk.

        Reuse is LIFO per size class; contents are whatever the previous
        owner left unless a policy already scrubbed them.
        """
        if size <= 0:
            raise ValueError("allocation size must be positive")
        rounded = (size + 15) & ~15
        if rounded > SLAB_SIZE // 2:
            base = self._alloc_run(rounded)
        else:
            stack = self._free.get(rounded)
            if stack:
                base = stack.pop()
                self._freed.discard(base)
            else:
                base = self._bump(rounded)
        self._live[base] = rounded
        return self.pool.root.derive(base, base + rounded, PERM_RWRW)

    def free(self, cap: Capability) -> None:
        base = cap.base
        if base not in self._live:
            if base in self._freed:
                raise DoubleFree(f"chunk 0x{base:x} already freed")
            raise ForeignChunk(f"0x{base:x} is not a live chunk of arena {self.owner!r}")
        size = self._live.pop(base)
        if self.policy.zero_on_free:
            self.memory.store_data(self.pool.root, base, bytes(size))
        self._freed.add(base)
        if self.policy.revocation:
            self._quarantine.append((base, size))
            self._epoch += 1
            if self._epoch >= self.policy.quarantine_epoch_len:
                self._sweep_epoch()
        else:
            self._free.setdefault(size, []).append(base)

    def flush_quarantine(self) -> int:
        """Sweep and release any chunks still quarantined; returns tags cleared."""
        if self.policy.revocation and self._quarantine:
            return self._sweep_epoch()
        return 0

    def trim(self) -> list[int]:
        """Return fully dead slabs to the pool, scrubbed.

        A slab is dead when no live or quarantined chunk touches it.  Free
        chunks inside released slabs disappear with the slab.
        """
        pinned = {self._slab_of(b) for b in self._live if b not in self._runs}
        pinned |= {self._slab_of(b) for b, _ in self._quarantine}
        victims = [idx for idx in self._slabs if idx not in pinned]
        released: list[int] = []
        if victims:
            dead = set(victims)
            self._slabs = [i for i in self._slabs if i not in dead]
            if self._open is not None and self._open[0] in dead:
                self._open = None
            self._purge_free_entries(dead)
            self.pool.release(victims)
            released.extend(victims)
        for base in [b for b in self._runs if b not in self._live]:
            if any(b == base for b, _ in self._quarantine):
                continue
            slabs = self._runs.pop(base)
            self._purge_free_entries(set(slabs))
            self.pool.release(slabs)
            released.extend(slabs)
        return released

    # -- internals --------------------------------------------------------

    def _slab_of(self, base: int) -> int:
        return (base - self.region.base) // SLAB_SIZE

    def _bump(self, rounded: int) -> int:
        if self._open is not None:
            idx, off = self._open
            if off + rounded <= SLAB_SIZE:
                self._open = (idx, off + rounded)
                return self.pool.slab_base(idx) + off
        idx = self.pool.acquire_one()
        self._slabs.append(idx)
        self._open = (idx, rounded)
        return self.pool.slab_base(idx)

    def _alloc_run(self, rounded: int) -> int:
        count = -(-rounded // SLAB_SIZE)
        slabs = self.pool.acquire_run(count)
        base = self.pool.slab_base(slabs[0])
        self._runs[base] = slabs
        return base

    def _sweep_epoch(self) -> int:
        cleared = self.memory.sweep_invalidate(
            [(b, b + s) for b, s in self._quarantine]
        )
        for base, size in self._quarantine:
            self._free.setdefault(size, []).append(base)
        self._quarantine = []
        self._epoch = 0
        return cleared

    def _purge_free_entries(self, dead_slabs: set[int]) -> None:
        for size, stack in list(self._free.items()):
            kept = [b for b in stack if self._slab_of(b) not in dead_slabs]
            if kept:
                self._free[size] = kept
            else:
                del self._free[size]
        self._freed = {b for b in self._freed if self._slab_of(b) not in dead_slabs}


class Allocator:
    """Arena registry: one shared arena, or one per compartment."""

    def __init__(
        self,
        memory: TaggedMemory,
        region: MappedRegion,
        root: Capability,
        policy: AllocatorPolicy,
    ) -> None:
        self.policy = policy
        self.pool = HeapPool(memory, region, root)
        self._arenas: dict[str, Arena] = {}

    def arena_for(self, compartment: str) -> Arena:
        key = compartment if self.policy.per_compartment_arenas else SHARED_OWNER
        arena = self._arenas.get(key)
        if arena is None:
            arena = Arena(owner=key, pool=self.pool, policy=self.policy)
            self._arenas[key] = arena
        return arena

    def arenas(self) -> list[Arena]:
        return list(self._arenas.values())

    def housekeep(self, compartment: str) -> None:
        """End-of-call maintenance for one compartment's arena."""
        arena = self.arena_for(compartment)
        arena.flush_quarantine()
        arena.trim()
