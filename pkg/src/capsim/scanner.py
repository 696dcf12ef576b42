"""Recursive capability scanning: the reachable-memory closure of a root.

Walking a capability means probing every 16-byte granule in its range,
loading capability-sized values, and recursing on tagged readable finds.
The seen structure keeps one entry per maximal range: subsets of an
existing entry are absorbed, supersets replace everything they cover and
are scanned themselves.  Sealed and sentry capabilities are recorded but
never dereferenced.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .capability import Capability, Permissions
from .errors import InvalidCapability, PermissionDenied, Unmapped
from .memory import GRANULE, TaggedMemory


class InsertResult(enum.Enum):
    ALREADY_COVERED = "already_covered"
    INSERTED = "inserted"
    REPLACED_SUPERSET = "replaced_superset"


@dataclass(frozen=True)
class RegionEntry:
    cap: Capability

    @property
    def lo(self) -> int:
        return self.cap.base

    @property
    def hi(self) -> int:
        return self.cap.top


class RegionSet:
    """Deduplicated reachable regions with their governing capabilities."""

    def __init__(self) -> None:
        self.entries: list[RegionEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def insert(self, cap: Capability) -> InsertResult:
        lo, hi = cap.base, cap.top
        unsealed = cap.seal.is_unsealed
        for e in self.entries:
            # a sealed entry is never walked, so it cannot absorb an
            # unsealed capability without losing reachable memory
            if unsealed and not e.cap.seal.is_unsealed:
                continue
            if e.lo <= lo and hi <= e.hi:
                return InsertResult.ALREADY_COVERED
        covered = [e for e in self.entries if lo <= e.lo and e.hi <= hi and (e.lo, e.hi) != (lo, hi)]
        if covered:
            for e in covered:
                self.entries.remove(e)
            self.entries.append(RegionEntry(cap))
            return InsertResult.REPLACED_SUPERSET
        self.entries.append(RegionEntry(cap))
        return InsertResult.INSERTED

    def ranges(self) -> list[tuple[int, int]]:
        return sorted((e.lo, e.hi) for e in self.entries)

    def merged_ranges(self) -> list[tuple[int, int]]:
        merged: list[tuple[int, int]] = []
        for lo, hi in self.ranges():
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        return merged

    def covers(self, addr: int, width: int = 1) -> bool:
        return any(e.lo <= addr and addr + width <= e.hi for e in self.entries)

    def report(self) -> str:
        """One rendered capability per entry, in discovery order."""
        return "\n".join(e.cap.render() for e in self.entries)


@dataclass(frozen=True)
class ScanLimits:
    max_depth: int = 64
    max_granules: int = 1 << 24


@dataclass
class ScanStats:
    caps_found: int = 0
    granules_probed: int = 0
    max_depth: int = 0
    truncated: bool = False


def scan_recursive(
    root: Capability,
    memory: TaggedMemory,
    limits: ScanLimits = ScanLimits(),
) -> tuple[RegionSet, ScanStats]:
    """Depth-first transitive closure of the regions reachable from ``root``.

    Unmapped granules are probed and skipped rather than faulting.  When a
    budget runs out the partial set is returned with ``stats.truncated``
    set.
    """
    if not root.tag:
        raise InvalidCapability("scan root is untagged")
    if not root.perms.load:
        raise PermissionDenied("scan root lacks load permission")
    regions = RegionSet()
    stats = ScanStats()
    regions.insert(root)
    worklist: list[tuple[Capability, int]] = []
    if root.seal.is_unsealed:
        worklist.append((root, 0))
    while worklist:
        cap, depth = worklist.pop()
        if depth > limits.max_depth:
            stats.truncated = True
            continue
        stats.max_depth = max(stats.max_depth, depth)
        start = (cap.base + GRANULE - 1) & ~(GRANULE - 1)
        for g in range(start, cap.top - GRANULE + 1, GRANULE):
            if stats.granules_probed >= limits.max_granules:
                stats.truncated = True
                break
            stats.granules_probed += 1
            if not memory.probe(g):
                continue
            try:
                found = memory.load_cap(cap, g)
            except Unmapped:
                continue
            if not found.tag or not found.perms.load:
                continue
            result = regions.insert(found)
            if result is InsertResult.ALREADY_COVERED:
                continue
            if found.seal.is_unsealed:
                worklist.append((found, depth + 1))
        if stats.truncated and stats.granules_probed >= limits.max_granules:
            break
    stats.caps_found = len(regions)
    return regions, stats


def find_caps_with_perms(
    regions: RegionSet, required: Permissions, memory: TaggedMemory
) -> list[Capability]:
    """Every capability stored inside the set's regions whose permissions
    include ``required``, ordered by the address it was found at."""
    hits: list[tuple[int, Capability]] = []
    seen: set[int] = set()
    for entry in regions:
        cap = entry.cap
        if not cap.seal.is_unsealed or not cap.tag:
            continue
        start = (cap.base + GRANULE - 1) & ~(GRANULE - 1)
        for lo, hi in memory.mapped_ranges(start, cap.top):
            lo = (lo + GRANULE - 1) & ~(GRANULE - 1)
            for g in range(lo, hi - GRANULE + 1, GRANULE):
                if g in seen:
                    continue
                seen.add(g)
                found = memory.load_cap(cap, g)
                if found.tag and required.is_subset_of(found.perms):
                    hits.append((g, found))
    hits.sort(key=lambda item: item[0])
    return [cap for _, cap in hits]


def search_bytes(
    regions: RegionSet, needle: bytes, memory: TaggedMemory
) -> list[tuple[Capability, int]]:
    """Occurrences of ``needle`` inside the set's readable regions.

    Reads go through each entry's own capability, so a match can never
    cross a region boundary.
    """
    if not needle:
        raise ValueError("needle must be non-empty")
    results: list[tuple[Capability, int]] = []
    for entry in regions:
        cap = entry.cap
        if not cap.seal.is_unsealed or not cap.tag or not cap.perms.load:
            continue
        for lo, hi in memory.mapped_ranges(cap.base, cap.top):
            data = memory.load_data(cap, lo, hi - lo)
            at = data.find(needle)
            while at != -1:
                results.append((cap, lo + at))
                at = data.find(needle, at + 1)
    return results
