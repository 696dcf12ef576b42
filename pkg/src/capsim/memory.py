"""Flat simulated address space with one tag bit per 16-byte granule.

Every load and store is mediated by a capability and faults exactly where
the modeled hardware would.  Capability values written with ``store_cap``
are kept out of band per granule; the 16 in-band bytes hold only a data
projection (pointer value and base), so no sequence of data writes can
ever produce a tagged capability.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, replace
from typing import Iterable, Iterator

from .capability import PERM_NONE, UNSEALED, Capability
from .errors import (
    InvalidCapability,
    Misaligned,
    OutOfBounds,
    OverlappingMapping,
    PermissionDenied,
    SealedCapability,
    Unmapped,
)

GRANULE = 16
_BUCKET_SHIFT = 16  # sweep index groups stored-capability bases into 64 KiB buckets


@dataclass(frozen=True)
class MappedRegion:
    base: int
    length: int

    @property
    def top(self) -> int:
        return self.base + self.length


class TaggedMemory:
    """Mapped spans, backing bytes, and the per-granule tag store."""

    def __init__(self) -> None:
        self._bases: list[int] = []
        self._buffers: dict[int, bytearray] = {}
        self._lengths: dict[int, int] = {}
        self._tags: set[int] = set()
        self._shadow: dict[int, Capability] = {}
        # tagged granules indexed by the bucket their stored value points into;
        # values spanning buckets go to the wide set
        self._buckets: dict[int, set[int]] = {}
        self._wide: set[int] = set()

    # -- mapping ----------------------------------------------------------

    def map_region(self, base: int, length: int) -> MappedRegion:
        if base % GRANULE or length % GRANULE or length <= 0:
            raise Misaligned(f"mapping 0x{base:x}+0x{length:x} not granule-aligned")
        idx = bisect.bisect_right(self._bases, base)
        if idx > 0:
            prev = self._bases[idx - 1]
            if prev + self._lengths[prev] > base:
                raise OverlappingMapping(f"0x{base:x} overlaps span at 0x{prev:x}")
        if idx < len(self._bases) and base + length > self._bases[idx]:
            raise OverlappingMapping(
                f"0x{base:x}+0x{length:x} overlaps span at 0x{self._bases[idx]:x}"
            )
        self._bases.insert(idx, base)
        self._buffers[base] = bytearray(length)
        self._lengths[base] = length
        return MappedRegion(base, length)

    @property
    def regions(self) -> list[MappedRegion]:
        return [MappedRegion(b, self._lengths[b]) for b in self._bases]

    def probe(self, addr: int) -> bool:
        """Report whether the address is mapped; never faults."""
        return self._span_of(addr) is not None

    def _span_of(self, addr: int) -> int | None:
        idx = bisect.bisect_right(self._bases, addr) - 1
        if idx < 0:
            return None
        base = self._bases[idx]
        if addr < base + self._lengths[base]:
            return base
        return None

    def mapped_ranges(self, lo: int, hi: int) -> list[tuple[int, int]]:
        """Intersections of [lo, hi) with the mapped spans, in address order."""
        out = []
        idx = max(bisect.bisect_right(self._bases, lo) - 1, 0)
        for base in self._bases[idx:]:
            if base >= hi:
                break
            top = base + self._lengths[base]
            a, b = max(lo, base), min(hi, top)
            if a < b:
                out.append((a, b))
        return out

    # -- access checks ----------------------------------------------------

    def _check(self, cap: Capability, addr: int, width: int, perm: str) -> None:
        if not cap.tag:
            raise InvalidCapability(f"access via untagged capability {cap.render()}")
        if not cap.seal.is_unsealed:
            raise SealedCapability(f"access via {cap.render()}")
        if not getattr(cap.perms, perm):
            raise PermissionDenied(f"{cap.render()} lacks {perm}")
        if not cap.contains(addr, width):
            raise OutOfBounds(
                f"[0x{addr:x}+0x{width:x}) outside [0x{cap.base:x}-0x{cap.top:x})"
            )
        covered = self.mapped_ranges(addr, addr + width)
        total = sum(b - a for a, b in covered)
        if total != width:
            raise Unmapped(f"[0x{addr:x}+0x{width:x}) not fully mapped")

    # -- data access ------------------------------------------------------

    def load_data(self, cap: Capability, addr: int, length: int) -> bytes:
        """Read raw bytes; never reveals tag state."""
        if length < 0:
            raise ValueError("negative length")
        self._check(cap, addr, length, "load")
        return bytes(self._gather(addr, length))

    def store_data(self, cap: Capability, addr: int, data: bytes) -> None:
        """Write raw bytes and clear the tag of every overlapped granule."""
        self._check(cap, addr, len(data), "store")
        self._scatter(addr, data)
        if data:
            self._clear_tags_over(addr, len(data))

    def store_cap(self, cap: Capability, addr: int, value: Capability) -> None:
        """Write a capability-sized value; granule tag follows the value's tag."""
        if addr % GRANULE:
            raise Misaligned(f"capability store at 0x{addr:x}")
        self._check(cap, addr, GRANULE, "store_cap")
        self._clear_tag(addr)
        self._scatter(
            addr,
            value.address.to_bytes(8, "little") + value.base.to_bytes(8, "little"),
        )
        self._shadow[addr] = value
        if value.tag:
            self._set_tag(addr, value)

    def load_cap(self, cap: Capability, addr: int) -> Capability:
        """Read a capability-sized value.

        The result is tagged only when the granule tag is set and the
        authorizing capability may load capabilities; lacking that
        permission strips the tag instead of faulting.
        """
        if addr % GRANULE:
            raise Misaligned(f"capability load at 0x{addr:x}")
        self._check(cap, addr, GRANULE, "load")
        tagged = addr in self._tags and cap.perms.load_cap
        stored = self._shadow.get(addr)
        if stored is not None:
            return stored if stored.tag == tagged else replace(stored, tag=tagged)
        raw = self._gather(addr, GRANULE)
        w0 = int.from_bytes(raw[0:8], "little")
        w1 = int.from_bytes(raw[8:16], "little")
        return Capability(address=w0, base=w1, top=w1, perms=PERM_NONE, seal=UNSEALED, tag=False)

    # -- revocation support -------------------------------------------------

    def sweep_invalidate(self, ranges: Iterable[tuple[int, int]]) -> int:
        """Clear the tag of every granule whose stored capability points into
        any of the given [lo, hi) ranges; returns the number cleared."""
        merged = _merge_ranges(ranges)
        if not merged:
            return 0
        los = [lo for lo, _ in merged]

        def hits(b: int, t: int) -> bool:
            if t <= b:
                return False
            i = bisect.bisect_right(los, b)
            if i > 0 and merged[i - 1][1] > b:
                return True
            return i < len(merged) and merged[i][0] < t

        candidates: set[int] = set(self._wide)
        for lo, hi in merged:
            for bucket in range(lo >> _BUCKET_SHIFT, ((hi - 1) >> _BUCKET_SHIFT) + 1):
                candidates |= self._buckets.get(bucket, set())
        cleared = 0
        for g in candidates:
            v = self._shadow[g]
            if hits(v.base, v.top):
                self._clear_tag(g)
                cleared += 1
        return cleared

    # -- diagnostics --------------------------------------------------------

    def tagged_granules(self) -> Iterator[int]:
        return iter(sorted(self._tags))

    def dump(self) -> str:
        """Snapshot: one MAP line per span, one line per tagged granule."""
        lines = [f"MAP 0x{b:x} 0x{self._lengths[b]:x}" for b in self._bases]
        for g in sorted(self._tags):
            lines.append(f"0x{g:x} {self._shadow[g].render()}")
        return "\n".join(lines)

    # -- internals ----------------------------------------------------------

    def _gather(self, addr: int, length: int) -> bytearray:
        out = bytearray(length)
        pos = addr
        while pos < addr + length:
            span = self._span_of(pos)
            assert span is not None  # coverage checked by _check
            take = min(addr + length - pos, span + self._lengths[span] - pos)
            off = pos - span
            out[pos - addr : pos - addr + take] = self._buffers[span][off : off + take]
            pos += take
        return out

    def _scatter(self, addr: int, data: bytes) -> None:
        pos = addr
        end = addr + len(data)
        while pos < end:
            span = self._span_of(pos)
            assert span is not None
            take = min(end - pos, span + self._lengths[span] - pos)
            off = pos - span
            self._buffers[span][off : off + take] = data[pos - addr : pos - addr + take]
            pos += take

    def _clear_tags_over(self, addr: int, length: int) -> None:
        first = addr - (addr % GRANULE)
        last = (addr + length - 1) - ((addr + length - 1) % GRANULE)
        if (last - first) // GRANULE + 1 < len(self._tags):
            for g in range(first, last + GRANULE, GRANULE):
                self._clear_tag(g)
        else:
            for g in [g for g in self._tags if first <= g <= last]:
                self._clear_tag(g)

    def _set_tag(self, granule: int, value: Capability) -> None:
        self._tags.add(granule)
        if value.top > value.base and (value.top - 1) >> _BUCKET_SHIFT != value.base >> _BUCKET_SHIFT:
            self._wide.add(granule)
        else:
            self._buckets.setdefault(value.base >> _BUCKET_SHIFT, set()).add(granule)

    def _clear_tag(self, granule: int) -> None:
        if granule not in self._tags:
            return
        self._tags.remove(granule)
        value = self._shadow[granule]
        self._wide.discard(granule)
        bucket = self._buckets.get(value.base >> _BUCKET_SHIFT)
        if bucket is not None:
            bucket.discard(granule)


def _merge_ranges(ranges: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    items = sorted((lo, hi) for lo, hi in ranges if hi > lo)
    merged: list[tuple[int, int]] = []
    for lo, hi in items:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged
