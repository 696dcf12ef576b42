"""Heap allocator: reuse order, scrubbing, quarantine, arena separation."""

import random
import re

import pytest

from capsim.allocator import SLAB_SIZE, Allocator, AllocatorPolicy
from capsim.capability import perms
from capsim.errors import DoubleFree, ForeignChunk, OutOfMemory
from capsim.memory import GRANULE, TaggedMemory

from conftest import make_root

HEAP_BASE = 0x41400000
HEAP_LEN = 0x200000


def make_allocator(policy=None):
    memory = TaggedMemory()
    root = make_root()
    region = memory.map_region(HEAP_BASE, HEAP_LEN)
    heap_root = root.derive(HEAP_BASE, HEAP_BASE + HEAP_LEN, perms("rwRW"))
    alloc = Allocator(memory, region, heap_root, policy or AllocatorPolicy())
    return memory, root, alloc


def test_alloc_bounds_exactly_cover_request():
    _, _, allocator = make_allocator()
    cap = allocator.arena_for("main").alloc(0x10)
    assert cap.length == 0x10
    assert re.fullmatch(r"0x[0-9a-f]+ \[rwRW,0x[0-9a-f]+-0x[0-9a-f]+\]", cap.render())


def test_alloc_rounds_up_to_granule():
    _, _, allocator = make_allocator()
    assert allocator.arena_for("main").alloc(7).length == GRANULE


def test_free_then_alloc_same_size_reuses_lifo():
    _, _, allocator = make_allocator()
    arena = allocator.arena_for("main")
    first = arena.alloc(0x10)
    arena.free(first)
    hits_at = None
    for i in range(1_000_000):
        again = arena.alloc(0x10)
        if again.base == first.base:
            hits_at = i + 1
            break
        arena.free(again)
    assert hits_at == 1  # most recently freed comes back first


def test_alloc_exhaustion_raises():
    _, _, allocator = make_allocator()
    arena = allocator.arena_for("main")
    with pytest.raises(OutOfMemory):
        for _ in range(HEAP_LEN // 0x20 + 1):
            arena.alloc(0x20)


def test_double_free_detected():
    _, _, allocator = make_allocator()
    arena = allocator.arena_for("main")
    cap = arena.alloc(0x10)
    arena.free(cap)
    with pytest.raises(DoubleFree):
        arena.free(cap)


def test_foreign_chunk_detected():
    _, root, allocator = make_allocator()
    arena = allocator.arena_for("main")
    stranger = root.derive(HEAP_BASE + 0x100000, HEAP_BASE + 0x100010, perms("rwRW"))
    with pytest.raises(ForeignChunk):
        arena.free(stranger)


def test_unscrubbed_free_leaves_capability_residue():
    memory, root, allocator = make_allocator()
    arena = allocator.arena_for("shared")
    chunk = arena.alloc(0x10)
    leak = root.derive(0x41500000, 0x41500010, perms("rwRW"))
    memory.store_cap(chunk, chunk.base, leak)
    arena.free(chunk)
    again = arena.alloc(0x10)
    assert again.base == chunk.base
    assert memory.load_cap(again, again.base).tag


def test_zero_on_free_scrubs_bytes_and_tags():
    memory, root, allocator = make_allocator(AllocatorPolicy(zero_on_free=True))
    arena = allocator.arena_for("shared")
    chunk = arena.alloc(0x10)
    leak = root.derive(0x41500000, 0x41500010, perms("rwRW"))
    memory.store_cap(chunk, chunk.base, leak)
    arena.free(chunk)
    again = arena.alloc(0x10)
    assert again.base == chunk.base
    assert memory.load_data(again, again.base, 0x10) == bytes(0x10)
    assert not memory.load_cap(again, again.base).tag


def test_revocation_untags_saved_pointer_after_epoch():
    policy = AllocatorPolicy(revocation=True, quarantine_epoch_len=4)
    memory, root, allocator = make_allocator(policy)
    arena = allocator.arena_for("shared")
    stash_region = memory.map_region(0x50000000, 0x100)
    stash = root.derive(0x50000000, 0x50000100, perms("rwRW"))
    victim = arena.alloc(0x10)
    memory.store_cap(stash, 0x50000000, victim)
    arena.free(victim)
    assert memory.load_cap(stash, 0x50000000).tag  # still quarantined
    for _ in range(3):
        arena.free(arena.alloc(0x10))
    assert not memory.load_cap(stash, 0x50000000).tag


def test_quarantined_chunks_not_reused_before_sweep():
    policy = AllocatorPolicy(revocation=True, quarantine_epoch_len=100)
    _, _, allocator = make_allocator(policy)
    arena = allocator.arena_for("shared")
    chunk = arena.alloc(0x10)
    arena.free(chunk)
    assert arena.alloc(0x10).base != chunk.base


def test_arena_for_is_stable():
    _, _, allocator = make_allocator()
    assert allocator.arena_for("main") is allocator.arena_for("main")


def test_shared_policy_gives_one_arena():
    _, _, allocator = make_allocator()
    assert allocator.arena_for("main") is allocator.arena_for("attacker")


def test_per_compartment_arenas_are_disjoint():
    policy = AllocatorPolicy(per_compartment_arenas=True)
    _, _, allocator = make_allocator(policy)
    a = allocator.arena_for("main").alloc(0x10)
    b = allocator.arena_for("attacker").alloc(0x10)
    assert a.base // SLAB_SIZE != b.base // SLAB_SIZE


def test_cross_arena_scavenge_finds_nothing():
    policy = AllocatorPolicy(per_compartment_arenas=True)
    memory, root, allocator = make_allocator(policy)
    trusted = allocator.arena_for("main")
    chunk = trusted.alloc(0x10)
    memory.store_cap(chunk, chunk.base, root.derive(0x41500000, 0x41500010, perms("rwRW")))
    trusted.free(chunk)
    attacker = allocator.arena_for("attacker")
    probe = attacker.alloc(0x10)
    assert probe.base != chunk.base
    assert not memory.load_cap(probe, probe.base).tag


def test_trim_recycles_dead_slab_scrubbed():
    memory, root, allocator = make_allocator()
    arena = allocator.arena_for("shared")
    chunk = arena.alloc(0x10)
    memory.store_cap(chunk, chunk.base, root.derive(0x41500000, 0x41500010, perms("rwRW")))
    arena.free(chunk)
    released = arena.trim()
    assert released
    fresh = allocator.arena_for("shared").alloc(0x10)
    assert fresh.base == chunk.base  # recycled most-recently-released slab
    assert memory.load_data(fresh, fresh.base, 0x10) == bytes(0x10)
    assert not memory.load_cap(fresh, fresh.base).tag


def test_trim_pins_slabs_with_live_chunks():
    _, _, allocator = make_allocator()
    arena = allocator.arena_for("shared")
    keep = arena.alloc(0x10)
    arena.free(arena.alloc(0x10))
    assert arena.trim() == []
    assert keep.base in dict(arena.live_ranges())


def test_chunk_states_partition_arena_space():
    """Live, free, and quarantined chunks never overlap."""
    rng = random.Random(5)
    policy = AllocatorPolicy(revocation=True, quarantine_epoch_len=7)
    _, _, allocator = make_allocator(policy)
    arena = allocator.arena_for("shared")
    live = []
    for _ in range(2000):
        if live and rng.random() < 0.45:
            arena.free(live.pop(rng.randrange(len(live))))
        else:
            live.append(arena.alloc(rng.choice([0x10, 0x20, 0x40])))
        ranges = arena.live_ranges() + arena.free_chunks() + [
            (b, b + s) for b, s in arena.quarantined()
        ]
        ranges.sort()
        for (alo, ahi), (blo, bhi) in zip(ranges, ranges[1:]):
            assert ahi <= blo, "chunk ranges overlap"


def test_revocation_soundness_after_sweep():
    """After an epoch sweep no tagged granule points into released chunks."""
    rng = random.Random(11)
    policy = AllocatorPolicy(revocation=True, quarantine_epoch_len=16)
    memory, root, allocator = make_allocator(policy)
    arena = allocator.arena_for("shared")
    memory.map_region(0x50000000, 0x1000)
    stash = root.derive(0x50000000, 0x50001000, perms("rwRW"))
    slot = 0
    for _ in range(200):
        c = arena.alloc(0x10)
        memory.store_cap(stash, 0x50000000 + (slot % 256) * GRANULE, c)
        slot += 1
        arena.free(c)
    arena.flush_quarantine()
    freed = arena.free_chunks()
    for g in memory.tagged_granules():
        v = memory._shadow[g]
        for lo, hi in freed:
            assert not (max(lo, v.base) < min(hi, v.top))
