"""Tagged memory: mapping, mediated access, tag conservation, revocation sweeps."""

import random

import pytest

from capsim.capability import Capability, SealState, perms
from capsim.errors import (
    InvalidCapability,
    Misaligned,
    OutOfBounds,
    OverlappingMapping,
    PermissionDenied,
    SealedCapability,
    Unmapped,
)
from capsim.memory import GRANULE, TaggedMemory

from conftest import make_root


def rw_cap(root, base, top, p="rwRW"):
    return root.derive(base, top, perms(p))


@pytest.fixture
def mem_with_region(memory, root):
    memory.map_region(0x41400000, 0x200000)
    return memory, rw_cap(root, 0x41400000, 0x41600000)


# -- mapping -------------------------------------------------------------------

def test_map_region_poc_heap_range(memory):
    region = memory.map_region(0x41400000, 0x200000)
    assert (region.base, region.top) == (0x41400000, 0x41600000)


def test_map_region_rejects_overlap(memory):
    memory.map_region(0x1000, 0x10)
    with pytest.raises(OverlappingMapping):
        memory.map_region(0x1000, 0x10)


def test_map_region_rejects_misaligned(memory):
    with pytest.raises(Misaligned):
        memory.map_region(0x1001, 0x10)


# -- data access ---------------------------------------------------------------

def test_load_inside_bounds_returns_bytes(mem_with_region):
    memory, cap = mem_with_region
    memory.store_data(cap, 0x41400000, b"hello")
    assert memory.load_data(cap, 0x41400000, 5) == b"hello"


def test_load_at_exclusive_top_is_out_of_bounds(mem_with_region):
    memory, cap = mem_with_region
    with pytest.raises(OutOfBounds):
        memory.load_data(cap, cap.top, 1)


def test_load_via_sealed_cap_faults(mem_with_region):
    memory, cap = mem_with_region
    key = Capability(address=1, base=0, top=0x8000, perms=perms("su"), tag=True)
    with pytest.raises(SealedCapability):
        memory.load_data(cap.seal_with(key), 0x41400000, 1)


def test_store_via_readonly_cap_denied(mem_with_region, root):
    memory, _ = mem_with_region
    ro = rw_cap(root, 0x41400000, 0x41600000, "rR")
    with pytest.raises(PermissionDenied):
        memory.store_data(ro, 0x41400000, b"x")


def test_load_unmapped_address(memory, root):
    memory.map_region(0x1000, 0x10)
    cap = rw_cap(root, 0x1000, 0x10000)
    with pytest.raises(Unmapped):
        memory.load_data(cap, 0x2000, 1)


def test_untagged_cap_authorizes_nothing(mem_with_region):
    memory, cap = mem_with_region
    with pytest.raises(InvalidCapability):
        memory.load_data(cap.untagged(), 0x41400000, 1)


# -- capability access -----------------------------------------------------------

def test_store_cap_load_cap_round_trip(mem_with_region, root):
    memory, cap = mem_with_region
    value = rw_cap(root, 0x41410000, 0x41410100)
    memory.store_cap(cap, 0x41400000, value)
    assert memory.load_cap(cap, 0x41400000) == value


def test_store_cap_requires_cap_write_permission(mem_with_region, root):
    memory, _ = mem_with_region
    no_w = rw_cap(root, 0x41400000, 0x41600000, "rwR")
    with pytest.raises(PermissionDenied):
        memory.store_cap(no_w, 0x41400000, no_w)


def test_store_cap_of_untagged_value_loads_untagged(mem_with_region):
    memory, cap = mem_with_region
    memory.store_cap(cap, 0x41400000, cap.untagged())
    assert not memory.load_cap(cap, 0x41400000).tag


def test_store_cap_misaligned(mem_with_region):
    memory, cap = mem_with_region
    with pytest.raises(Misaligned):
        memory.store_cap(cap, 0x41400008, cap)


def test_data_overwrite_clears_tag_but_keeps_value_shape(mem_with_region, root):
    memory, cap = mem_with_region
    value = rw_cap(root, 0x41410000, 0x41410100)
    memory.store_cap(cap, 0x41400000, value)
    memory.store_data(cap, 0x41400003, b"\xff")
    loaded = memory.load_cap(cap, 0x41400000)
    assert not loaded.tag


def test_store_spanning_two_granules_clears_both_tags(mem_with_region, root):
    memory, cap = mem_with_region
    value = rw_cap(root, 0x41410000, 0x41410100)
    memory.store_cap(cap, 0x41400000, value)
    memory.store_cap(cap, 0x41400010, value)
    memory.store_data(cap, 0x4140000F, b"\x00\x00")  # one byte each side
    assert not memory.load_cap(cap, 0x41400000).tag
    assert not memory.load_cap(cap, 0x41400010).tag


def test_load_cap_without_cap_read_permission_strips_tag(mem_with_region, root):
    memory, cap = mem_with_region
    value = rw_cap(root, 0x41410000, 0x41410100)
    memory.store_cap(cap, 0x41400000, value)
    data_only = rw_cap(root, 0x41400000, 0x41600000, "rR").derive(
        0x41400000, 0x41600000, perms("r")
    )
    loaded = memory.load_cap(data_only, 0x41400000)
    assert not loaded.tag
    assert (loaded.base, loaded.top) == (value.base, value.top)


def test_load_cap_over_plain_data_is_untagged(mem_with_region):
    memory, cap = mem_with_region
    memory.store_data(cap, 0x41400000, b"just sixteen byt")
    assert not memory.load_cap(cap, 0x41400000).tag


# -- probe -----------------------------------------------------------------------

def test_probe_inside_mapped(mem_with_region):
    memory, _ = mem_with_region
    assert memory.probe(0x41400000)
    assert memory.probe(0x415FFFFF)


def test_probe_unmapped(memory):
    assert not memory.probe(0xDEAD0000)


def test_probe_at_exclusive_end(mem_with_region):
    memory, _ = mem_with_region
    assert not memory.probe(0x41600000)


# -- sweep ------------------------------------------------------------------------

def test_sweep_clears_single_pointing_cap(mem_with_region, root):
    memory, cap = mem_with_region
    value = rw_cap(root, 0x41410000, 0x41410100)
    memory.store_cap(cap, 0x41400000, value)
    assert memory.sweep_invalidate([(0x41410000, 0x41410100)]) == 1
    assert not memory.load_cap(cap, 0x41400000).tag


def test_sweep_over_empty_ranges_is_noop(mem_with_region, root):
    memory, cap = mem_with_region
    value = rw_cap(root, 0x41410000, 0x41410100)
    memory.store_cap(cap, 0x41400000, value)
    assert memory.sweep_invalidate([]) == 0
    assert memory.load_cap(cap, 0x41400000).tag


def test_sweep_spares_caps_pointing_elsewhere(mem_with_region, root):
    memory, cap = mem_with_region
    inside = rw_cap(root, 0x41410000, 0x41410100)
    outside = rw_cap(root, 0x41500000, 0x41500100)
    memory.store_cap(cap, 0x41400000, inside)
    memory.store_cap(cap, 0x41400010, outside)
    assert memory.sweep_invalidate([(0x41410000, 0x41410100)]) == 1
    assert not memory.load_cap(cap, 0x41400000).tag
    assert memory.load_cap(cap, 0x41400010).tag


def test_sweep_invalidates_all_220000_saved_caps(memory, root):
    """Revocation at the scale the heap-store attack saves pointers."""
    count = 220000
    memory.map_region(0x41400000, 0x800000)
    list_cap = rw_cap(root, 0x41400000, 0x41800000)
    chunk_lo = 0x41400000 + count * GRANULE
    for i in range(count):
        target = chunk_lo + (i % 0x10000) * GRANULE
        value = root.derive(target, target + GRANULE, perms("rwRW"))
        memory.store_cap(list_cap, 0x41400000 + i * GRANULE, value)
    cleared = memory.sweep_invalidate([(chunk_lo, chunk_lo + 0x10000 * GRANULE)])
    assert cleared == count
    for i in range(0, count, 997):
        assert not memory.load_cap(list_cap, 0x41400000 + i * GRANULE).tag


# -- properties ---------------------------------------------------------------------

def test_tag_conservation_against_shadow_model():
    """Tags change only via store_cap, store_data, sweep, and mapping."""
    rng = random.Random(2024)
    for _ in range(1000):
        memory = TaggedMemory()
        root = make_root()
        memory.map_region(0x10000, 0x400)
        auth = root.derive(0x10000, 0x10400, perms("rwRW"))
        shadow: dict[int, bool] = {g: False for g in range(0x10000, 0x10400, GRANULE)}
        for _ in range(12):
            op = rng.random()
            g = rng.choice(list(shadow))
            if op < 0.45:
                tagged = rng.random() < 0.7
                value = Capability(
                    address=g, base=g, top=g + GRANULE, perms=perms("rR"), tag=tagged
                )
                memory.store_cap(auth, g, value)
                shadow[g] = tagged
            elif op < 0.8:
                span = rng.randrange(1, 40)
                start = rng.randrange(0x10000, 0x10400 - span)
                memory.store_data(auth, start, bytes(span))
                first = start - (start % GRANULE)
                last = (start + span - 1) - ((start + span - 1) % GRANULE)
                for gg in range(first, last + GRANULE, GRANULE):
                    shadow[gg] = False
            else:
                lo = rng.randrange(0x10000, 0x10400, GRANULE)
                hi = rng.randrange(lo, 0x10400)
                memory.sweep_invalidate([(lo, hi)])
                for gg, tagged in shadow.items():
                    if not tagged:
                        continue
                    v = memory._shadow.get(gg)
                    if v is not None and max(lo, v.base) < min(hi, v.top):
                        shadow[gg] = False
        actual = {g: (g in memory._tags) for g in shadow}
        assert actual == shadow


def test_unforgeability_random_data_never_yields_tag():
    """No byte pattern written as data may read back as a valid capability."""
    rng = random.Random(99)
    memory = TaggedMemory()
    root = make_root()
    memory.map_region(0x20000, 0x200)
    auth = root.derive(0x20000, 0x20200, perms("rwRW"))
    for _ in range(1000):
        g = rng.randrange(0x20000, 0x20200, GRANULE)
        blob = bytes(rng.randrange(256) for _ in range(rng.choice([1, 8, 16, 32])))
        start = min(g + rng.randrange(16), 0x20200 - len(blob))
        memory.store_data(auth, start, blob)
        assert not memory.load_cap(auth, g).tag


# -- snapshot --------------------------------------------------------------------

def test_dump_lists_spans_and_tagged_granules(memory, root):
    memory.map_region(0x1000, 0x20)
    auth = root.derive(0x1000, 0x1020, perms("rwRW"))
    value = root.derive(0x1000, 0x1010, perms("rR"))
    memory.store_cap(auth, 0x1010, value)
    assert memory.dump() == "MAP 0x1000 0x20\n0x1010 0x1000 [rR,0x1000-0x1010]"
