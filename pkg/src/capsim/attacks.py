"""Compartment-escape attacks as deterministic procedures over the machine.

Each attack runs inside the untrusted compartment's frame, drives only
capabilities that compartment can name, and returns a structured outcome.
Failure is an outcome, never an exception.
"""

from __future__ import annotations

from dataclasses import dataclass

from .capability import Capability, perms
from .errors import OutOfMemory, SealedCapability
from .machine import MAIN, MALICIOUS, Machine
from .memory import GRANULE
from .scanner import RegionSet, find_caps_with_perms, scan_recursive, search_bytes
from .scenario import ScenarioOutcome

SCAVENGE_MAX_ITERATIONS = 1_000_000
# revisits tolerated before concluding the heap is churning; must exceed the
# revocation quarantine depth so a draining free list still gets explored
SCAVENGE_STALE_LIMIT = 8192
STORE_SAVED_COUNT = 220000
KEY_NEEDLE = b"BEGIN RSA PRIVATE KEY"
KEY_MIN_STRING_LEN = 100

BLOCKED_C18N = "c18n"
BLOCKED_SEALED_HANDLE = "sealed_handle"
BLOCKED_ZERO_ON_FREE = "zero_on_free"
BLOCKED_ARENAS = "arenas"
BLOCKED_REVOCATION = "revocation"
BLOCKED_CLEAR_STACK = "clear_stack_on_return"
BLOCKED_SEAL_SECRETS = "seal_secrets"

# Which attack runs against which planted scenario, and the grid the
# matrix report covers by default.
ATTACK_SCENARIOS = {
    "stack_walk": "privdata",
    "dlopen_infoleak": "flag",
    "heap_scavenge": "flag",
    "heap_store": "flag",
    "ssl_poc": "ssl_poc",
}
CORE_ATTACKS = ("stack_walk", "dlopen_infoleak", "heap_scavenge", "heap_store")


@dataclass
class AttackContext:
    machine: Machine
    attacker: str = MALICIOUS


def _outside_entries(machine: Machine, regions: RegionSet, attacker: str) -> list[Capability]:
    """Closure entries that grant access beyond what the attacker held.

    Sealed and sentry entries cannot be dereferenced, so they do not count
    as an escape even when their ranges lie outside the compartment.
    """
    baseline = machine.attacker_baseline(attacker)
    outside = []
    for entry in regions:
        cap = entry.cap
        if not cap.tag or not cap.seal.is_unsealed:
            continue
        if any(lo <= cap.base and cap.top <= hi for lo, hi in baseline):
            continue
        outside.append(cap)
    return outside


def _read_via_closure(
    machine: Machine, regions: RegionSet, addr: int | None, width: int
) -> tuple[bytes, Capability] | None:
    if addr is None:
        return None
    for entry in regions:
        cap = entry.cap
        if (
            cap.tag
            and cap.seal.is_unsealed
            and cap.perms.load
            and cap.contains(addr, width)
        ):
            return machine.memory.load_data(cap, addr, width), cap
    return None


def _finish(
    machine: Machine,
    attack: str,
    regions: RegionSet | None,
    evidence: list[str],
    secret: bytes | None,
    blocked_candidates: list[str],
    extra_outside: int = 0,
) -> ScenarioOutcome:
    outside = (
        _outside_entries(machine, regions, MALICIOUS) if regions is not None else []
    )
    count = len(outside) + extra_outside
    escaped = count > 0 or secret is not None
    if any(c.perms.execute for c in outside):
        evidence.append("unsealed executable capability obtained")
    blocked = None
    if not escaped:
        active = [
            name
            for name in blocked_candidates
            if getattr(machine.mitigations, _TOGGLE_FOR_LABEL[name])
        ]
        blocked = active[0] if active else None
    return ScenarioOutcome(
        attack=attack,
        escaped=escaped,
        secret_recovered=secret,
        caps_outside_compartment=count,
        evidence=evidence,
        blocked_by=blocked,
    )


_TOGGLE_FOR_LABEL = {
    BLOCKED_C18N: "c18n",
    BLOCKED_SEALED_HANDLE: "seal_dlopen_handles",
    BLOCKED_ZERO_ON_FREE: "zero_on_free",
    BLOCKED_ARENAS: "per_compartment_arenas",
    BLOCKED_REVOCATION: "revocation",
    BLOCKED_CLEAR_STACK: "clear_stack_on_return",
    BLOCKED_SEAL_SECRETS: "seal_secrets",
}


def attack_stack_walk(ctx: AttackContext) -> ScenarioOutcome:
    """Scan the attacker's own stack capability for residue of earlier frames."""
    m = ctx.machine
    attacker = m.compartments[ctx.attacker]

    def body(frame):
        evidence = ["starting recursive scan on stack", "Found:"]
        regions, _stats = scan_recursive(attacker.stack_cap, m.memory)
        evidence.extend(f"  {e.cap.render()}" for e in regions)
        secret = None
        sealers = find_caps_with_perms(regions, perms("su"), m.memory)
        if sealers and m.sealed_priv is not None:
            key = sealers[0]
            evidence.append(
                f"found sealer: {key.address:016x} {1 if key.tag else 0} "
                f"[{key.base:016x}:{key.top:016x}) {key.perms.long_string()}"
            )
            unsealed = m.sealed_priv.unseal_with(key)
            evidence.append(f"sealed: {m.sealed_priv.render()}")
            evidence.append(f"unsealed: {unsealed.render()}")
            secret = m.memory.load_data(unsealed, unsealed.base, len(m.scenario.secret))
            evidence.append(f"secret: {secret.hex()}")
        if secret is None:
            flag_read = _read_via_closure(m, regions, m.flag_addr, 8)
            if flag_read is not None:
                secret, via = flag_read
                evidence.append(
                    f"read flag {int.from_bytes(secret, 'little'):#x} via {via.render()}"
                )
        return _finish(
            m,
            "stack_walk",
            regions,
            evidence,
            secret,
            [BLOCKED_C18N, BLOCKED_CLEAR_STACK, BLOCKED_SEAL_SECRETS],
        )

    return m.run_as(ctx.attacker, body, args=attacker.args)


def attack_dlopen_infoleak(ctx: AttackContext) -> ScenarioOutcome:
    """Harvest every loaded object's image capability from the dlopen handle."""
    m = ctx.machine

    def body(frame):
        handle = m.dlopen(ctx.attacker, "libc")
        evidence = [f"handle: {handle.render()}"]
        total = RegionSet()
        try:
            entry_cap = handle
            while entry_cap is not None:
                path = m.linker.read_path(entry_cap)
                mapbase = m.linker.read_mapbase(entry_cap)
                evidence.append(f"path: {path}")
                evidence.append(f"mapbase: {mapbase.render()}")
                total.insert(entry_cap)
                if mapbase.tag and mapbase.perms.load:
                    regions, _stats = scan_recursive(mapbase, m.memory)
                    evidence.append("Found:")
                    evidence.extend(
                        f"  {i}: {e.cap.render()}" for i, e in enumerate(regions)
                    )
                    for e in regions:
                        total.insert(e.cap)
                entry_cap = m.linker.obj_next(entry_cap)
        except SealedCapability:
            evidence.append("field load faulted: handle is sealed")
            return _finish(
                m, "dlopen_infoleak", None, evidence, None, [BLOCKED_SEALED_HANDLE]
            )
        secret = None
        flag_read = _read_via_closure(m, total, m.flag_addr, 8)
        if flag_read is not None:
            secret, via = flag_read
            evidence.append(
                f"read flag {int.from_bytes(secret, 'little'):#x} via {via.render()}"
            )
        return _finish(
            m, "dlopen_infoleak", total, evidence, secret, [BLOCKED_SEALED_HANDLE]
        )

    return m.run_as(ctx.attacker, body)


def attack_heap_scavenge(ctx: AttackContext) -> ScenarioOutcome:
    """Reallocate freed heap chunks looking for capabilities left behind."""
    m = ctx.machine

    def body(frame):
        arena = m.allocator.arena_for(ctx.attacker)
        evidence = []
        found: Capability | None = None
        seen: set[int] = set()
        stale = 0
        iterations = 0
        for _ in range(SCAVENGE_MAX_ITERATIONS):
            iterations += 1
            try:
                chunk = arena.alloc(0x10)
            except OutOfMemory:
                evidence.append("allocator exhausted")
                break
            if chunk.base in seen:
                stale += 1
                if stale > SCAVENGE_STALE_LIMIT:
                    # only previously inspected chunks are coming back and the
                    # attacker is the sole heap user, so nothing new can appear
                    arena.free(chunk)
                    evidence.append("allocator recycling inspected chunks; giving up")
                    break
            else:
                seen.add(chunk.base)
                stale = 0
            candidate = m.memory.load_cap(chunk, chunk.base)
            if candidate.tag and candidate.perms.load:
                found = candidate
                evidence.append(f"found capability after {iterations} allocations")
                evidence.append(f"  in chunk {chunk.render()}")
                evidence.append(f"  {candidate.render()}")
                break
            arena.free(chunk)
        if found is None:
            evidence.append(f"no capabilities scavenged in {iterations} allocations")
            return _finish(
                m,
                "heap_scavenge",
                None,
                evidence,
                None,
                [BLOCKED_ZERO_ON_FREE, BLOCKED_ARENAS],
            )
        regions, _stats = scan_recursive(found, m.memory)
        evidence.append("Found:")
        evidence.extend(f"  {e.cap.render()}" for e in regions)
        secret = None
        flag_read = _read_via_closure(m, regions, m.flag_addr, 8)
        if flag_read is not None:
            secret, via = flag_read
            evidence.append(
                f"read flag {int.from_bytes(secret, 'little'):#x} via {via.render()}"
            )
        if found.perms.store:
            m.memory.store_data(found, found.address, b"\x41")
            evidence.append(f"wrote 0x41 via {found.render()}")
        return _finish(
            m,
            "heap_scavenge",
            regions,
            evidence,
            secret,
            [BLOCKED_ZERO_ON_FREE, BLOCKED_ARENAS],
        )

    return m.run_as(ctx.attacker, body)


def attack_heap_store(ctx: AttackContext, trusted_phase: bool = True) -> ScenarioOutcome:
    """Retain capabilities to freed chunks and read them after reuse."""
    m = ctx.machine
    arena = m.allocator.arena_for(ctx.attacker)
    state: dict = {}

    def phase_save(frame):
        saved = arena.alloc(STORE_SAVED_COUNT * GRANULE)
        state["saved"] = saved
        for i in range(STORE_SAVED_COUNT):
            chunk = arena.alloc(0x10)
            m.memory.store_cap(saved, saved.base + i * GRANULE, chunk)
            arena.free(chunk)

    m.run_as(ctx.attacker, phase_save)
    if trusted_phase:
        m.heap_store_trusted_phase()

    def phase_check(frame):
        saved = state["saved"]
        tagged = untagged = 0
        hit: tuple[Capability, bytes] | None = None
        for i in range(STORE_SAVED_COUNT):
            cap = m.memory.load_cap(saved, saved.base + i * GRANULE)
            if not cap.tag:
                untagged += 1
                continue
            tagged += 1
            data = m.memory.load_data(cap, cap.base, 0x10)
            if any(data):
                hit = (cap, data)
                break
        evidence = [
            f"saved {STORE_SAVED_COUNT} capabilities to freed chunks",
            f"tagged at recheck: {tagged}, untagged: {untagged}",
        ]
        if hit is None:
            if untagged:
                evidence.append("retained capabilities were invalidated")
            return _finish(
                m, "heap_store", None, evidence, None, [BLOCKED_REVOCATION]
            )
        cap, data = hit
        evidence.append(f"live data through retained {cap.render()}")
        evidence.append(f"read back: {data.hex()}")
        return _finish(
            m, "heap_store", None, evidence, data, [BLOCKED_REVOCATION], extra_outside=1
        )

    return m.run_as(ctx.attacker, phase_check)


def run_ssl_poc(ctx: AttackContext) -> ScenarioOutcome:
    """dlopen infoleak followed by a byte search for the planted private key."""
    m = ctx.machine

    def body(frame):
        handle = m.dlopen(ctx.attacker, "libc")
        evidence = [f"handle: {handle.render()}"]
        total = RegionSet()
        try:
            entry_cap = handle
            while entry_cap is not None:
                path = m.linker.read_path(entry_cap)
                mapbase = m.linker.read_mapbase(entry_cap)
                evidence.append(f"path: {path}")
                total.insert(entry_cap)
                if mapbase.tag and mapbase.perms.load:
                    regions, _stats = scan_recursive(mapbase, m.memory)
                    evidence.append("Found:")
                    evidence.extend(
                        f"  {i}: {e.cap.render()}" for i, e in enumerate(regions)
                    )
                    for e in regions:
                        total.insert(e.cap)
                entry_cap = m.linker.obj_next(entry_cap)
        except SealedCapability:
            evidence.append("field load faulted: handle is sealed")
            return _finish(m, "ssl_poc", None, evidence, None, [BLOCKED_SEALED_HANDLE])
        evidence.append("testing strings...")
        secret = None
        for cap, addr in search_bytes(total, KEY_NEEDLE, m.memory):
            text = _c_string_at(m, cap, addr)
            if len(text) < KEY_MIN_STRING_LEN:
                continue
            secret = _enclosing_c_string(m, cap, addr)
            evidence.append(f"0x{addr:x} {cap.render()}:")
            evidence.append(secret.split(b"\n", 1)[0].decode(errors="replace"))
            break
        blocked = [BLOCKED_SEAL_SECRETS] if secret is None else []
        outcome = _finish(m, "ssl_poc", total, evidence, secret, blocked)
        if secret is None and outcome.escaped and m.mitigations.seal_secrets:
            # compartment boundary still broke, but the key stayed sealed
            outcome.blocked_by = BLOCKED_SEAL_SECRETS
        return outcome

    return m.run_as(ctx.attacker, body)


def _c_string_at(m: Machine, cap: Capability, addr: int) -> bytes:
    """Bytes from addr up to a NUL, clipped to the capability's bounds."""
    ranges = m.memory.mapped_ranges(addr, cap.top)
    if not ranges or ranges[0][0] != addr:
        return b""
    data = m.memory.load_data(cap, addr, ranges[0][1] - addr)
    return data.split(b"\x00", 1)[0]


def _enclosing_c_string(m: Machine, cap: Capability, addr: int) -> bytes:
    """The full NUL-delimited string containing addr, within bounds."""
    for lo, hi in m.memory.mapped_ranges(cap.base, cap.top):
        if lo <= addr < hi:
            data = m.memory.load_data(cap, lo, hi - lo)
            off = addr - lo
            start = data.rfind(b"\x00", 0, off) + 1
            end = data.find(b"\x00", off)
            return data[start : end if end != -1 else len(data)]
    return b""


ATTACK_FUNCTIONS = {
    "stack_walk": attack_stack_walk,
    "dlopen_infoleak": attack_dlopen_infoleak,
    "heap_scavenge": attack_heap_scavenge,
    "heap_store": attack_heap_store,
    "ssl_poc": run_ssl_poc,
}


def run_attack(name: str, machine: Machine) -> ScenarioOutcome:
    return ATTACK_FUNCTIONS[name](AttackContext(machine))
