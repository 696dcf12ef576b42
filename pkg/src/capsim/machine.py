"""Process model: compartments, stacks, platform profiles, mitigations.

A machine composes the tagged memory, the heap allocator, and the linker
into a single-address-space process with one trusted compartment (the
main binary) and one untrusted compartment (a loaded plugin library).
Compartment calls push stack frames whose contents are left in place on
return unless the stack-clearing mitigation is on; without isolated
stacks, every compartment's stack capability spans the whole shared stack
region, previous frames included.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, fields, replace
from typing import Callable

from .allocator import Allocator, AllocatorPolicy, Arena
from .capability import PERM_ALL, PERM_RWRW, Capability, Permissions, perms
from .errors import ConfigInvalid, NotInvocable
from .linker import Linker, LinkerConfig
from .memory import GRANULE, MappedRegion, TaggedMemory
from .scenario import SCENARIOS, ScenarioSpec

FRAME_SIZE = 0x200
ARG_SPILL_OFFSET = 0x00
LOCAL_SPILL_OFFSET = 0x80

OTYPE_SPACE_TOP = 0x8000
SECRET_SEALER_OTYPE = 0x2000
LINKER_SEALER_OTYPE = 0x4000

HEAP_WINDOW = 0x200000  # span of the over-wide heap capability a buggy library leaks

TRUSTED = "trusted"
UNTRUSTED = "untrusted"

MAIN = "main"
MALICIOUS = "malicious"

PLUGIN_ENTRY_SYMBOL = "plugin_entry"


@dataclass(frozen=True)
class MitigationSet:
    """Independent hardening toggles; any combination is valid."""

    c18n: bool = False
    seal_dlopen_handles: bool = False
    zero_on_free: bool = False
    per_compartment_arenas: bool = False
    revocation: bool = False
    clear_stack_on_return: bool = False
    seal_secrets: bool = False

    @classmethod
    def toggle_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_names(cls, names) -> "MitigationSet":
        valid = set(cls.toggle_names())
        enabled = {}
        for name in names:
            if name not in valid:
                raise ConfigInvalid(
                    f"unknown mitigation {name!r}; valid: {', '.join(sorted(valid))}"
                )
            enabled[name] = True
        return cls(**enabled)

    def merged_with(self, other: "MitigationSet") -> "MitigationSet":
        return MitigationSet(
            **{
                f.name: getattr(self, f.name) or getattr(other, f.name)
                for f in fields(self)
            }
        )

    def enabled_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self) if getattr(self, f.name))


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    defaults: MitigationSet
    exec_caps_sealed: bool
    mapbase_perms: Permissions


PROFILES = {
    "morello-linux": PlatformProfile(
        name="morello-linux",
        defaults=MitigationSet(),
        exec_caps_sealed=False,
        mapbase_perms=perms("rxRE"),
    ),
    "cheribsd": PlatformProfile(
        name="cheribsd",
        defaults=MitigationSet(revocation=True),
        exec_caps_sealed=True,
        mapbase_perms=perms("rwRW"),
    ),
}


@dataclass
class Compartment:
    id: str
    trust: str
    code_cap: Capability
    code_region: MappedRegion
    stack_cap: Capability
    stack_region: MappedRegion
    arena: Arena
    args: list[Capability]


@dataclass
class Frame:
    compartment: str
    sp: int
    top: int


# Zone table: (anchor, size ceiling including jitter head-room).  Anchors are
# spaced so a page-granular jitter of up to 0x3f pages can never collide.
_JITTER_PAGES = 0x40


class _Layout:
    def __init__(self, rng: random.Random) -> None:
        self._rng = rng

    def place(self, anchor: int) -> int:
        return anchor + self._rng.randrange(_JITTER_PAGES) * 0x1000


class Machine:
    """One simulated process; exclusively owned, never shared."""

    def __init__(
        self,
        profile: PlatformProfile,
        mitigations: MitigationSet,
        scenario: ScenarioSpec,
        seed: int = 0,
    ) -> None:
        self.profile = profile
        self.mitigations = mitigations
        self.scenario = scenario
        self.seed = seed
        self.memory = TaggedMemory()
        self.root = Capability(address=0, base=0, top=1 << 64, perms=PERM_ALL, tag=True)
        self.compartments: dict[str, Compartment] = {}
        self.frames: list[Frame] = []
        self._sp: dict[int, int] = {}  # stack region base -> cursor
        self._trusted_buffers: list[Capability] = []
        self.sealer: Capability | None = None
        self.sealed_priv: Capability | None = None
        self.flag_addr: int | None = None
        self.pem_addr: int | None = None
        self.heap_window: tuple[int, int] | None = None
        self._build(random.Random(seed))

    # -- construction -------------------------------------------------------

    def _build(self, rng: random.Random) -> None:
        lay = _Layout(rng)
        mem = self.memory
        scen = self.scenario.name

        main_img = mem.map_region(lay.place(0x00200000), 0x32000)
        libc_img = mem.map_region(lay.place(0x40130000), 0x60700)
        meta = mem.map_region(lay.place(0x40400000), 0x1000)
        paths = mem.map_region(lay.place(0x40500000), 0x1000)
        libssl_img = mem.map_region(lay.place(0x40a00000), 0x52000)
        libthr_img = mem.map_region(lay.place(0x41032000), 0xc000)
        heap_len = 0x800000 if scen == "flag" else HEAP_WINDOW
        heap = mem.map_region(lay.place(0x41400000), heap_len)
        if self.mitigations.c18n:
            main_stack = mem.map_region(lay.place(0x43000000), 0x20000)
            mal_stack = mem.map_region(lay.place(0x43400000), 0x20000)
        else:
            main_stack = mal_stack = mem.map_region(lay.place(0x43000000), 0x20000)
        plugin_img = mem.map_region(lay.place(0xFFFFF7DD0000), 0x31000)
        priv = mem.map_region(lay.place(0xFFFFF7EFC000), 0x1000)

        self.heap_region = heap
        self.priv_region = priv
        self.main_image = main_img
        self.plugin_image = plugin_img
        self.main_data_base = main_img.base + 0x20000

        policy = AllocatorPolicy(
            zero_on_free=self.mitigations.zero_on_free,
            per_compartment_arenas=self.mitigations.per_compartment_arenas,
            revocation=self.mitigations.revocation,
        )
        heap_root = self.root.derive(heap.base, heap.top, PERM_RWRW)
        self.allocator = Allocator(mem, heap, heap_root, policy)

        linker_sealer = self.root.derive(
            LINKER_SEALER_OTYPE, LINKER_SEALER_OTYPE + GRANULE, perms("su")
        )
        self.linker = Linker(
            mem,
            self.root,
            meta,
            paths,
            LinkerConfig(
                seal_handles=self.mitigations.seal_dlopen_handles,
                mapbase_perms=self.profile.mapbase_perms,
            ),
            handle_sealer=linker_sealer,
        )

        libc_exports = {
            name: self.root.derive(libc_img.base, libc_img.top, perms("rxR")).set_address(
                libc_img.base + off
            )
            for name, off in (
                ("dlopen", 0x22D60),
                ("malloc", 0x15B40),
                ("free", 0x15D20),
                ("printf", 0x09A10),
            )
        }
        self.linker.register_object("/lib/libc.so.7", libc_img, libc_exports)
        self.linker.register_object("/usr/lib/libssl.so.30", libssl_img)
        self.linker.register_object("/lib/libthr.so.3", libthr_img)
        self.linker.register_object("/usr/bin/app", main_img)
        plugin_entry = self.root.derive(
            plugin_img.base, plugin_img.top, perms("rxR")
        ).set_address(plugin_img.base + 0x08A4)
        self.linker.register_object(
            "/usr/lib/libplugin.so", plugin_img, {PLUGIN_ENTRY_SYMBOL: plugin_entry}
        )

        self.compartments[MAIN] = self._make_compartment(
            MAIN, TRUSTED, main_img, main_stack
        )
        self.compartments[MALICIOUS] = self._make_compartment(
            MALICIOUS, UNTRUSTED, plugin_img, mal_stack
        )
        for symbol in ("dlopen", "malloc", "free", "printf"):
            self.linker.link_symbol(MALICIOUS, symbol, libc_exports[symbol])
            self.linker.link_symbol(MAIN, symbol, libc_exports[symbol])
        self.linker.link_symbol(MAIN, PLUGIN_ENTRY_SYMBOL, plugin_entry)

        self._plant_scenario()

    def _make_compartment(
        self, cid: str, trust: str, image: MappedRegion, stack: MappedRegion
    ) -> Compartment:
        exec_perms = perms("rxRE") if self.profile.name == "morello-linux" else perms("rxR")
        code = self.root.derive(image.base, image.top, exec_perms)
        if self.profile.exec_caps_sealed:
            code = code.make_sentry()
        stack_cap = self.root.derive(stack.base, stack.top, PERM_RWRW).set_address(
            stack.top - GRANULE
        )
        self._sp.setdefault(stack.base, stack.top)
        return Compartment(
            id=cid,
            trust=trust,
            code_cap=code,
            code_region=image,
            stack_cap=stack_cap,
            stack_region=stack,
            arena=self.allocator.arena_for(cid),
            args=[],
        )

    def _plant_scenario(self) -> None:
        scen = self.scenario
        mem = self.memory
        main = self.compartments[MAIN]

        libc = self.linker.entries[0]
        residue = [
            # mapping of libc left over from a prior trusted call
            self.root.derive(libc.image.base, libc.image.top, self.profile.mapbase_perms),
            self._maybe_sentry(
                self.root.derive(libc.image.base, libc.image.top, perms("rxR")).set_address(
                    libc.image.base + 0x22D61
                )
            ),
            # pointer into the main binary's writable data
            self.root.derive(self.main_data_base, self.main_data_base + 0x100, PERM_RWRW),
        ]

        if scen.name == "flag":
            self.flag_addr = self.main_data_base + 0x40
            mem.store_data(
                self.root, self.flag_addr, scen.flag_value.to_bytes(8, "little")
            )
            self._run_frame(main, [], self._residue_writer(main, residue), housekeep=False)
            # a trusted allocation that stored a pointer to the flag and was
            # freed without scrubbing
            arena = self.allocator.arena_for(MAIN)
            chunk = arena.alloc(0x10)
            leak = self.root.derive(self.flag_addr, self.flag_addr + GRANULE, PERM_RWRW)
            mem.store_cap(chunk, chunk.base, leak)
            arena.free(chunk)

        elif scen.name == "privdata":
            mem.store_data(self.root, self.priv_region.base, scen.secret)
            priv_cap = self.root.derive(
                self.priv_region.base, self.priv_region.base + 0x60, PERM_RWRW
            )
            self.sealer = self.root.derive(0, OTYPE_SPACE_TOP, perms("Gsu"))
            self.sealed_priv = priv_cap.seal_with(self.sealer)
            self.compartments[MALICIOUS].args = [self.sealed_priv]
            self._run_frame(main, [], self._residue_writer(main, residue), housekeep=False)
            if not self.mitigations.seal_secrets:
                self.trusted_use_sealer(housekeep=False)

        elif scen.name == "ssl_poc":
            arena = self.allocator.arena_for(MAIN)
            pem_raw = scen.pem.encode() + b"\x00"
            chunk = arena.alloc(0x400)
            mem.store_data(chunk, chunk.base, pem_raw)
            self._trusted_buffers.append(chunk)
            self.pem_addr = chunk.base
            secret_sealer = self.root.derive(
                SECRET_SEALER_OTYPE, SECRET_SEALER_OTYPE + GRANULE, perms("su")
            )
            rsa_cap = chunk
            wide = self.root.derive(
                self.heap_region.base, self.heap_region.base + HEAP_WINDOW, PERM_RWRW
            )
            self.heap_window = (wide.base, wide.top)
            if self.mitigations.seal_secrets:
                rsa_cap = rsa_cap.seal_with(secret_sealer)
                wide = wide.seal_with(secret_sealer)
            mem.store_cap(self.root, self.main_data_base + 0x20, rsa_cap)
            libthr = next(e for e in self.linker.entries if "libthr" in e.path)
            mem.store_cap(self.root, libthr.image.base + 0x8000, wide)
            self._run_frame(main, [], self._residue_writer(main, residue), housekeep=False)

    def _maybe_sentry(self, cap: Capability) -> Capability:
        return cap.make_sentry() if self.profile.exec_caps_sealed else cap

    def _residue_writer(self, comp: Compartment, caps: list[Capability]) -> Callable:
        def body(frame: Frame) -> None:
            for i, cap in enumerate(caps):
                self.memory.store_cap(
                    comp.stack_cap, frame.sp + LOCAL_SPILL_OFFSET + i * GRANULE, cap
                )

        return body

    # -- compartment calls ----------------------------------------------------

    def call_compartment(
        self,
        caller: str,
        target: Capability,
        args: list[Capability] | None = None,
        body: Callable | None = None,
    ):
        """Invoke a compartment entry point through a capability.

        The target must be a sentry or a tagged executable capability whose
        address lies in some compartment's code image.
        """
        del caller  # the model does not restrict who may invoke a held entry
        if not target.tag:
            raise NotInvocable("untagged call target")
        if target.seal.is_sealed:
            raise NotInvocable("key-sealed capabilities cannot be invoked")
        if not target.seal.is_sentry and not (
            target.seal.is_unsealed and target.perms.execute
        ):
            raise NotInvocable("call target is not a sentry or executable capability")
        callee = next(
            (
                c
                for c in self.compartments.values()
                if c.code_region.base <= target.address < c.code_region.top
            ),
            None,
        )
        if callee is None:
            raise NotInvocable("call target is outside every compartment's code")
        return self._run_frame(callee, list(args or []), body, housekeep=True)

    def run_as(self, compartment: str, body: Callable, args: list[Capability] | None = None):
        """Push a frame for the compartment and run host-level code in it."""
        comp = self.compartments[compartment]
        return self._run_frame(comp, list(args or []), body, housekeep=True)

    def _run_frame(
        self,
        comp: Compartment,
        args: list[Capability],
        body: Callable | None,
        housekeep: bool,
    ):
        region = comp.stack_region
        sp = self._sp[region.base]
        new_sp = sp - FRAME_SIZE
        if new_sp < region.base:
            raise ConfigInvalid("stack exhausted")
        frame = Frame(comp.id, new_sp, sp)
        for i, arg in enumerate(args):
            self.memory.store_cap(
                comp.stack_cap, new_sp + ARG_SPILL_OFFSET + i * GRANULE, arg
            )
        self._sp[region.base] = new_sp
        self.frames.append(frame)
        try:
            return body(frame) if body is not None else None
        finally:
            self.frames.pop()
            self._sp[region.base] = sp
            if self.mitigations.clear_stack_on_return:
                self.memory.store_data(comp.stack_cap, new_sp, bytes(FRAME_SIZE))
            if housekeep:
                self.allocator.housekeep(comp.id)

    # -- scenario hooks -------------------------------------------------------

    def trusted_use_sealer(self, housekeep: bool = True) -> None:
        """A trusted helper uses the sealing key in a call and returns,
        leaving the key in its stack frame unless stacks are cleared."""
        if self.sealer is None:
            raise ConfigInvalid("scenario has no sealing key")
        main = self.compartments[MAIN]

        def body(frame: Frame) -> None:
            self.memory.store_cap(
                main.stack_cap, frame.sp + LOCAL_SPILL_OFFSET + 0x40, self.sealer
            )

        self._run_frame(main, [], body, housekeep=housekeep)

    def heap_store_trusted_phase(self) -> None:
        """Trusted activity between attack phases: allocate a fresh buffer
        and write secret-bearing data into it."""

        def body(frame: Frame) -> None:
            arena = self.allocator.arena_for(MAIN)
            buf = arena.alloc(0x10000)
            payload = self.scenario.flag_value.to_bytes(8, "little") + b"session-key"
            self.memory.store_data(buf, buf.base, payload)
            self._trusted_buffers.append(buf)

        self._run_frame(self.compartments[MAIN], [], body, housekeep=True)

    def dlopen(self, compartment: str, name: str) -> Capability:
        """dlopen as called by a compartment; requires the symbol be linked."""
        self.linker.got_resolve(compartment, "dlopen")
        return self.linker.dlopen(name)

    # -- outcome support --------------------------------------------------------

    def attacker_baseline(self, compartment: str) -> list[tuple[int, int]]:
        """Ranges the untrusted compartment legitimately holds before attacking:
        its stack region, its code image, and any unsealed argument ranges."""
        comp = self.compartments[compartment]
        ranges = [
            (comp.stack_region.base, comp.stack_region.top),
            (comp.code_region.base, comp.code_region.top),
        ]
        for arg in comp.args:
            if arg.tag and arg.seal.is_unsealed:
                ranges.append((arg.base, arg.top))
        return ranges

    def initial_roots(self, compartment: str) -> list[Capability]:
        comp = self.compartments[compartment]
        roots = [comp.stack_cap, comp.code_cap]
        roots.extend(self.linker.got_table(compartment).values())
        roots.extend(comp.args)
        return roots


def build_machine(
    profile: str,
    overrides: MitigationSet | None = None,
    scenario: ScenarioSpec | str = "flag",
    seed: int = 0,
) -> Machine:
    """Construct a machine for one profile/mitigation/scenario cell."""
    try:
        prof = PROFILES[profile]
    except KeyError:
        raise ConfigInvalid(
            f"unknown profile {profile!r}; valid: {', '.join(sorted(PROFILES))}"
        ) from None
    if isinstance(scenario, str):
        try:
            scenario = SCENARIOS[scenario]
        except KeyError:
            raise ConfigInvalid(
                f"unknown scenario {scenario!r}; valid: {', '.join(sorted(SCENARIOS))}"
            ) from None
    mitigations = prof.defaults.merged_with(overrides or MitigationSet())
    return Machine(prof, mitigations, scenario, seed=seed)
