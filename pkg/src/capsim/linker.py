"""Modeled dynamic linker: object registry, handle leaks, GOT resolution.

Each loaded object gets a record materialized in simulated memory so that
its fields occupy real tagged granules.  The record layout is fixed:

    +0x00  capability to the NUL-terminated path string
    +0x10  capability covering the object's whole mapped image
    +0x20  capability to the next record (untagged terminator at the tail)
    +0x30  capability to the previous record
    +0x40  image size, 8-byte little-endian

``dlopen`` returns a capability to the caller's record region; unless
handles are sealed, everything in the registry is reachable from it by
loading capabilities out of those granules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .capability import PERM_RWRW, Capability, Permissions, perms
from .errors import DuplicateObject, ObjectNotFound, UnlinkedSymbol
from .memory import MappedRegion, TaggedMemory

ENTRY_SIZE = 0x50
PATH_OFFSET = 0x00
MAPBASE_OFFSET = 0x10
NEXT_OFFSET = 0x20
PREV_OFFSET = 0x30
MAPSIZE_OFFSET = 0x40

_NULL_CAP = Capability(address=0, base=0, top=0)
_PATH_PERMS = perms("r")


@dataclass(frozen=True)
class LinkerConfig:
    seal_handles: bool = False
    mapbase_perms: Permissions = PERM_RWRW


@dataclass
class ObjEntry:
    """Host-side view of one registered object."""

    path: str
    image: MappedRegion
    mapbase: Capability
    entry_cap: Capability
    exports: dict[str, Capability] = field(default_factory=dict)

    @property
    def mapsize(self) -> int:
        return self.image.length


class Linker:
    """Registry of loaded objects plus per-compartment symbol tables."""

    def __init__(
        self,
        memory: TaggedMemory,
        root: Capability,
        meta_region: MappedRegion,
        paths_region: MappedRegion,
        config: LinkerConfig,
        handle_sealer: Capability,
    ) -> None:
        self.memory = memory
        self.config = config
        self._root = root
        self._meta_cap = root.derive(meta_region.base, meta_region.top, PERM_RWRW)
        self._paths_cap = root.derive(paths_region.base, paths_region.top, PERM_RWRW)
        self._meta_cursor = meta_region.base
        self._paths_cursor = paths_region.base
        # never written to simulated memory; sealing key known only to the linker
        self._handle_sealer = handle_sealer
        self._entries: list[ObjEntry] = []
        self._gots: dict[str, dict[str, Capability]] = {}

    @property
    def entries(self) -> list[ObjEntry]:
        return list(self._entries)

    def register_object(
        self, path: str, image: MappedRegion, exports: dict[str, Capability] | None = None
    ) -> ObjEntry:
        """Append an object to the registry and link it into the record list."""
        if any(e.path == path for e in self._entries):
            raise DuplicateObject(path)
        mapbase = self._root.derive(image.base, image.top, self.config.mapbase_perms)
        path_cap = self._write_path(path)
        base = self._meta_cursor
        self._meta_cursor += ENTRY_SIZE
        entry_cap = self._root.derive(base, base + ENTRY_SIZE, PERM_RWRW)
        mem = self.memory
        mem.store_cap(self._meta_cap, base + PATH_OFFSET, path_cap)
        mem.store_cap(self._meta_cap, base + MAPBASE_OFFSET, mapbase)
        mem.store_cap(self._meta_cap, base + NEXT_OFFSET, _NULL_CAP)
        prev_cap = self._entries[-1].entry_cap if self._entries else _NULL_CAP
        mem.store_cap(self._meta_cap, base + PREV_OFFSET, prev_cap)
        mem.store_data(
            self._meta_cap, base + MAPSIZE_OFFSET, image.length.to_bytes(8, "little")
        )
        if self._entries:
            mem.store_cap(
                self._meta_cap, self._entries[-1].entry_cap.base + NEXT_OFFSET, entry_cap
            )
        entry = ObjEntry(
            path=path, image=image, mapbase=mapbase, entry_cap=entry_cap,
            exports=dict(exports or {}),
        )
        self._entries.append(entry)
        return entry

    def dlopen(self, name: str) -> Capability:
        """Return a capability to the matching object's record.

        With handle sealing on, the returned capability is sealed under the
        linker's private key, so any field load through it faults.
        """
        entry = self._lookup(name)
        handle = entry.entry_cap
        if self.config.seal_handles:
            handle = handle.seal_with(self._handle_sealer)
        return handle

    def obj_next(self, entry_cap: Capability) -> Capability | None:
        """Follow the forward link; None marks the end of the list."""
        link = self.memory.load_cap(entry_cap, entry_cap.base + NEXT_OFFSET)
        return link if link.tag else None

    def read_mapbase(self, entry_cap: Capability) -> Capability:
        return self.memory.load_cap(entry_cap, entry_cap.base + MAPBASE_OFFSET)

    def read_path(self, entry_cap: Capability) -> str:
        path_cap = self.memory.load_cap(entry_cap, entry_cap.base + PATH_OFFSET)
        raw = self.memory.load_data(path_cap, path_cap.base, path_cap.length)
        return raw.split(b"\x00", 1)[0].decode()

    def link_symbol(self, compartment: str, symbol: str, export: Capability) -> None:
        """Resolve one symbol for a compartment; the stored form is a sentry."""
        target = export if export.seal.is_sentry else export.make_sentry()
        self._gots.setdefault(compartment, {})[symbol] = target

    def got_resolve(self, compartment: str, symbol: str) -> Capability:
        """Sentry capability for a symbol the compartment was linked against."""
        got = self._gots.get(compartment, {})
        try:
            return got[symbol]
        except KeyError:
            raise UnlinkedSymbol(f"{symbol!r} not linked for {compartment!r}") from None

    def got_table(self, compartment: str) -> dict[str, Capability]:
        return dict(self._gots.get(compartment, {}))

    # -- internals ----------------------------------------------------------

    def _lookup(self, name: str) -> ObjEntry:
        for entry in self._entries:
            if entry.path == name:
                return entry
        for entry in self._entries:
            basename = entry.path.rsplit("/", 1)[-1]
            if basename.startswith(name):
                return entry
        raise ObjectNotFound(name)

    def _write_path(self, path: str) -> Capability:
        raw = path.encode() + b"\x00"
        length = (len(raw) + 15) & ~15
        base = self._paths_cursor
        self._paths_cursor += length
        self.memory.store_data(self._paths_cap, base, raw)
        return self._root.derive(base, base + length, _PATH_PERMS)
