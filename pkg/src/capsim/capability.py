"""Capability value type: bounds, permissions, sealing, and rendering.

A capability is a pure immutable value.  All mutating operations return a
new capability and enforce monotonic attenuation: derived capabilities can
never exceed their parent's bounds or permissions.  The tag is validity
metadata carried out of band; a capability with a clear tag authorizes
nothing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .errors import (
    AlreadySealed,
    BoundsEscalation,
    InvalidCapability,
    MissingSealPermission,
    MissingUnsealPermission,
    NotExecutable,
    NotSealed,
    OtypeMismatch,
    PermissionEscalation,
    SealedCapability,
)

ADDR_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Permissions:
    """Access rights carried by a capability.

    Lowercase letters in the rendered form (r, w, x) grant plain data
    access; uppercase (R, W) grant capability access.  E marks the
    executive bit seen on executable mappings on some platforms.  The
    seal, unseal, and global bits do not appear in the short rendering;
    they show up in the long fixed-width form.
    """

    load: bool = False
    store: bool = False
    execute: bool = False
    load_cap: bool = False
    store_cap: bool = False
    executive: bool = False
    seal: bool = False
    unseal: bool = False
    global_: bool = False

    _SHORT = (
        ("load", "r"),
        ("store", "w"),
        ("execute", "x"),
        ("load_cap", "R"),
        ("store_cap", "W"),
        ("executive", "E"),
    )

    # Fixed 18-slot layout of the long form; unspecified slots are
    # reserved bits this model does not track.
    _LONG_SLOTS = {
        0: ("global_", "G"),
        1: ("executive", "E"),
        10: ("seal", "s"),
        11: ("unseal", "u"),
        13: ("store_cap", "W"),
        14: ("load_cap", "R"),
        15: ("execute", "x"),
        16: ("store", "w"),
        17: ("load", "r"),
    }

    def short_string(self) -> str:
        """Compact permission string, e.g. ``rwRW`` or ``rxRE``."""
        return "".join(ch for field, ch in self._SHORT if getattr(self, field))

    def long_string(self) -> str:
        """Fixed-width 18-slot permission string, e.g. ``G---------su------``."""
        out = []
        for i in range(18):
            slot = self._LONG_SLOTS.get(i)
            if slot is not None and getattr(self, slot[0]):
                out.append(slot[1])
            else:
                out.append("-")
        return "".join(out)

    def is_subset_of(self, other: "Permissions") -> bool:
        return all(
            not getattr(self, f) or getattr(other, f)
            for f in (
                "load",
                "store",
                "execute",
                "load_cap",
                "store_cap",
                "executive",
                "seal",
                "unseal",
                "global_",
            )
        )

    def superset_of(self, other: "Permissions") -> bool:
        return other.is_subset_of(self)


_PERM_LETTERS = {
    "r": "load",
    "w": "store",
    "x": "execute",
    "R": "load_cap",
    "W": "store_cap",
    "E": "executive",
    "s": "seal",
    "u": "unseal",
    "G": "global_",
}


def perms(letters: str) -> Permissions:
    """Build a permission set from its letters, e.g. ``perms("rwRW")``."""
    fields = {}
    for ch in letters:
        try:
            fields[_PERM_LETTERS[ch]] = True
        except KeyError:
            raise ValueError(f"unknown permission letter {ch!r}") from None
    return Permissions(**fields)


PERM_NONE = Permissions()
PERM_RWRW = perms("rwRW")
PERM_ALL = perms("rwxRWEsuG")


class SealKind(enum.Enum):
    UNSEALED = "unsealed"
    SEALED = "sealed"
    SENTRY = "sentry"


@dataclass(frozen=True)
class SealState:
    """Seal marker: unsealed, sealed with an object type, or sentry.

    Sealed and sentry capabilities are immutable and cannot be
    dereferenced; a sentry can still be invoked as a call target.
    """

    kind: SealKind = SealKind.UNSEALED
    otype: int = 0

    @classmethod
    def unsealed(cls) -> "SealState":
        return UNSEALED

    @classmethod
    def sealed(cls, otype: int) -> "SealState":
        return cls(SealKind.SEALED, otype)

    @classmethod
    def sentry(cls) -> "SealState":
        return SENTRY

    @property
    def is_unsealed(self) -> bool:
        return self.kind is SealKind.UNSEALED

    @property
    def is_sealed(self) -> bool:
        return self.kind is SealKind.SEALED

    @property
    def is_sentry(self) -> bool:
        return self.kind is SealKind.SENTRY


UNSEALED = SealState(SealKind.UNSEALED)
SENTRY = SealState(SealKind.SENTRY)


@dataclass(frozen=True)
class Capability:
    """A pointer plus the authority to use it.

    ``address`` is the current pointer value, ``base``/``top`` the
    half-open authorized range.  The offset named by some descriptions is
    not stored: it is always ``address - base``.  An out-of-range address
    is representable on an unsealed capability; only dereferencing it
    faults.
    """

    address: int
    base: int
    top: int
    perms: Permissions = PERM_NONE
    seal: SealState = UNSEALED
    tag: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.base <= self.top <= (1 << 64):
            raise ValueError("capability bounds must satisfy 0 <= base <= top <= 2^64")
        if not 0 <= self.address <= ADDR_MASK:
            raise ValueError("capability address must be a 64-bit value")

    @property
    def offset(self) -> int:
        return self.address - self.base

    @property
    def length(self) -> int:
        return self.top - self.base

    def contains(self, addr: int, width: int = 1) -> bool:
        return self.base <= addr and addr + width <= self.top

    def untagged(self) -> "Capability":
        return replace(self, tag=False)

    def _require_tag(self) -> None:
        if not self.tag:
            raise InvalidCapability(f"untagged capability {self.render()}")

    def _require_unsealed(self) -> None:
        if not self.seal.is_unsealed:
            raise SealedCapability(f"sealed capability {self.render()}")

    def derive(self, new_base: int, new_top: int, new_perms: Permissions) -> "Capability":
        """Derive an attenuated capability; bounds and permissions may only shrink."""
        self._require_tag()
        self._require_unsealed()
        if not (self.base <= new_base <= new_top <= self.top):
            raise BoundsEscalation(
                f"[{new_base:#x}-{new_top:#x}] not within [{self.base:#x}-{self.top:#x}]"
            )
        if not new_perms.is_subset_of(self.perms):
            raise PermissionEscalation(
                f"{new_perms.short_string()!r} exceeds {self.perms.short_string()!r}"
            )
        return Capability(
            address=new_base,
            base=new_base,
            top=new_top,
            perms=new_perms,
            seal=UNSEALED,
            tag=True,
        )

    def set_address(self, addr: int) -> "Capability":
        """Move the pointer; the result may be out of bounds (dereference faults)."""
        self._require_tag()
        self._require_unsealed()
        return replace(self, address=addr & ADDR_MASK)

    def seal_with(self, sealer: "Capability") -> "Capability":
        """Seal under the key's current address as object type."""
        self._require_tag()
        if not self.seal.is_unsealed:
            raise AlreadySealed(f"cannot re-seal {self.render()}")
        sealer._require_tag()
        if not sealer.perms.seal:
            raise MissingSealPermission("key lacks seal permission")
        if not (sealer.base <= sealer.address < sealer.top):
            raise OtypeMismatch("key address outside its object-type range")
        return replace(self, seal=SealState.sealed(sealer.address))

    def unseal_with(self, key: "Capability") -> "Capability":
        """Unseal with the matching key; all other fields are preserved."""
        if self.seal.is_unsealed or self.seal.is_sentry:
            raise NotSealed(f"{self.render()} is not key-sealed")
        key._require_tag()
        if not key.perms.unseal:
            raise MissingUnsealPermission("key lacks unseal permission")
        if key.address != self.seal.otype or not (key.base <= key.address < key.top):
            raise OtypeMismatch(
                f"key address {key.address:#x} does not match otype {self.seal.otype:#x}"
            )
        return replace(self, seal=UNSEALED)

    def make_sentry(self) -> "Capability":
        """Turn an executable capability into an invoke-only sealed entry."""
        self._require_tag()
        if not self.seal.is_unsealed:
            raise AlreadySealed(f"cannot make sentry from {self.render()}")
        if not self.perms.execute:
            raise NotExecutable("sentry requires execute permission")
        return replace(self, seal=SENTRY)

    def render(self) -> str:
        """Canonical one-line form: ``0x%x [%s,0x%x-0x%x]`` plus markers."""
        text = f"0x{self.address:x} [{self.perms.short_string()},0x{self.base:x}-0x{self.top:x}]"
        if self.seal.is_sealed:
            text += " (sealed)"
        elif self.seal.is_sentry:
            text += " (sentry)"
        if not self.tag:
            text += " (invalid)"
        return text

    def __str__(self) -> str:
        return self.render()
