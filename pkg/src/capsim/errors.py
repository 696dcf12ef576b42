"""Fault types raised by the simulated machine.

Every fault corresponds to a condition that would trap on real capability
hardware or be rejected by the modeled runtime.  Attack code treats these
as observable outcomes, not crashes.
"""


class CapsimError(Exception):
    """Base class for all simulator faults."""


class CapabilityFault(CapsimError):
    """Faults raised by capability manipulation."""


class InvalidCapability(CapabilityFault):
    """The capability's tag is clear; it authorizes nothing."""


class SealedCapability(CapabilityFault):
    """A sealed or sentry capability was mutated or dereferenced."""


class BoundsEscalation(CapabilityFault):
    """Requested bounds are not a subset of the parent's bounds."""


class PermissionEscalation(CapabilityFault):
    """Requested permissions are not a subset of the parent's."""


class MissingSealPermission(CapabilityFault):
    """Sealer lacks the seal permission."""


class MissingUnsealPermission(CapabilityFault):
    """Key lacks the unseal permission."""


class AlreadySealed(CapabilityFault):
    """Seal or sentry requested on a capability that is already sealed."""


class NotSealed(CapabilityFault):
    """Unseal requested on an unsealed capability."""


class OtypeMismatch(CapabilityFault):
    """The key's address does not match the capability's object type."""


class NotExecutable(CapabilityFault):
    """Sentry requested on a capability without execute permission."""


class MemoryFault(CapsimError):
    """Faults raised by the tagged memory."""


class OutOfBounds(MemoryFault):
    """Access outside the authorizing capability's bounds."""


class PermissionDenied(MemoryFault):
    """The capability lacks the permission the access requires."""


class Unmapped(MemoryFault):
    """The address range is not backed by a mapped region."""


class Misaligned(MemoryFault):
    """Address or length violates the 16-byte granule alignment."""


class OverlappingMapping(MemoryFault):
    """New mapping overlaps an existing region."""


class AllocatorFault(CapsimError):
    """Faults raised by the modeled heap allocator."""


class OutOfMemory(AllocatorFault):
    """Arena cannot satisfy the allocation."""


class DoubleFree(AllocatorFault):
    """Chunk is already on the free list or in quarantine."""


class ForeignChunk(AllocatorFault):
    """Capability does not name a chunk of this arena."""


class LinkerFault(CapsimError):
    """Faults raised by the modeled dynamic linker."""


class DuplicateObject(LinkerFault):
    """An object with this path is already registered."""


class ObjectNotFound(LinkerFault):
    """No registered object matches the requested name."""


class UnlinkedSymbol(LinkerFault):
    """The compartment was not linked against the symbol."""


class MachineFault(CapsimError):
    """Faults raised by machine construction and compartment calls."""


class ConfigInvalid(MachineFault):
    """Unknown profile, mitigation, or scenario name."""


class NotInvocable(MachineFault):
    """Call target is neither a sentry nor an executable capability."""


class InternalFault(CapsimError):
    """Unexpected simulator failure; indicates a bug, not an outcome."""
