"""capsim: a hardware-independent capability machine with compartments,
a modeled heap allocator and dynamic linker, and a harness that measures
which compartment-escape attacks each platform profile stops."""

__version__ = "0.1.0"

from .capability import Capability, Permissions, SealState, perms
from .machine import MitigationSet, PlatformProfile, build_machine
from .memory import TaggedMemory
from .scanner import RegionSet, ScanLimits, ScanStats, scan_recursive
from .scenario import SCENARIOS, ScenarioOutcome, ScenarioSpec

__all__ = [
    "Capability",
    "Permissions",
    "SealState",
    "perms",
    "MitigationSet",
    "PlatformProfile",
    "build_machine",
    "TaggedMemory",
    "RegionSet",
    "ScanLimits",
    "ScanStats",
    "scan_recursive",
    "SCENARIOS",
    "ScenarioOutcome",
    "ScenarioSpec",
    "__version__",
]
