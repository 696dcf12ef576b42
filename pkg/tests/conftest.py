"""Shared helpers for the test suite."""

from __future__ import annotations

import re

import pytest

from capsim.capability import PERM_ALL, Capability, SealState, perms
from capsim.memory import TaggedMemory

RENDER_RE = re.compile(
    r"^0x([0-9a-f]+) \[([rwxRWE]*),0x([0-9a-f]+)-0x([0-9a-f]+)\]"
    r"((?: \(sealed\))|(?: \(sentry\)))?( \(invalid\))?$"
)


def parse_render(text: str) -> Capability:
    """Reconstruct the renderable fields of a capability from its text form."""
    m = RENDER_RE.match(text)
    assert m, text
    seal = SealState.unsealed()
    if m.group(5) == " (sealed)":
        seal = SealState.sealed(0)
    elif m.group(5) == " (sentry)":
        seal = SealState.sentry()
    return Capability(
        address=int(m.group(1), 16),
        base=int(m.group(3), 16),
        top=int(m.group(4), 16),
        perms=perms(m.group(2)),
        seal=seal,
        tag=m.group(6) is None,
    )


def make_root(memory: TaggedMemory | None = None) -> Capability:
    return Capability(address=0, base=0, top=1 << 64, perms=PERM_ALL, tag=True)


@pytest.fixture
def memory() -> TaggedMemory:
    return TaggedMemory()


@pytest.fixture
def root() -> Capability:
    return make_root()
