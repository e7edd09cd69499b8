"""Per-device segment accounting with a best-fit allocator.

Addresses are logical byte offsets local to each device; there is no
global address space. The free list is kept sorted by base and eagerly
coalesced so that any reachable state has a canonical representation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Tier(enum.Enum):
    LOCAL_HBM = "LocalHBM"
    PEER_HBM = "PeerHBM"
    HOST_DRAM = "HostDRAM"


class DoubleFreeError(Exception):
    """Freeing a segment that is not currently allocated."""


@dataclass(frozen=True)
class DeviceSpec:
    device_id: int
    tier: Tier
    capacity: int
    reserved: int = 0   # capacity withheld from harvesting (isolation instance)
    headroom: int = 0   # safety margin never allocated

    def validate(self) -> None:
        if self.capacity <= 0:
            raise ValueError(f"device {self.device_id}: capacity must be > 0")
        if self.reserved < 0 or self.headroom < 0:
            raise ValueError(f"device {self.device_id}: negative reservation")
        if self.reserved + self.headroom > self.capacity:
            raise ValueError(
                f"device {self.device_id}: reserved ({self.reserved}) + "
                f"headroom ({self.headroom}) exceeds capacity ({self.capacity})"
            )

    @property
    def usable(self) -> int:
        return self.capacity - self.reserved - self.headroom


@dataclass(frozen=True)
class Segment:
    base: int
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"segment size must be > 0, got {self.size}")
        if self.base < 0:
            raise ValueError(f"segment base must be >= 0, got {self.base}")

    @property
    def end(self) -> int:
        return self.base + self.size

    def overlaps(self, other: "Segment") -> bool:
        return self.base < other.end and other.base < self.end


@dataclass
class DeviceState:
    spec: DeviceSpec
    free_list: list[Segment] = field(default_factory=list)  # sorted by base
    allocated: dict[int, Segment] = field(default_factory=dict)


def init_device(spec: DeviceSpec) -> DeviceState:
    spec.validate()
    state = DeviceState(spec=spec)
    if spec.usable > 0:
        state.free_list.append(Segment(0, spec.usable))
    return state


def harvestable_capacity(state: DeviceState) -> int:
    return sum(seg.size for seg in state.free_list)


def allocated_bytes(state: DeviceState) -> int:
    return sum(seg.size for seg in state.allocated.values())


def alloc_best_fit(state: DeviceState, size: int) -> Segment | None:
    """Allocate `size` bytes from the free segment with minimal leftover.

    Ties break toward the lowest base. Returns None when nothing fits
    (the caller falls back to the host tier).
    """
    if size <= 0:
        raise ValueError(f"allocation size must be > 0, got {size}")
    best_idx = -1
    best_key = None
    for idx, seg in enumerate(state.free_list):
        if seg.size < size:
            continue
        key = (seg.size - size, seg.base)
        if best_key is None or key < best_key:
            best_key = key
            best_idx = idx
    if best_idx < 0:
        return None
    seg = state.free_list.pop(best_idx)
    taken = Segment(seg.base, size)
    if seg.size > size:
        state.free_list.insert(best_idx, Segment(seg.base + size, seg.size - size))
    state.allocated[taken.base] = taken
    return taken


def free_segment(state: DeviceState, segment: Segment) -> None:
    """Return an allocated segment to the free list, coalescing neighbors."""
    current = state.allocated.get(segment.base)
    if current is None or current.size != segment.size:
        raise DoubleFreeError(
            f"segment base={segment.base} size={segment.size} is not allocated"
        )
    del state.allocated[segment.base]
    base, end = segment.base, segment.end
    # locate insert position in the base-sorted free list
    idx = 0
    while idx < len(state.free_list) and state.free_list[idx].base < base:
        idx += 1
    # coalesce with predecessor and successor where adjacent
    if idx > 0 and state.free_list[idx - 1].end == base:
        prev = state.free_list.pop(idx - 1)
        base = prev.base
        idx -= 1
    if idx < len(state.free_list) and state.free_list[idx].base == end:
        nxt = state.free_list.pop(idx)
        end = nxt.end
    state.free_list.insert(idx, Segment(base, end - base))


def check_invariants(state: DeviceState) -> None:
    """Assert accounting exactness; raises AssertionError on violation."""
    segs = sorted(
        list(state.free_list) + list(state.allocated.values()),
        key=lambda s: s.base,
    )
    for a, b in zip(segs, segs[1:]):
        assert a.end <= b.base, f"overlap between {a} and {b}"
    for seg in segs:
        assert seg.end <= state.spec.usable, f"{seg} exceeds usable capacity"
    total = sum(s.size for s in segs)
    assert total == state.spec.usable, (
        f"accounting mismatch: {total} != usable {state.spec.usable}"
    )
    for a, b in zip(state.free_list, state.free_list[1:]):
        assert a.base < b.base, "free list not sorted"
        assert a.end < b.base, f"free list not coalesced: {a} touches {b}"
    for base, seg in state.allocated.items():
        assert base == seg.base, "allocated map key mismatch"
