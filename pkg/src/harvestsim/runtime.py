"""Opportunistic peer-memory runtime: allocation, placement, revocation.

The runtime hands out revocable handles to peer-device segments. Releasing
a handle (free or revoke) is ordered in sim time: every in-flight transfer
touching the region completes first, then the placement entry is
invalidated, then the registered callback fires, then the segment returns
to the device free list. Reads that arrive after invalidation miss and
must route to the fallback tier.

Cached object contents are modeled as 64-bit hashes, which makes byte
equivalence between peer-served and host-served reads checkable without
storing real data. The runtime itself never moves data and never writes
back: all transfers are application-initiated.
"""

from __future__ import annotations

import enum
import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .events import Simulator
from .interconnect import Topology, TransferEngine, TransferRequest, Transfer
from .memalloc import (
    DeviceState,
    Segment,
    Tier,
    alloc_best_fit,
    allocated_bytes,
    free_segment,
    harvestable_capacity,
    init_device,
)


def stable_hash64(*parts) -> int:
    """Platform-stable 64-bit hash of the given parts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "big")


class Durability(enum.Enum):
    BACKED = "Backed"   # authoritative copy lives in host DRAM
    LOSSY = "Lossy"     # reconstructible after loss


class RevokeReason(enum.Enum):
    PRESSURE = "Pressure"
    POLICY = "Policy"
    EXTERNAL_RECLAIM = "ExternalReclaim"


class PolicyKind(enum.Enum):
    BEST_FIT = "BestFit"
    LOCALITY = "Locality"
    FAIRNESS = "Fairness"
    STABILITY = "Stability"


class StaleHandleError(Exception):
    """Operation on a handle whose generation is no longer live."""


@dataclass(frozen=True)
class HarvestHandle:
    device_id: int
    base: int
    size: int
    generation: int

    def key(self) -> tuple:
        return (self.device_id, self.base, self.size, self.generation)


@dataclass
class AllocationHints:
    preferred_devices: list[int] | None = None
    durability: Durability = Durability.BACKED
    client_id: str = "default"
    locality_group: str | None = None


@dataclass
class Policy:
    kind: PolicyKind = PolicyKind.BEST_FIT
    # Fairness: token bucket per client, bytes per sim-second.
    fairness_budget_bytes_per_s: float = float("inf")
    fairness_burst_bytes: float | None = None
    # Stability: admit peers with fewer revocations than this in the window.
    stability_window_s: float = 10.0
    stability_max_revocations: int = 3


class _State(enum.Enum):
    LIVE = "live"
    REVOKING = "revoking"   # draining; lookups still hit until invalidation
    FREEING = "freeing"     # draining after harvest_free
    DEAD = "dead"


@dataclass
class PlacementEntry:
    handle: HarvestHandle
    tag: object
    durability: Durability
    client_id: str
    state: _State = _State.LIVE
    callback: Callable | None = None
    last_access: float = 0.0
    inflight: set = field(default_factory=set)
    revoke_reason: RevokeReason | None = None


class HarvestRuntime:
    def __init__(self, sim: Simulator, topology: Topology,
                 policy: Policy | None = None,
                 compute_device_id: int | None = None):
        self.sim = sim
        self.topology = topology
        self.engine = TransferEngine(sim, topology)
        self.policy = policy or Policy()
        self.devices: dict[int, DeviceState] = {
            spec.device_id: init_device(spec) for spec in topology.devices
        }
        if compute_device_id is None:
            locals_ = [d for d in topology.devices if d.tier == Tier.LOCAL_HBM]
            compute_device_id = locals_[0].device_id if locals_ else 0
        self.compute_device_id = compute_device_id
        self.placement: dict[tuple, PlacementEntry] = {}
        self.ceiling: dict[int, int] = {
            d.device_id: d.usable for d in topology.devices
        }
        self._generation = 0
        self._peer_memory: dict[tuple, tuple[object, int]] = {}
        self._buckets: dict[str, tuple[float, float]] = {}
        self._churn: dict[int, deque] = {}
        # observation hook, e.g. for adversarial revocation schedules
        self.on_alloc: Callable[[HarvestHandle], None] | None = None

    # ------------------------------------------------------------------
    # allocation

    def peer_states(self) -> list[DeviceState]:
        return [
            st for st in sorted(self.devices.values(),
                                key=lambda s: s.spec.device_id)
            if st.spec.tier == Tier.PEER_HBM
        ]

    def _device_fit(self, state: DeviceState, size: int) -> tuple | None:
        """Best-fit key (leftover, base, device_id) on one device, or None."""
        dev = state.spec.device_id
        if allocated_bytes(state) + size > self.ceiling[dev]:
            return None
        best = None
        for seg in state.free_list:
            if seg.size < size:
                continue
            key = (seg.size - size, seg.base, dev)
            if best is None or key < best:
                best = key
        return best

    def select_peer(self, policy: Policy, candidates: list[DeviceState],
                    size: int, hints: AllocationHints) -> int | None:
        if not candidates:
            return None
        if policy.kind == PolicyKind.FAIRNESS:
            if not self._fairness_admit(hints.client_id, size):
                return None
        if policy.kind == PolicyKind.STABILITY:
            admissible = [
                st for st in candidates
                if self._churn_score(st.spec.device_id)
                < policy.stability_max_revocations
            ]
            candidates = admissible
        scored = []
        for st in candidates:
            fit = self._device_fit(st, size)
            if fit is None:
                continue
            if policy.kind == PolicyKind.LOCALITY:
                hops = self.topology.hops_between(
                    self.compute_device_id, st.spec.device_id)
                scored.append(((hops,) + fit, st.spec.device_id))
            else:
                scored.append((fit, st.spec.device_id))
        if not scored:
            return None
        return min(scored)[1]

    def harvest_alloc(self, size: int,
                      hints: AllocationHints | None = None) -> HarvestHandle | None:
        """Allocate a revocable segment on a peer device, or None."""
        if size <= 0:
            raise ValueError("allocation size must be > 0")
        hints = hints or AllocationHints()
        peers = self.peer_states()
        if hints.preferred_devices:
            preferred = [st for st in peers
                         if st.spec.device_id in hints.preferred_devices]
            device_id = self.select_peer(self.policy, preferred, size, hints)
            if device_id is None:
                others = [st for st in peers
                          if st.spec.device_id not in hints.preferred_devices]
                device_id = self.select_peer(self.policy, others, size, hints)
        else:
            device_id = self.select_peer(self.policy, peers, size, hints)
        if device_id is None:
            self.sim.record("alloc_nocapacity", size=size,
                            client=hints.client_id)
            return None
        if self.policy.kind == PolicyKind.FAIRNESS:
            self._fairness_spend(hints.client_id, size)
        seg = alloc_best_fit(self.devices[device_id], size)
        assert seg is not None  # select_peer verified fit
        self._generation += 1
        handle = HarvestHandle(device_id, seg.base, seg.size, self._generation)
        entry = PlacementEntry(
            handle=handle, tag=None, durability=hints.durability,
            client_id=hints.client_id, last_access=self.sim.now,
        )
        self.placement[handle.key()] = entry
        self.sim.record("alloc", device=device_id, base=seg.base,
                        size=seg.size, gen=handle.generation,
                        client=hints.client_id)
        if self.on_alloc is not None:
            self.on_alloc(handle)
        return handle

    def _fairness_state(self, client_id: str) -> tuple[float, float]:
        budget = self.policy.fairness_budget_bytes_per_s
        burst = self.policy.fairness_burst_bytes
        if burst is None:
            burst = budget
        if client_id not in self._buckets:
            self._buckets[client_id] = (burst, self.sim.now)
        tokens, last = self._buckets[client_id]
        tokens = min(burst, tokens + budget * (self.sim.now - last))
        self._buckets[client_id] = (tokens, self.sim.now)
        return self._buckets[client_id]

    def _fairness_admit(self, client_id: str, size: int) -> bool:
        tokens, _ = self._fairness_state(client_id)
        return tokens >= size

    def _fairness_spend(self, client_id: str, size: int) -> None:
        tokens, last = self._fairness_state(client_id)
        self._buckets[client_id] = (tokens - size, last)

    def _churn_score(self, device_id: int) -> int:
        window = self._churn.get(device_id)
        if not window:
            return 0
        horizon = self.sim.now - self.policy.stability_window_s
        while window and window[0] < horizon:
            window.popleft()
        return len(window)

    def _note_churn(self, device_id: int) -> None:
        self._churn.setdefault(device_id, deque()).append(self.sim.now)

    # ------------------------------------------------------------------
    # placement queries

    def lookup(self, handle: HarvestHandle) -> PlacementEntry | None:
        """Placement lookup; misses once the entry has been invalidated."""
        entry = self.placement.get(handle.key())
        if entry is None or entry.state in (_State.DEAD, _State.FREEING):
            return None
        return entry

    def is_live(self, handle: HarvestHandle) -> bool:
        return self.lookup(handle) is not None

    def touch(self, handle: HarvestHandle) -> None:
        entry = self.lookup(handle)
        if entry is not None:
            entry.last_access = self.sim.now

    def set_tag(self, handle: HarvestHandle, tag: object) -> None:
        entry = self._require(handle, allow_revoking=True)
        entry.tag = tag

    def _require(self, handle: HarvestHandle,
                 allow_revoking: bool = False) -> PlacementEntry:
        entry = self.placement.get(handle.key())
        ok = entry is not None and (
            entry.state == _State.LIVE
            or (allow_revoking and entry.state == _State.REVOKING)
        )
        if not ok:
            raise StaleHandleError(f"handle {handle} is not live")
        return entry

    # ------------------------------------------------------------------
    # content model (64-bit hashes standing in for bytes)

    def write_peer(self, handle: HarvestHandle, tag: object, content: int) -> None:
        self._require(handle, allow_revoking=True)
        self._peer_memory[handle.key()] = (tag, content)

    def read_peer(self, handle: HarvestHandle) -> tuple[object, int]:
        self._require(handle, allow_revoking=True)
        try:
            return self._peer_memory[handle.key()]
        except KeyError:
            raise StaleHandleError(
                f"handle {handle} has no written content") from None

    # ------------------------------------------------------------------
    # transfers

    def app_transfer(self, src: tuple[int, Segment], dst: tuple[int, Segment],
                     size: int, tag: object,
                     handle: HarvestHandle | None = None,
                     payload: int | None = None,
                     on_complete=None) -> Transfer:
        """Issue an application transfer, tracked for drain ordering.

        `handle` names the harvested region the transfer touches (source
        or destination). A payload written into a peer region is stored
        at completion; a read out of one captures the stored content.
        """
        entry = None
        if handle is not None:
            entry = self._require(handle, allow_revoking=True)
        captured = payload
        reading_peer = (
            handle is not None and src[0] == handle.device_id
            and src[1].base == handle.base
        )
        if reading_peer:
            captured_tag, captured = self.read_peer(handle)
            tag = tag if tag is not None else captured_tag
        req = TransferRequest(src=src, dst=dst, size=size,
                              issue_time=self.sim.now, tag=tag)

        def _done(xfer: Transfer):
            if entry is not None:
                entry.inflight.discard(id(req))
                if (handle is not None and dst[0] == handle.device_id
                        and dst[1].base == handle.base
                        and entry.state != _State.DEAD):
                    self._peer_memory[handle.key()] = (tag, captured)
                if entry.state in (_State.REVOKING, _State.FREEING) \
                        and not entry.inflight:
                    self._finish_release(entry)
            if on_complete is not None:
                on_complete(xfer, captured)

        xfer = self.engine.schedule_transfer(
            req, on_complete=_done, initiator="app",
            handle_key=handle.key() if handle is not None else None)
        if entry is not None:
            entry.inflight.add(id(req))
            entry.last_access = self.sim.now
        return xfer

    # ------------------------------------------------------------------
    # release paths

    def harvest_free(self, handle: HarvestHandle) -> None:
        """Free a live handle; the segment is reclaimed after drain."""
        entry = self.placement.get(handle.key())
        if entry is None or entry.state != _State.LIVE:
            raise StaleHandleError(f"handle {handle} is not live")
        entry.state = _State.FREEING
        self.sim.record("free_begin", **self._hfields(handle))
        if not entry.inflight:
            self.sim.schedule(0.0, self._maybe_finish, entry)

    def revoke(self, handle: HarvestHandle, reason: RevokeReason) -> None:
        """Revoke a handle; idempotent on stale or already-revoking handles."""
        entry = self.placement.get(handle.key())
        if entry is None or entry.state != _State.LIVE:
            return
        entry.state = _State.REVOKING
        entry.revoke_reason = reason
        self.sim.record("revoke_begin", reason=reason.value,
                        **self._hfields(handle))
        if not entry.inflight:
            self.sim.schedule(0.0, self._maybe_finish, entry)

    def _maybe_finish(self, entry: PlacementEntry) -> None:
        if entry.state in (_State.REVOKING, _State.FREEING) \
                and not entry.inflight:
            self._finish_release(entry)

    def _finish_release(self, entry: PlacementEntry) -> None:
        handle = entry.handle
        was_revoke = entry.state == _State.REVOKING
        entry.state = _State.DEAD
        if was_revoke:
            self.sim.record("invalidate", **self._hfields(handle))
            self._note_churn(handle.device_id)
            if entry.callback is not None:
                self.sim.record("callback", **self._hfields(handle))
                entry.callback(handle, entry.revoke_reason)
        del self.placement[handle.key()]
        self._peer_memory.pop(handle.key(), None)
        free_segment(self.devices[handle.device_id],
                     Segment(handle.base, handle.size))
        self.sim.record("free", cause="revoke" if was_revoke else "free",
                        **self._hfields(handle))

    def harvest_register_cb(self, handle: HarvestHandle,
                            callback: Callable) -> None:
        """Register (or replace) the revocation callback for a handle."""
        entry = self._require(handle, allow_revoking=True)
        entry.callback = callback

    @staticmethod
    def _hfields(handle: HarvestHandle) -> dict:
        return dict(device=handle.device_id, base=handle.base,
                    size=handle.size, gen=handle.generation)

    # ------------------------------------------------------------------
    # pressure and availability

    def external_reclaim(self, device_id: int, amount: int,
                         order: str = "lru") -> list[HarvestHandle]:
        """Revoke handles on a device until `amount` bytes are released.

        Best effort: returns the handles revoked, possibly freeing less
        than requested if the device runs out of live allocations.
        """
        live = [
            e for e in self.placement.values()
            if e.handle.device_id == device_id and e.state == _State.LIVE
        ]
        if order == "lru":
            live.sort(key=lambda e: (e.last_access, e.handle.generation))
        elif order == "fifo":
            live.sort(key=lambda e: e.handle.generation)
        else:
            raise ValueError(f"unknown eviction order {order!r}")
        revoked = []
        freed = 0
        for entry in live:
            if freed >= amount:
                break
            self.revoke(entry.handle, RevokeReason.EXTERNAL_RECLAIM)
            revoked.append(entry.handle)
            freed += entry.handle.size
        self.sim.record("reclaim", device=device_id, amount=amount,
                        revoked=len(revoked), freed=freed)
        return revoked

    def occupied_bytes(self, device_id: int) -> int:
        return allocated_bytes(self.devices[device_id])

    def harvestable(self, device_id: int) -> int:
        state = self.devices[device_id]
        by_freelist = harvestable_capacity(state)
        by_ceiling = self.ceiling[device_id] - allocated_bytes(state)
        return max(0, min(by_freelist, by_ceiling))

    def apply_availability(self, device_id: int,
                           steps: list[tuple[float, int]]) -> None:
        """Drive a device's harvestable ceiling from a step timeline.

        Each downward step reclaims enough live handles to fit under the
        new ceiling (or empties the device).
        """
        for time, level in steps:
            self.sim.schedule_at(time, self._availability_step,
                                 device_id, level)

    def _availability_step(self, device_id: int, level: int) -> None:
        usable = self.devices[device_id].spec.usable
        level = max(0, min(level, usable))
        self.ceiling[device_id] = level
        self.sim.record("availability_step", device=device_id, level=level)
        draining = sum(
            e.handle.size for e in self.placement.values()
            if e.handle.device_id == device_id and e.state != _State.LIVE
        )
        shortfall = self.occupied_bytes(device_id) - level
        if shortfall > draining:
            self.external_reclaim(device_id, shortfall - draining)
