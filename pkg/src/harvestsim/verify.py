"""Event-log checkers for the release-ordering and no-writeback invariants.

All comparisons use (time, seq) stamps, so same-time events are still
strictly ordered by processing order.
"""

from __future__ import annotations

from collections import defaultdict

from .events import EventLog, LogRecord
from .memalloc import Tier


def _handle_key(rec: LogRecord) -> tuple | None:
    if rec.kind in ("transfer_start", "transfer_complete"):
        return rec.data.get("handle")
    if rec.kind in ("alloc", "revoke_begin", "free_begin",
                    "invalidate", "callback", "free"):
        d = rec.data
        return (d["device"], d["base"], d["size"], d["gen"])
    return None


def verify_release_ordering(log: EventLog) -> list[str]:
    """Check drain-before-free and invalidate-before-notify per handle.

    Returns a list of human-readable violations (empty when clean).
    """
    by_handle: dict[tuple, list[LogRecord]] = defaultdict(list)
    for rec in log:
        key = _handle_key(rec)
        if key is not None:
            by_handle[key].append(rec)
    violations = []
    for key, recs in by_handle.items():
        frees = [r for r in recs if r.kind == "free"]
        invalidates = [r for r in recs if r.kind == "invalidate"]
        callbacks = [r for r in recs if r.kind == "callback"]
        if len(frees) > 1:
            violations.append(f"{key}: freed {len(frees)} times")
        if len(invalidates) > 1:
            violations.append(f"{key}: invalidated {len(invalidates)} times")
        free_stamp = frees[0].stamp if frees else None
        inv_stamp = invalidates[0].stamp if invalidates else None
        if inv_stamp and free_stamp and not inv_stamp < free_stamp:
            violations.append(f"{key}: invalidate not before free")
        for cb in callbacks:
            if inv_stamp is None or not inv_stamp < cb.stamp:
                violations.append(f"{key}: callback without prior invalidate")
            if free_stamp and not cb.stamp < free_stamp:
                violations.append(f"{key}: callback after free")
        for rec in recs:
            if rec.kind == "transfer_complete" and free_stamp \
                    and not rec.stamp < free_stamp:
                violations.append(
                    f"{key}: transfer completion at {rec.stamp} after free "
                    f"at {free_stamp}")
            if rec.kind == "transfer_complete" and inv_stamp \
                    and not rec.stamp < inv_stamp:
                violations.append(
                    f"{key}: transfer completion at {rec.stamp} after "
                    f"invalidation at {inv_stamp}")
            if rec.kind == "transfer_start" and inv_stamp \
                    and rec.stamp > inv_stamp:
                violations.append(
                    f"{key}: transfer issued at {rec.stamp} after "
                    f"invalidation at {inv_stamp}")
    return violations


def verify_no_runtime_writeback(log: EventLog, topology=None) -> list[str]:
    """The runtime never initiates transfers; peer contents are never
    written back by anything other than the application."""
    violations = []
    tiers = {}
    if topology is not None:
        tiers = {d.device_id: d.tier for d in topology.devices}
    for rec in log.of_kind("transfer_start"):
        if rec.data.get("initiator") != "app":
            violations.append(f"runtime-initiated transfer: {rec!r}")
        if tiers:
            src_tier = tiers.get(rec.data["src"])
            dst_tier = tiers.get(rec.data["dst"])
            if (src_tier == Tier.PEER_HBM and dst_tier == Tier.HOST_DRAM
                    and rec.data.get("initiator") != "app"):
                violations.append(f"peer-to-host writeback: {rec!r}")
    return violations


def first_violation_excerpt(log: EventLog, violations: list[str]) -> str:
    if not violations:
        return ""
    tail = [repr(r) for r in log.records[-12:]]
    return violations[0] + "\n" + "\n".join(tail)
