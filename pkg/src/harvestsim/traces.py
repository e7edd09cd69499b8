"""Cluster snapshot ingestion, utilization CDF, and availability processes.

Snapshot files are comma-separated with a required header row:
machine_id,timestamp,gpu_mem_used,gpu_mem_capacity. Strict parsing
rejects the whole file on the first bad row; lenient parsing counts and
skips bad rows.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, TextIO

HEADER = ("machine_id", "timestamp", "gpu_mem_used", "gpu_mem_capacity")


class SnapshotParseError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class SnapshotRecord:
    machine_id: str
    timestamp: float
    gpu_mem_used: int
    gpu_mem_capacity: int

    @property
    def utilization(self) -> float:
        return self.gpu_mem_used / self.gpu_mem_capacity


def parse_snapshots(stream: TextIO, strict: bool = True
                    ) -> tuple[list[SnapshotRecord], int]:
    """Parse snapshot records; returns (records, rejected_row_count)."""
    lines = iter(enumerate(stream, start=1))
    try:
        _, header = next(lines)
    except StopIteration:
        raise SnapshotParseError(0, "empty file, header row required") from None
    cols = tuple(c.strip() for c in header.strip().split(","))
    if cols != HEADER:
        raise SnapshotParseError(1, f"bad header {cols}, expected {HEADER}")
    records = []
    rejected = 0
    for lineno, raw in lines:
        line = raw.strip()
        if not line:
            continue
        try:
            records.append(_parse_row(lineno, line))
        except SnapshotParseError:
            if strict:
                raise
            rejected += 1
    return records, rejected


def _parse_row(lineno: int, line: str) -> SnapshotRecord:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 4:
        raise SnapshotParseError(lineno, f"expected 4 columns, got {len(parts)}")
    machine_id = parts[0]
    try:
        timestamp = float(parts[1])
        used = int(parts[2])
        capacity = int(parts[3])
    except ValueError as exc:
        raise SnapshotParseError(lineno, f"non-numeric field: {exc}") from None
    if capacity <= 0:
        raise SnapshotParseError(lineno, f"capacity must be > 0, got {capacity}")
    if used < 0 or used > capacity:
        raise SnapshotParseError(
            lineno, f"used ({used}) outside [0, capacity={capacity}]")
    return SnapshotRecord(machine_id, timestamp, used, capacity)


def serialize_snapshots(records: Iterable[SnapshotRecord]) -> str:
    lines = [",".join(HEADER)]
    for r in records:
        lines.append(f"{r.machine_id},{r.timestamp!r},"
                     f"{r.gpu_mem_used},{r.gpu_mem_capacity}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class UtilizationCDF:
    # (utilization, cumulative machine fraction), both non-decreasing
    points: tuple[tuple[float, float], ...]

    def at(self, utilization: float) -> float:
        """Cumulative fraction of machines with mean utilization <= u."""
        best = 0.0
        for u, frac in self.points:
            if u <= utilization + 1e-12:
                best = frac
            else:
                break
        return best

    def serialize(self) -> str:
        lines = ["utilization,cumulative_fraction"]
        for u, frac in self.points:
            lines.append(f"{u!r},{frac!r}")
        return "\n".join(lines) + "\n"


def machine_means(records: Iterable[SnapshotRecord]) -> dict[str, float]:
    sums: dict[str, list] = {}
    for r in records:
        acc = sums.setdefault(r.machine_id, [0.0, 0])
        acc[0] += r.utilization
        acc[1] += 1
    return {m: s / n for m, (s, n) in sums.items()}


def compute_cdf(records: list[SnapshotRecord], resolution: int = 100,
                aggregation: str = "mean") -> UtilizationCDF:
    """Empirical CDF over per-machine utilization at the given resolution.

    Per-machine utilization aggregates that machine's snapshots (mean by
    default; max and per-snapshot are available since the source figure's
    aggregation is unspecified).
    """
    if not records:
        raise ValueError("no snapshot records")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if aggregation == "mean":
        values = sorted(machine_means(records).values())
    elif aggregation == "max":
        by_machine: dict[str, float] = {}
        for r in records:
            by_machine[r.machine_id] = max(
                by_machine.get(r.machine_id, 0.0), r.utilization)
        values = sorted(by_machine.values())
    elif aggregation == "snapshot":
        values = sorted(r.utilization for r in records)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    n = len(values)
    points = []
    idx = 0
    for i in range(1, resolution + 1):
        u = i / resolution
        while idx < n and values[idx] <= u + 1e-12:
            idx += 1
        points.append((u, idx / n))
    return UtilizationCDF(points=tuple(points))


@dataclass
class AvailabilityProcess:
    """Piecewise-constant harvestable bytes over time for one device."""

    steps: list[tuple[float, int]] = field(default_factory=list)

    def level_at(self, time: float) -> int:
        level = 0
        for t, v in self.steps:
            if t <= time:
                level = v
            else:
                break
        return level


def availability_from_trace(records: list[SnapshotRecord], capacity: int,
                            time_scale: float = 1.0, reserved: int = 0,
                            headroom: int = 0) -> AvailabilityProcess:
    """Map one machine's utilization timeline to harvestable bytes.

    harvestable(t) = capacity * (1 - utilization(t)) - reserved - headroom,
    clamped at 0; the time axis is multiplied by time_scale.
    """
    if not records:
        raise ValueError("no snapshot records")
    by_time = sorted(records, key=lambda r: r.timestamp)
    t0 = by_time[0].timestamp
    steps = []
    for r in by_time:
        harvestable = int(capacity * (1.0 - r.utilization)) - reserved - headroom
        steps.append(((r.timestamp - t0) * time_scale, max(0, harvestable)))
    return AvailabilityProcess(steps=steps)


def markov_availability(levels: list[int], mean_sojourns: list[float],
                        seed: int, horizon: float) -> AvailabilityProcess:
    """Continuous-time chain over capacity levels with exponential sojourns.

    From each level the chain jumps uniformly to one of the other levels
    (alternating when there are two). Deterministic per seed.
    """
    if len(levels) != len(mean_sojourns):
        raise ValueError("levels and mean_sojourns must have equal length")
    if not levels:
        raise ValueError("need at least one level")
    if any(s <= 0 for s in mean_sojourns):
        raise ValueError("sojourn times must be positive")
    rng = random.Random(seed)
    steps = []
    t = 0.0
    state = 0
    while t < horizon:
        steps.append((t, levels[state]))
        t += rng.expovariate(1.0 / mean_sojourns[state])
        if len(levels) > 1:
            nxt = rng.randrange(len(levels) - 1)
            state = nxt if nxt < state else nxt + 1
    return AvailabilityProcess(steps=steps)


def synthesize_population(machines: int = 1000, seed: int = 7,
                          snapshots_per_machine: int = 3
                          ) -> list[SnapshotRecord]:
    """Synthetic fleet shaped so 68% of machines average <= 20% utilization
    and 87% average <= 50%.

    Snapshots jitter symmetrically around each machine's mean so that the
    per-machine mean is exact.
    """
    rng = random.Random(seed)
    n_low = round(0.68 * machines)
    n_mid = round(0.87 * machines) - n_low
    n_high = machines - n_low - n_mid
    capacity = 80 * 1024 ** 3
    records = []
    means = (
        [rng.uniform(0.02, 0.19) for _ in range(n_low)]
        + [rng.uniform(0.21, 0.49) for _ in range(n_mid)]
        + [rng.uniform(0.51, 0.95) for _ in range(n_high)]
    )
    for idx, mean in enumerate(means):
        machine = f"m{idx:04d}"
        jitter = min(0.005, mean - 0.001)
        offsets = [0.0] if snapshots_per_machine % 2 == 1 else []
        while len(offsets) < snapshots_per_machine:
            offsets += [jitter, -jitter]
        for snap, off in enumerate(offsets):
            used = int(round((mean + off) * capacity))
            records.append(SnapshotRecord(machine, float(snap * 300),
                                          used, capacity))
    return records
