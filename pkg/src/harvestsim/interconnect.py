"""Transfer-cost model, calibration, and per-link FIFO transfer scheduling.

Latency of one transfer is affine in its size: fixed_cost + size/bandwidth.
A link is busy until the previous transfer on it completes, so concurrent
transfers on one link serialize in issue order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .events import Simulator
from .memalloc import DeviceSpec, Segment, Tier


class LinkKind(enum.Enum):
    PEER_LINK = "PeerLink"
    HOST_LINK = "HostLink"


class CalibrationError(Exception):
    pass


class RoutingError(Exception):
    pass


@dataclass(frozen=True)
class LinkSpec:
    kind: LinkKind
    fixed_cost: float       # seconds
    bandwidth: float        # bytes/second
    endpoints: tuple[int, int]
    hops: int = 1

    def __post_init__(self):
        if self.fixed_cost < 0:
            raise ValueError("fixed_cost must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")


def transfer_time(link: LinkSpec, size: int) -> float:
    if size < 0:
        raise ValueError("size must be >= 0")
    return link.fixed_cost + size / link.bandwidth


@dataclass
class Topology:
    devices: list[DeviceSpec]
    links: list[LinkSpec]
    _by_pair: dict[frozenset, LinkSpec] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate device ids in topology")
        for link in self.links:
            pair = frozenset(link.endpoints)
            if len(pair) != 2:
                raise ValueError(f"link endpoints must differ: {link.endpoints}")
            if pair in self._by_pair:
                raise ValueError(f"more than one link between {link.endpoints}")
            self._by_pair[pair] = link
        self._check_connectivity()

    def _check_connectivity(self) -> None:
        locals_ = [d for d in self.devices if d.tier == Tier.LOCAL_HBM]
        for local in locals_:
            for dev in self.devices:
                if dev.tier in (Tier.PEER_HBM, Tier.HOST_DRAM):
                    if self.link_between(local.device_id, dev.device_id) is None:
                        raise ValueError(
                            f"device {dev.device_id} ({dev.tier.value}) not "
                            f"linked to compute device {local.device_id}"
                        )

    def device(self, device_id: int) -> DeviceSpec:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(f"unknown device id {device_id}")

    def link_between(self, a: int, b: int) -> LinkSpec | None:
        return self._by_pair.get(frozenset((a, b)))

    def hops_between(self, a: int, b: int) -> int:
        link = self.link_between(a, b)
        if link is None:
            raise RoutingError(f"no link between devices {a} and {b}")
        return link.hops


@dataclass(frozen=True)
class TransferRequest:
    src: tuple[int, Segment]
    dst: tuple[int, Segment]
    size: int
    issue_time: float
    tag: object = None

    def __post_init__(self):
        if self.src[1].size != self.size or self.dst[1].size != self.size:
            raise ValueError("src/dst segment sizes must equal transfer size")


@dataclass
class Transfer:
    request: TransferRequest
    link: LinkSpec
    start_time: float
    completion_time: float
    seq: int


class TransferEngine:
    """Schedules transfers onto a topology with per-link FIFO serialization."""

    def __init__(self, sim: Simulator, topology: Topology):
        self.sim = sim
        self.topology = topology
        self._busy_until: dict[frozenset, float] = {}

    def schedule_transfer(self, req: TransferRequest, on_complete=None,
                          initiator: str = "app",
                          handle_key: tuple | None = None) -> Transfer:
        """Enqueue a transfer; returns it with its completion time fixed.

        The completion callback (if any) runs as a simulation event at the
        completion time, after the engine logs transfer_complete.
        """
        src_dev, dst_dev = req.src[0], req.dst[0]
        link = self.topology.link_between(src_dev, dst_dev)
        if link is None:
            raise RoutingError(f"no link between devices {src_dev} and {dst_dev}")
        if req.issue_time < self.sim.now:
            raise ValueError("cannot issue a transfer in the past")
        pair = frozenset((src_dev, dst_dev))
        start = max(req.issue_time, self._busy_until.get(pair, 0.0))
        completion = start + transfer_time(link, req.size)
        self._busy_until[pair] = completion
        fields = dict(
            src=src_dev, dst=dst_dev, size=req.size, tag=req.tag,
            src_base=req.src[1].base, dst_base=req.dst[1].base,
            initiator=initiator, handle=handle_key,
        )
        seq = self.sim.record("transfer_start", start=start, **fields).seq
        xfer = Transfer(req, link, start, completion, seq)

        def _complete():
            self.sim.record("transfer_complete", **fields)
            if on_complete is not None:
                on_complete(xfer)

        self.sim.schedule_at(completion, _complete)
        return xfer


def calibrate(points: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares fit of latency = fixed_cost + size/bandwidth.

    Returns (fixed_cost, bandwidth); fixed_cost is clamped at 0 if the
    unconstrained intercept is negative.
    """
    pts = [(float(s), float(l)) for s, l in points]
    if len(pts) < 2:
        raise CalibrationError("need at least 2 calibration points")
    sizes = np.array([p[0] for p in pts])
    lats = np.array([p[1] for p in pts])
    if np.any(lats <= 0):
        raise CalibrationError("latencies must be positive")
    if np.all(sizes == sizes[0]):
        raise CalibrationError("all sizes equal; slope is unconstrained")
    slope, intercept = np.polyfit(sizes, lats, 1)
    if slope <= 0:
        raise CalibrationError("fitted bandwidth is not positive")
    fixed_cost = max(0.0, float(intercept))
    bandwidth = 1.0 / float(slope)
    return fixed_cost, bandwidth


def calibration_rms(points: Iterable[tuple[float, float]],
                    fixed_cost: float, bandwidth: float) -> float:
    """RMS relative error of the affine model on the given points."""
    errs = []
    for size, lat in points:
        model = fixed_cost + size / bandwidth
        errs.append((model - lat) / lat)
    if not errs:
        raise CalibrationError("no points")
    return math.sqrt(sum(e * e for e in errs) / len(errs))


def load_calibration_points(stream: TextIO) -> list[tuple[float, float]]:
    """Parse a two-column comma-separated (size_bytes, latency_seconds) file.

    Blank lines and '#' comments are skipped.
    """
    points = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise CalibrationError(f"line {lineno}: expected 2 columns, got {len(parts)}")
        try:
            size, lat = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise CalibrationError(f"line {lineno}: {exc}") from None
        points.append((size, lat))
    return points
