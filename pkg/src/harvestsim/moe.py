"""Expert-offload workload: skewed routing, rebalancing, pipelined decode.

The decode pipeline walks (layer, micro-batch) stages in layer-major
order. Weight fetches for stage s are issued at the start of stage s-1,
so a stage's effective latency is max(compute_time, fetch arrival). One
uncounted warm stage precedes measurement, overlapping the first fetch
batch, which mirrors warmup in the measured system and makes the
closed-form bound sum(max(compute, fetch_s)) exact.

Experts are durable objects: the host copy is authoritative and peer
placement is purely a cache. A miss never promotes an expert to peer
memory; placement changes only through rebalancing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import Simulator
from .memalloc import Segment, Tier
from .profiles import (
    CalibrationProfile,
    MoEProfile,
    PAPER_H100,
    build_topology,
)
from .runtime import (
    AllocationHints,
    Durability,
    HarvestHandle,
    HarvestRuntime,
    stable_hash64,
)

MoEModelSpec = MoEProfile


@dataclass
class PipelineConfig:
    microbatch_tokens: int = 324
    num_microbatches: int = 14
    local_cache_experts: int = 0

    def validate(self) -> None:
        if self.microbatch_tokens <= 0 or self.num_microbatches <= 0:
            raise ValueError("pipeline counts must be positive")


@dataclass
class RoutingTrace:
    num_microbatches: int
    num_layers: int
    num_experts: int
    # [microbatch][layer] -> sorted tuple of activated expert ids
    active: list[list[tuple[int, ...]]]
    # token-level activation counts, shape (layers, experts)
    counts: np.ndarray

    def active_set(self, microbatch: int, layer: int) -> tuple[int, ...]:
        return self.active[microbatch][layer]


def zipf_weights(num_experts: int, skew: float) -> np.ndarray:
    if skew < 0:
        raise ValueError("skew must be >= 0")
    ranks = np.arange(1, num_experts + 1, dtype=float)
    w = ranks ** -skew
    return w / w.sum()


def generate_routing(model: MoEModelSpec, pipeline: PipelineConfig,
                     skew: float, drift_period: int, seed: int
                     ) -> RoutingTrace:
    """Sample per-token top-k expert activations with a Zipf rank profile.

    Tokens draw top_k distinct experts via Gumbel perturbation of the
    log-weights (sampling without replacement). The rank-to-expert
    permutation is redrawn every drift_period micro-batches per layer;
    drift_period 0 keeps it fixed. Deterministic for a fixed seed.
    """
    pipeline.validate()
    rng = np.random.default_rng(seed)
    n = model.num_experts
    k = model.top_k
    if not 1 <= k <= n:
        raise ValueError(f"top_k {k} outside [1, {n}]")
    logw = np.log(zipf_weights(n, skew))
    perms = [rng.permutation(n) for _ in range(model.num_layers)]
    active: list[list[tuple[int, ...]]] = []
    counts = np.zeros((model.num_layers, n), dtype=np.int64)
    for mb in range(pipeline.num_microbatches):
        if drift_period > 0 and mb > 0 and mb % drift_period == 0:
            perms = [rng.permutation(n) for _ in range(model.num_layers)]
        row = []
        for layer in range(model.num_layers):
            gumbel = rng.gumbel(size=(pipeline.microbatch_tokens, n))
            ranks = np.argpartition(-(gumbel + logw), k - 1, axis=1)[:, :k]
            experts = perms[layer][ranks]
            ids, per_expert = np.unique(experts, return_counts=True)
            counts[layer, ids] += per_expert
            row.append(tuple(int(e) for e in ids))
        active.append(row)
    return RoutingTrace(
        num_microbatches=pipeline.num_microbatches,
        num_layers=model.num_layers,
        num_experts=n,
        active=active,
        counts=counts,
    )


def expert_content(model: MoEModelSpec, layer: int, expert: int) -> int:
    return stable_hash64("expert", model.name, layer, expert)


@dataclass
class ResidencyEntry:
    tier: Tier
    handle: HarvestHandle | None = None


class ExpertResidency:
    """Per-(layer, expert) record of which tier holds the weights.

    Every expert keeps an authoritative host copy; entries only say where
    the serving copy lives.
    """

    def __init__(self, model: MoEModelSpec):
        self.model = model
        self.entries: dict[tuple[int, int], ResidencyEntry] = {
            (layer, e): ResidencyEntry(Tier.HOST_DRAM)
            for layer in range(model.num_layers)
            for e in range(model.num_experts)
        }

    def get(self, layer: int, expert: int) -> ResidencyEntry:
        return self.entries[(layer, expert)]

    def set_tier(self, layer: int, expert: int, tier: Tier,
                 handle: HarvestHandle | None = None) -> None:
        self.entries[(layer, expert)] = ResidencyEntry(tier, handle)

    def on_tier(self, tier: Tier) -> list[tuple[int, int]]:
        return [key for key, e in self.entries.items() if e.tier == tier]

    def content_hashes(self) -> dict[tuple[int, int], int]:
        return {
            key: expert_content(self.model, *key) for key in self.entries
        }


def rebalance(sim: Simulator, runtime: HarvestRuntime, model: MoEModelSpec,
              residency: ExpertResidency, counts: np.ndarray,
              host_device_id: int,
              max_migrations: int | None = None) -> list[tuple[int, int, HarvestHandle]]:
    """Migrate the hottest host-resident experts into peer memory.

    Allocation stops at the first failed peer allocation. Residency flips
    to the peer tier when the copy-in completes; a later revocation flips
    it back to the host tier via the registered callback.
    """
    candidates = [
        (layer, e) for (layer, e) in residency.on_tier(Tier.HOST_DRAM)
    ]
    candidates.sort(key=lambda le: (-int(counts[le[0], le[1]]), le))
    migrations = []
    for layer, expert in candidates:
        if max_migrations is not None and len(migrations) >= max_migrations:
            break
        handle = runtime.harvest_alloc(
            model.expert_size,
            AllocationHints(durability=Durability.BACKED, client_id="moe"))
        if handle is None:
            break
        tag = ("expert", layer, expert)
        runtime.set_tag(handle, tag)

        def _revoked(h, reason, layer=layer, expert=expert):
            residency.set_tier(layer, expert, Tier.HOST_DRAM, None)

        runtime.harvest_register_cb(handle, _revoked)
        payload = expert_content(model, layer, expert)

        def _arrived(xfer, content, layer=layer, expert=expert, h=handle):
            if runtime.is_live(h):
                residency.set_tier(layer, expert, Tier.PEER_HBM, h)

        runtime.app_transfer(
            src=(host_device_id, Segment(0, model.expert_size)),
            dst=(handle.device_id, Segment(handle.base, handle.size)),
            size=model.expert_size, tag=tag, handle=handle,
            payload=payload, on_complete=_arrived)
        migrations.append((layer, expert, handle))
    return migrations


@dataclass
class DecodeMetrics:
    tokens_per_s: float
    decode_time: float
    per_microbatch_latency: list[float]
    fetch_stall_s: float
    per_stage_advance: list[float]
    read_errors: int
    reads: int


class _DecodeRun:
    """Event-driven execution of one decode pass over the stage grid."""

    def __init__(self, sim, runtime, model, pipeline, trace, residency,
                 host_device_id, local_device_id):
        trace_ok = (trace.num_microbatches >= pipeline.num_microbatches
                    and trace.num_layers >= model.num_layers)
        if not trace_ok:
            raise ValueError("routing trace does not cover the pipeline")
        self.sim = sim
        self.runtime = runtime
        self.model = model
        self.pipeline = pipeline
        self.trace = trace
        self.residency = residency
        self.host = host_device_id
        self.local = local_device_id
        self.stages = [
            (layer, mb)
            for layer in range(model.num_layers)
            for mb in range(pipeline.num_microbatches)
        ]
        n = len(self.stages)
        self.pending = [0] * n
        self.pending_issued = [False] * n
        self.issue_time = [0.0] * n
        self.last_arrival = [0.0] * n
        self.compute_done_through = -1
        self.started = [False] * n
        self.start_time = [0.0] * n
        self.warmup_end = 0.0
        self.end_time = 0.0
        self.read_errors = 0
        self.reads = 0
        self._staging = 0

    def _staging_segment(self, size: int) -> Segment:
        # synthetic offsets; local/host staging is not allocator-backed
        seg = Segment(self._staging, size)
        self._staging += size
        return seg

    def run(self) -> DecodeMetrics:
        model, pipeline = self.model, self.pipeline
        compute = model.compute_time_per_microbatch
        self._issue_fetches(0)
        self.warmup_end = self.sim.now + compute
        self.sim.schedule(compute, self._compute_finished, -1)
        self.sim.run()
        decode_time = self.end_time - self.warmup_end
        advances = []
        stall = 0.0
        for s in range(len(self.stages)):
            fetch = max(0.0, self.last_arrival[s] - self.issue_time[s]) \
                if self.pending_issued[s] else 0.0
            advances.append(max(compute, fetch))
            stall += max(0.0, fetch - compute)
        per_mb = [0.0] * pipeline.num_microbatches
        for s, (_, mb) in enumerate(self.stages):
            per_mb[mb] += advances[s]
        tokens = pipeline.microbatch_tokens * pipeline.num_microbatches
        return DecodeMetrics(
            tokens_per_s=tokens / decode_time if decode_time > 0 else float("inf"),
            decode_time=decode_time,
            per_microbatch_latency=per_mb,
            fetch_stall_s=stall,
            per_stage_advance=advances,
            read_errors=self.read_errors,
            reads=self.reads,
        )

    def _issue_fetches(self, s: int) -> None:
        if s >= len(self.stages):
            return
        layer, mb = self.stages[s]
        self.issue_time[s] = self.sim.now
        self.last_arrival[s] = self.sim.now
        self.pending_issued[s] = True
        size = self.model.expert_size
        for expert in self.trace.active_set(mb, layer):
            entry = self.residency.get(layer, expert)
            if entry.tier == Tier.LOCAL_HBM:
                continue
            expected = expert_content(self.model, layer, expert)
            tag = ("expert", layer, expert)
            dst = (self.local, self._staging_segment(size))
            handle = entry.handle
            if (entry.tier == Tier.PEER_HBM and handle is not None
                    and self.runtime.is_live(handle)):
                src = (handle.device_id, Segment(handle.base, handle.size))
                self.pending[s] += 1
                self.runtime.app_transfer(
                    src=src, dst=dst, size=size, tag=tag, handle=handle,
                    on_complete=lambda x, content, s=s, exp=expected:
                        self._fetch_done(s, content, exp))
            else:
                src = (self.host, self._staging_segment(size))
                self.pending[s] += 1
                self.runtime.app_transfer(
                    src=src, dst=dst, size=size, tag=tag,
                    payload=expected,
                    on_complete=lambda x, content, s=s, exp=expected:
                        self._fetch_done(s, content, exp))

    def _fetch_done(self, s: int, content: int, expected: int) -> None:
        self.reads += 1
        if content != expected:
            self.read_errors += 1
        self.pending[s] -= 1
        self.last_arrival[s] = self.sim.now
        self._maybe_start(s)

    def _compute_finished(self, s: int) -> None:
        self.compute_done_through = s
        self._maybe_start(s + 1)

    def _maybe_start(self, s: int) -> None:
        if s >= len(self.stages):
            self.end_time = self.sim.now
            return
        if self.started[s]:
            return
        if self.compute_done_through >= s - 1 and self.pending[s] == 0:
            self.started[s] = True
            self.start_time[s] = self.sim.now
            self.sim.record("stage_start", stage=s, layer=self.stages[s][0],
                            microbatch=self.stages[s][1])
            self._issue_fetches(s + 1)
            self.sim.schedule(self.model.compute_time_per_microbatch,
                              self._compute_finished, s)


def simulate_decode(sim: Simulator, runtime: HarvestRuntime,
                    model: MoEModelSpec, pipeline: PipelineConfig,
                    trace: RoutingTrace, residency: ExpertResidency,
                    host_device_id: int,
                    local_device_id: int = 0) -> DecodeMetrics:
    """Run the overlapped decode pipeline and return throughput metrics."""
    run = _DecodeRun(sim, runtime, model, pipeline, trace, residency,
                     host_device_id, local_device_id)
    return run.run()


def place_offloaded(sim: Simulator, runtime: HarvestRuntime,
                    model: MoEModelSpec, residency: ExpertResidency,
                    trace: RoutingTrace, fraction_pct: float, tier: Tier,
                    host_device_id: int) -> None:
    """Pin the hottest experts locally and offload the coldest per layer.

    The offloaded share goes to the requested tier; peer placement uses
    opportunistic allocation with host fallback on exhaustion. Setup
    transfers drain before this returns.
    """
    if not 0 <= fraction_pct <= 100:
        raise ValueError("fraction must be within [0, 100]")
    n = model.num_experts
    n_off = int(round(n * fraction_pct / 100.0))
    offloaded = []
    for layer in range(model.num_layers):
        order = sorted(range(n),
                       key=lambda e: (int(trace.counts[layer, e]), e))
        for e in order[:n_off]:
            residency.set_tier(layer, e, Tier.HOST_DRAM)
            offloaded.append((layer, e))
        for e in order[n_off:]:
            residency.set_tier(layer, e, Tier.LOCAL_HBM)
    if tier == Tier.PEER_HBM and offloaded:
        counts = trace.counts
        rebalance(sim, runtime, model, residency, counts, host_device_id,
                  max_migrations=len(offloaded))
        sim.run()
    elif tier not in (Tier.PEER_HBM, Tier.HOST_DRAM):
        raise ValueError(f"offload tier must be peer or host, got {tier}")


@dataclass(frozen=True)
class SweepRow:
    fraction_pct: float
    tier: str
    tokens_per_s: float
    stall_s: float


def offload_sweep(model: MoEModelSpec, pipeline: PipelineConfig,
                  fractions: list[float], tier: Tier, seed: int,
                  profile: CalibrationProfile = PAPER_H100,
                  skew: float = 1.2, drift_period: int = 0
                  ) -> list[SweepRow]:
    """Throughput across offload fractions with the coldest experts offloaded."""
    rows = []
    trace = generate_routing(model, pipeline, skew, drift_period, seed)
    for fraction in fractions:
        sim = Simulator()
        topology = build_topology(profile)
        runtime = HarvestRuntime(sim, topology)
        host_id = topology.devices[-1].device_id
        residency = ExpertResidency(model)
        place_offloaded(sim, runtime, model, residency, trace, fraction,
                        tier, host_id)
        metrics = simulate_decode(sim, runtime, model, pipeline, trace,
                                  residency, host_id)
        tier_name = "peer" if tier == Tier.PEER_HBM else "host"
        rows.append(SweepRow(fraction, tier_name, metrics.tokens_per_s,
                             metrics.fetch_stall_s))
    return rows
