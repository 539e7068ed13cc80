"""Analytical latency model of an MX systolic-array accelerator.

Compute: output-stationary ``array_dim x array_dim`` tiles, K streamed one
group at a time.  A group dot costs 4 cycles when both operands are MX6 and
16 cycles when either is MX9.  Tiles are spread over ``num_arrays`` arrays
and a single ``2 * array_dim - 1`` fill/drain term is added per GEMM.

Memory: every GEMM reads its two operands and writes its output in MX form
(exact packed sizes, group padding included).  Layer latency is
``max(compute, memory)``; the reorder controller and MX converter are
pipelined behind the array and add nothing unless ``convert_cycles`` is set.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .codec import MX6, MX9, MxFormatSpec
from .errors import PlanError, ValidationError
from .gemm import PAIR_66, PAIR_69, PAIR_99, PAIRS
from .planner import AttentionPlan, LinearLayerPlan, PrecisionPlanSet, percent_count


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class HardwareConfig:
    array_dim: int = 16
    num_arrays: int = 1024
    frequency_hz: float = 5.0e8
    mem_bandwidth_bytes_per_s: float = 936e9
    on_chip_bytes: int = 28 * 2**20
    cycles_per_group: dict = field(default_factory=lambda: {PAIR_66: 4, PAIR_69: 16, PAIR_99: 16})
    group_size: int = 16
    convert_cycles: int = 0

    def __post_init__(self):
        for name in ("array_dim", "num_arrays", "frequency_hz", "mem_bandwidth_bytes_per_s", "on_chip_bytes", "group_size"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"hardware field {name} must be positive, got {getattr(self, name)}")
        if self.convert_cycles < 0:
            raise ValidationError("convert_cycles must be >= 0")
        if set(self.cycles_per_group) != set(PAIRS) or min(self.cycles_per_group.values()) <= 0:
            raise ValidationError(f"cycles_per_group needs positive entries for {PAIRS}")
        if self.cycles_per_group[PAIR_66] > min(self.cycles_per_group[PAIR_69], self.cycles_per_group[PAIR_99]):
            raise ValidationError("MX6xMX6 group dots cannot be slower than the MX9 variants")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cycles_per_group"] = dict(sorted(self.cycles_per_group.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HardwareConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown hardware fields: {sorted(unknown)}")
        d = dict(d)
        if "cycles_per_group" in d:
            d["cycles_per_group"] = {**cls().cycles_per_group, **d["cycles_per_group"]}
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> HardwareConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def peak_tops(hw: HardwareConfig, pair: str = PAIR_99) -> float:
    """Peak throughput in TOPS, counting a multiply-accumulate as 2 ops."""
    macs_per_cycle = hw.num_arrays * hw.array_dim**2 * hw.group_size / hw.cycles_per_group[pair]
    return macs_per_cycle * 2 * hw.frequency_hz / 1e12


# workloads --------------------------------------------------------------------


@dataclass(frozen=True)
class LinearLayer:
    name: str
    M: int
    K: int
    N: int
    kind: str = "linear"

    def __post_init__(self):
        if min(self.M, self.K, self.N) < 1:
            raise ValidationError(f"layer {self.name}: shapes must be positive")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "M": self.M, "K": self.K, "N": self.N}


@dataclass(frozen=True)
class AttentionLayer:
    name: str
    heads: int
    seq_len: int
    head_dim: int
    kind: str = "attention"

    def __post_init__(self):
        if min(self.heads, self.seq_len, self.head_dim) < 1:
            raise ValidationError(f"layer {self.name}: shapes must be positive")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "heads": self.heads, "seq_len": self.seq_len, "head_dim": self.head_dim}


Layer = LinearLayer | AttentionLayer


@dataclass(frozen=True)
class WorkloadSpec:
    layers: tuple[Layer, ...] = ()
    timesteps: int = 25
    name: str = "workload"

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValidationError("timesteps must be >= 1")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")

    def to_dict(self) -> dict:
        return {"name": self.name, "timesteps": self.timesteps, "layers": [l.to_dict() for l in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        layers = []
        for item in d.get("layers", []):
            item = dict(item)
            kind = item.pop("kind", "linear")
            try:
                if kind == "linear":
                    layers.append(LinearLayer(**item))
                elif kind == "attention":
                    layers.append(AttentionLayer(**item))
                else:
                    raise ValidationError(f"unknown layer kind {kind!r}")
            except TypeError as exc:
                raise ValidationError(f"bad {kind} layer {item}: {exc}")
        return cls(tuple(layers), int(d.get("timesteps", 25)), d.get("name", "workload"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> WorkloadSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


# cycle and byte model ---------------------------------------------------------


def gemm_cycles(M: int, K: int, N: int, regions, hw: HardwareConfig) -> int:
    """Cycles for an (M x K) @ (K x N) GEMM.

    ``regions`` is a sequence of ``(padded_region_K, pair)``; each padded K is a
    multiple of the group size and together they cover K with less than one
    group of padding per region.
    """
    if min(M, K, N) < 1:
        raise ValidationError("GEMM dims must be positive")
    k1 = hw.group_size
    total = 0
    per_tile = 0
    for rk, pair in regions:
        if rk < 0 or rk % k1:
            raise ValidationError(f"region K={rk} is not a multiple of the group size {k1}")
        if pair not in hw.cycles_per_group:
            raise ValidationError(f"unknown precision pair {pair!r}")
        total += rk
        per_tile += rk // k1 * hw.cycles_per_group[pair]
    if not K <= total < K + k1 * max(len(regions), 1):
        raise ValidationError(f"regions cover {total} of K={K}")
    tiles = _ceil(M, hw.array_dim) * _ceil(N, hw.array_dim)
    return _ceil(tiles, hw.num_arrays) * per_tile + 2 * hw.array_dim - 1


def encoded_bytes(fibers: int, length: int, spec: MxFormatSpec) -> int:
    """Packed size of ``fibers`` vectors of ``length`` elements grouped along their length."""
    return fibers * _ceil(length, spec.group_size) * spec.group_bits // 8


@dataclass
class LayerLatency:
    layer: str
    timestep: int
    compute_s: float
    memory_s: float
    cycles: int
    bytes: int
    ops: int
    group_counts: dict[str, int]

    @property
    def latency_s(self) -> float:
        return max(self.compute_s, self.memory_s)

    @property
    def bound(self) -> str:
        return "compute" if self.compute_s >= self.memory_s else "memory"

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "timestep": self.timestep,
            "compute_s": self.compute_s,
            "memory_s": self.memory_s,
            "latency_s": self.latency_s,
            "bound": self.bound,
            "cycles": self.cycles,
            "bytes": self.bytes,
            "ops": self.ops,
            "group_counts": dict(sorted(self.group_counts.items())),
        }


def _linear_cost(layer: LinearLayer, plan: LinearLayerPlan, hw: HardwareConfig):
    if plan.channels != layer.K:
        raise PlanError(f"{layer.name}: plan has {plan.channels} channels, layer K={layer.K}")
    k1 = hw.group_size
    lo, hi = MX6, MX9
    n_hi = plan.mx9_width(k1)
    n_lo = layer.K - n_hi
    regions = []
    counts = dict.fromkeys(PAIRS, 0)
    if n_hi:
        regions.append((_ceil(n_hi, k1) * k1, PAIR_69))
    if n_lo:
        regions.append((_ceil(n_lo, k1) * k1, PAIR_66))
    for rk, pair in regions:
        counts[pair] += rk // k1 * layer.M * layer.N
    cycles = gemm_cycles(layer.M, layer.K, layer.N, regions, hw)
    # X rows split at the MX9/MX6 boundary; W columns split at the same boundary, all MX6
    x_bytes = encoded_bytes(layer.M, n_hi, hi) + encoded_bytes(layer.M, n_lo, lo)
    w_bytes = encoded_bytes(layer.N, n_hi, lo) + encoded_bytes(layer.N, n_lo, lo)
    out_bytes = encoded_bytes(layer.M, layer.N, lo)
    return cycles, x_bytes + w_bytes + out_bytes, 2 * layer.M * layer.K * layer.N, counts


def _attention_cost(layer: AttentionLayer, plan: AttentionPlan, hw: HardwareConfig):
    if plan.heads != layer.heads:
        raise PlanError(f"{layer.name}: plan has {plan.heads} heads, layer has {layer.heads}")
    L, d, k1 = layer.seq_len, layer.head_dim, hw.group_size
    cycles = nbytes = 0
    counts = dict.fromkeys(PAIRS, 0)
    for h in range(layer.heads):
        spec, pair = (MX9, PAIR_99) if plan.head_flags[h] else (MX6, PAIR_66)
        # S = Q K^T: reduce over d
        cycles += gemm_cycles(L, d, L, [(_ceil(d, k1) * k1, pair)], hw)
        nbytes += 2 * encoded_bytes(L, d, spec) + encoded_bytes(L, L, spec)
        # O = P V: reduce over L
        cycles += gemm_cycles(L, L, d, [(_ceil(L, k1) * k1, pair)], hw)
        nbytes += encoded_bytes(L, L, spec) + encoded_bytes(d, L, spec) + encoded_bytes(L, d, spec)
        counts[pair] += _ceil(d, k1) * L * L + _ceil(L, k1) * L * d
    ops = layer.heads * 2 * (2 * L * L * d)
    return cycles, nbytes, ops, counts


def layer_latency(layer: Layer, plan, hw: HardwareConfig, timestep: int = 0) -> LayerLatency:
    if isinstance(layer, LinearLayer):
        if not isinstance(plan, LinearLayerPlan):
            raise PlanError(f"{layer.name}: linear layer needs a LinearLayerPlan")
        cycles, nbytes, ops, counts = _linear_cost(layer, plan, hw)
    else:
        if not isinstance(plan, AttentionPlan):
            raise PlanError(f"{layer.name}: attention layer needs an AttentionPlan")
        cycles, nbytes, ops, counts = _attention_cost(layer, plan, hw)
    cycles += hw.convert_cycles
    return LayerLatency(
        layer.name,
        timestep,
        compute_s=cycles / hw.frequency_hz,
        memory_s=nbytes / hw.mem_bandwidth_bytes_per_s,
        cycles=cycles,
        bytes=nbytes,
        ops=ops,
        group_counts=counts,
    )


@dataclass
class LatencyReport:
    rows: list[LayerLatency] = field(default_factory=list)
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    warnings: list[str] = field(default_factory=list)

    @property
    def total_s(self) -> float:
        return sum(r.latency_s for r in self.rows)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.rows)

    @property
    def total_ops(self) -> int:
        return sum(r.ops for r in self.rows)

    @property
    def achieved_tops(self) -> float:
        return self.total_ops / self.total_s / 1e12 if self.total_s > 0 else 0.0

    def per_layer(self) -> dict[str, dict]:
        """Rows summed over timesteps, keyed by layer name in workload order."""
        out: dict[str, dict] = {}
        for r in self.rows:
            agg = out.setdefault(r.layer, {"compute_s": 0.0, "memory_s": 0.0, "latency_s": 0.0, "bytes": 0, "compute_bound_steps": 0})
            agg["compute_s"] += r.compute_s
            agg["memory_s"] += r.memory_s
            agg["latency_s"] += r.latency_s
            agg["bytes"] += r.bytes
            agg["compute_bound_steps"] += r.bound == "compute"
        return out

    def to_dict(self) -> dict:
        return {
            "total_s": self.total_s,
            "total_bytes": self.total_bytes,
            "total_ops": self.total_ops,
            "achieved_tops": self.achieved_tops,
            "hardware": self.hardware.to_dict(),
            "per_layer": self.per_layer(),
            "rows": [r.to_dict() for r in self.rows],
            "warnings": list(self.warnings),
        }

    def table(self) -> str:
        lines = [f"{'layer':<24}{'compute_s':>14}{'memory_s':>14}{'latency_s':>14}{'share':>8}"]
        total = self.total_s
        for name, agg in self.per_layer().items():
            share = agg["latency_s"] / total if total else 0.0
            lines.append(f"{name:<24}{agg['compute_s']:>14.6e}{agg['memory_s']:>14.6e}{agg['latency_s']:>14.6e}{share:>8.1%}")
        lines.append(f"{'total':<24}{'':>14}{'':>14}{total:>14.6e}{'':>8}")
        lines.append(f"achieved {self.achieved_tops:.2f} TOPS, peak MX9 {peak_tops(self.hardware):.1f} TOPS")
        return "\n".join(lines)


def model_latency(workload: WorkloadSpec, plans: PrecisionPlanSet, hw: HardwareConfig) -> LatencyReport:
    report = LatencyReport(hardware=hw)
    for t in range(workload.timesteps):
        for layer in workload.layers:
            row = layer_latency(layer, plans[(layer.name, t)], hw, t)
            if t == 0 and row.bytes > hw.on_chip_bytes:
                report.warnings.append(
                    f"{layer.name}: working set {row.bytes} B exceeds on-chip capacity {hw.on_chip_bytes} B"
                )
            report.rows.append(row)
    return report


def speedup_report(simulated: dict, baselines: dict[str, float]) -> list[dict]:
    """Baseline seconds / simulated seconds per entry.

    ``simulated`` maps names to a LatencyReport or to seconds.  Baselines are
    user-measured numbers; nothing here models the baseline device.
    """
    rows = []
    for name, sim in simulated.items():
        if name not in baselines:
            raise ValidationError(f"no baseline latency for {name!r}")
        sim_s = sim.total_s if isinstance(sim, LatencyReport) else float(sim)
        if sim_s <= 0:
            raise ValidationError(f"{name}: simulated latency must be positive")
        rows.append({"name": name, "baseline_s": float(baselines[name]), "simulated_s": sim_s, "speedup": baselines[name] / sim_s})
    return rows


def speedup_table(rows: list[dict]) -> str:
    lines = [f"{'name':<24}{'baseline_s':>12}{'simulated_s':>14}{'speedup':>10}"]
    for r in rows:
        lines.append(f"{r['name']:<24}{r['baseline_s']:>12.4f}{r['simulated_s']:>14.6f}{r['speedup']:>9.2f}x")
    return "\n".join(lines)


def fixed_plans(workload: WorkloadSpec, p1: float, p2: float) -> PrecisionPlanSet:
    """Plans with identity channel order, for latency-only studies.

    Latency depends only on the outlier counts, which are fixed by p1/p2 and
    the layer shapes, so calibration data is not needed.
    """
    out = PrecisionPlanSet()
    for layer in workload.layers:
        if isinstance(layer, LinearLayer):
            plan = LinearLayerPlan(tuple(range(layer.K)), percent_count(p1, layer.K), float(p1))
        else:
            h_hi = percent_count(p2, layer.heads)
            plan = AttentionPlan(tuple(h < h_hi for h in range(layer.heads)), float(p2))
        for t in range(workload.timesteps):
            out.plans[(layer.name, t)] = plan
    return out
