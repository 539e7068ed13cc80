"""Grid search over (p1, p2) minimizing ``quality * latency ** alpha``.

Quality is an error measure (lower is better).  The default metric is the
mean relative Frobenius error of emulated layer outputs against the f64
reference over every calibrated (layer, timestep); any callable with the
``QualityMetric`` signature can replace it, e.g. an external FID harness.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

from .accel import AttentionLayer, HardwareConfig, LinearLayer, WorkloadSpec, model_latency
from .errors import InvariantError, ValidationError
from .gemm import attention_forward, linear_forward, reference_attention, reference_linear
from .planner import PER_TIMESTEP, PrecisionPlanSet, build_plan_set
from .tensor_io import CalibrationBundle

QualityMetric = Callable[[CalibrationBundle, WorkloadSpec, PrecisionPlanSet], float]


def objective(quality: float, latency_s: float, alpha: float) -> float:
    if not (math.isfinite(quality) and math.isfinite(latency_s) and math.isfinite(alpha)):
        raise ValidationError("objective inputs must be finite")
    if latency_s <= 0:
        raise ValidationError(f"latency must be positive, got {latency_s}")
    if quality < 0:
        raise ValidationError(f"quality must be >= 0, got {quality}")
    return quality * latency_s**alpha


class MeanRelFrobenius:
    """Mean output rel. Frobenius error over calibrated layers and timesteps.

    Results are memoized per (layer, timestep, plan), so repeated calls over
    a grid only emulate each distinct plan once.
    """

    name = "mean_rel_frobenius"

    def __init__(self):
        self._refs: dict = {}
        self._errors: dict = {}

    def _timesteps(self, bundle: CalibrationBundle, layer, workload: WorkloadSpec) -> list[int]:
        role = "query" if isinstance(layer, AttentionLayer) else "activation"
        return [t for t in bundle.timesteps(layer.name, role) if t < workload.timesteps]

    def layer_error(self, bundle: CalibrationBundle, layer, t: int, plan) -> float:
        key = (layer.name, t, plan)
        if key in self._errors:
            return self._errors[key]
        if isinstance(layer, LinearLayer):
            x = bundle.load(layer.name, t, "activation")
            w = bundle.load_weight(layer.name, t)
            ref = self._refs.get((layer.name, t))
            if ref is None:
                ref = self._refs[(layer.name, t)] = reference_linear(x, w)
            err = linear_forward(x, w, plan, reference=ref).rel_frobenius
        else:
            q, k, v = (bundle.load(layer.name, t, r) for r in ("query", "key", "value"))
            ref = self._refs.get((layer.name, t))
            if ref is None:
                ref = self._refs[(layer.name, t)] = reference_attention(q, k, v)
            err = attention_forward(q, k, v, plan, reference=ref).rel_frobenius
        self._errors[key] = err
        return err

    def __call__(self, bundle: CalibrationBundle, workload: WorkloadSpec, plans: PrecisionPlanSet) -> float:
        errs = []
        for layer in workload.layers:
            for t in self._timesteps(bundle, layer, workload):
                errs.append(self.layer_error(bundle, layer, t, plans[(layer.name, t)]))
        if not errs:
            raise ValidationError("bundle has no calibration data for any workload layer")
        return sum(errs) / len(errs)


METRICS: dict[str, Callable[[], QualityMetric]] = {MeanRelFrobenius.name: MeanRelFrobenius}


@dataclass(frozen=True)
class SweepConfig:
    p1_grid: tuple[float, ...] = (0, 1, 2, 5, 10, 20)
    p2_grid: tuple[float, ...] = (0, 10, 20, 30)
    alpha: float = 0.15
    metric: str = MeanRelFrobenius.name
    mode: str = PER_TIMESTEP

    def __post_init__(self):
        if not self.p1_grid or not self.p2_grid:
            raise ValidationError("sweep grids must be non-empty")
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValidationError(f"alpha must be finite and >= 0, got {self.alpha}")
        for p in (*self.p1_grid, *self.p2_grid):
            if not 0 <= p <= 100:
                raise ValidationError(f"grid value {p} outside [0, 100]")
        if self.metric not in METRICS:
            raise ValidationError(f"unknown quality metric {self.metric!r}")

    def to_dict(self) -> dict:
        return {
            "p1_grid": list(self.p1_grid),
            "p2_grid": list(self.p2_grid),
            "alpha": self.alpha,
            "metric": self.metric,
            "mode": self.mode,
        }


@dataclass
class SweepPoint:
    p1: float
    p2: float
    quality: float
    latency_s: float
    objective: float
    pareto: bool = False

    def to_dict(self) -> dict:
        return {
            "p1": self.p1,
            "p2": self.p2,
            "quality": self.quality,
            "latency_s": self.latency_s,
            "objective": self.objective,
            "pareto": self.pareto,
        }


def _rank_key(p: SweepPoint):
    return (p.objective, p.latency_s, p.p1, p.p2)


def choose(points: list[SweepPoint]) -> SweepPoint:
    """argmin objective; ties by lower latency, then lower p1, then lower p2."""
    if not points:
        raise ValidationError("no sweep points")
    return min(points, key=_rank_key)


def mark_pareto(points: list[SweepPoint]) -> None:
    for p in points:
        p.pareto = not any(
            o.quality <= p.quality and o.latency_s <= p.latency_s and (o.quality < p.quality or o.latency_s < p.latency_s)
            for o in points
        )


@dataclass
class SweepResult:
    config: SweepConfig
    points: list[SweepPoint] = field(default_factory=list)
    chosen: tuple[float, float] | None = None

    def with_alpha(self, alpha: float) -> SweepResult:
        """Re-rank the same (quality, latency) table under a different alpha."""
        cfg = SweepConfig(self.config.p1_grid, self.config.p2_grid, alpha, self.config.metric, self.config.mode)
        pts = [SweepPoint(p.p1, p.p2, p.quality, p.latency_s, objective(p.quality, p.latency_s, alpha), p.pareto) for p in self.points]
        best = choose(pts)
        return SweepResult(cfg, pts, (best.p1, best.p2))

    def chosen_point(self) -> SweepPoint:
        for p in self.points:
            if (p.p1, p.p2) == self.chosen:
                return p
        raise InvariantError(f"chosen config {self.chosen} is not in the table")

    def verify(self) -> None:
        """Re-derive the argmin from the emitted table; raise on mismatch."""
        for p in self.points:
            if p.objective != objective(p.quality, p.latency_s, self.config.alpha):
                raise InvariantError(f"objective column disagrees at p1={p.p1}, p2={p.p2}")
        best = min(self.points, key=_rank_key)
        if (best.p1, best.p2) != tuple(self.chosen):
            raise InvariantError(f"chosen {self.chosen} but table argmin is {(best.p1, best.p2)}")

    def to_dict(self) -> dict:
        return {
            "provenance": {
                **self.config.to_dict(),
                "quality_note": "tensor-level reconstruction error stands in for image FID",
            },
            "points": [p.to_dict() for p in self.points],
            "chosen": {"p1": self.chosen[0], "p2": self.chosen[1]},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> SweepResult:
        prov = d["provenance"]
        cfg = SweepConfig(tuple(prov["p1_grid"]), tuple(prov["p2_grid"]), prov["alpha"], prov["metric"], prov.get("mode", PER_TIMESTEP))
        pts = [SweepPoint(**p) for p in d["points"]]
        return cls(cfg, pts, (d["chosen"]["p1"], d["chosen"]["p2"]))

    def table(self) -> str:
        lines = [
            f"alpha={self.config.alpha}  metric={self.config.metric}",
            f"{'p1':>6}{'p2':>6}{'quality':>14}{'latency_s':>14}{'objective':>14}  pareto",
        ]
        for p in self.points:
            mark = " <- chosen" if (p.p1, p.p2) == tuple(self.chosen) else ""
            lines.append(
                f"{p.p1:>6g}{p.p2:>6g}{p.quality:>14.6e}{p.latency_s:>14.6e}{p.objective:>14.6e}  {'*' if p.pareto else ' '}{mark}"
            )
        return "\n".join(lines)


def evaluate_config(
    p1: float,
    p2: float,
    bundle: CalibrationBundle,
    workload: WorkloadSpec,
    hw: HardwareConfig,
    metric: QualityMetric | None = None,
    mode: str = PER_TIMESTEP,
) -> tuple[float, float]:
    """(quality, latency_s) of one grid point."""
    plans = build_plan_set(bundle, workload.layers, workload.timesteps, p1, p2, mode)
    metric = metric or MeanRelFrobenius()
    return metric(bundle, workload, plans), model_latency(workload, plans, hw).total_s


def run_sweep(
    config: SweepConfig,
    bundle: CalibrationBundle,
    workload: WorkloadSpec,
    hw: HardwareConfig,
    metric: QualityMetric | None = None,
) -> SweepResult:
    metric = metric or METRICS[config.metric]()
    points = []
    for p1 in sorted(set(config.p1_grid)):
        for p2 in sorted(set(config.p2_grid)):
            quality, latency = evaluate_config(p1, p2, bundle, workload, hw, metric, config.mode)
            points.append(SweepPoint(p1, p2, quality, latency, objective(quality, latency, config.alpha)))
    mark_pareto(points)
    best = choose(points)
    return SweepResult(config, points, (best.p1, best.p2))
