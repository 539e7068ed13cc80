"""Offline precision planning from calibration statistics.

Linear layers: channels are sorted by descending mean |activation| and the
leading ``round(p1% * C)`` channels are quantized at MX9, the rest at MX6.
Attention layers: the ``round(p2% * H)`` heads with the largest mean |Q, K, V|
are computed at MX9.  Counts use round-half-to-even on exact rationals.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BundleError, PlanError, ValidationError
from .tensor_io import CalibrationBundle

PER_TIMESTEP = "per-timestep"
AVERAGED = "averaged"
MODES = (PER_TIMESTEP, AVERAGED)


def percent_count(p: float, n: int) -> int:
    """round_half_even(p / 100 * n), computed exactly."""
    if not 0 <= p <= 100:
        raise ValidationError(f"percentage must be in [0, 100], got {p}")
    return round(Fraction(p) * n / 100)


def top_indices(stats: Sequence[float], k: int | None = None) -> np.ndarray:
    """Indices sorted by value descending, ties by lower index."""
    order = np.argsort(-np.asarray(stats, dtype=np.float64), kind="stable")
    return order if k is None else order[:k]


@dataclass(frozen=True)
class ChannelStats:
    layer: str
    timestep: int | None  # None when averaged over timesteps
    values: np.ndarray

    @property
    def count(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class LinearLayerPlan:
    permutation: tuple[int, ...]
    n_hi: int
    p1: float

    def __post_init__(self):
        c = len(self.permutation)
        if sorted(self.permutation) != list(range(c)):
            raise PlanError("permutation is not a bijection on 0..C-1")
        if not 0 <= self.n_hi <= c:
            raise PlanError(f"n_hi={self.n_hi} outside [0, {c}]")

    @property
    def channels(self) -> int:
        return len(self.permutation)

    def precision_map(self) -> list[str]:
        """Precision of each permuted position."""
        return ["mx9" if i < self.n_hi else "mx6" for i in range(self.channels)]

    def outlier_channels(self) -> list[int]:
        return list(self.permutation[: self.n_hi])

    def mx9_width(self, group_size: int) -> int:
        """Permuted channels computed at MX9: n_hi rounded up to whole groups.

        The boundary group is filled with the next-ranked channels rather than
        zeros, so no group mixes precisions and the total group count does not
        depend on n_hi.
        """
        return min(-(-self.n_hi // group_size) * group_size, self.channels)

    def to_dict(self) -> dict:
        return {"kind": "linear", "p1": self.p1, "n_hi": self.n_hi, "permutation": list(self.permutation)}


@dataclass(frozen=True)
class AttentionPlan:
    head_flags: tuple[bool, ...]  # True = MX9
    p2: float

    @property
    def heads(self) -> int:
        return len(self.head_flags)

    @property
    def h_hi(self) -> int:
        return sum(self.head_flags)

    def precision(self, head: int) -> str:
        return "mx9" if self.head_flags[head] else "mx6"

    def to_dict(self) -> dict:
        return {"kind": "attention", "p2": self.p2, "h_hi": self.h_hi, "head_flags": [int(f) for f in self.head_flags]}


Plan = LinearLayerPlan | AttentionPlan


def uniform_linear_plan(channels: int, precision: str = "mx6") -> LinearLayerPlan:
    """Identity ordering with every channel at one precision (no reordering)."""
    n_hi = channels if precision == "mx9" else 0
    return LinearLayerPlan(tuple(range(channels)), n_hi, 100.0 if n_hi else 0.0)


def uniform_attention_plan(heads: int, precision: str = "mx6") -> AttentionPlan:
    flag = precision == "mx9"
    return AttentionPlan((flag,) * heads, 100.0 if flag else 0.0)


def _mean_abs(t: np.ndarray, channel_axis: int) -> tuple[np.ndarray, int]:
    moved = np.moveaxis(np.abs(t.astype(np.float64)), channel_axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    return flat.sum(axis=0), flat.shape[0]


def channel_magnitudes(
    bundle: CalibrationBundle,
    layer: str,
    timestep: int | None = None,
    channel_axis: int = -1,
) -> ChannelStats:
    """Per-channel mean |x| of a layer's activations.

    ``timestep=None`` pools every calibrated timestep (averaged mode).
    """
    steps = bundle.timesteps(layer, "activation")
    if timestep is not None:
        steps = [t for t in steps if t == timestep]
    if not steps:
        raise BundleError(f"no activation tensors for {layer!r} at timestep {timestep}", "missing_entry")
    total, count = None, 0
    for t in steps:
        s, n = _mean_abs(bundle.load(layer, t, "activation"), channel_axis)
        if total is not None and len(s) != len(total):
            raise BundleError(f"{layer!r}: inconsistent channel counts {len(total)} vs {len(s)}", "inconsistent_channels")
        total = s if total is None else total + s
        count += n
    return ChannelStats(layer, timestep, total / count)


def head_magnitudes(bundle: CalibrationBundle, layer: str, timestep: int | None = None) -> ChannelStats:
    """Per-head mean |x| pooled over the Q, K and V tensors, each shaped (H, L, d)."""
    steps = bundle.timesteps(layer, "query")
    if timestep is not None:
        steps = [t for t in steps if t == timestep]
    if not steps:
        raise BundleError(f"no attention tensors for {layer!r} at timestep {timestep}", "missing_entry")
    total, count = None, 0
    for t in steps:
        for role in ("query", "key", "value"):
            s, n = _mean_abs(bundle.load(layer, t, role), 0)
            if total is not None and len(s) != len(total):
                raise BundleError(f"{layer!r}: inconsistent head counts", "inconsistent_channels")
            total = s if total is None else total + s
            count += n
    return ChannelStats(layer, timestep, total / count)


def build_linear_plan(stats: ChannelStats | Sequence[float], p1: float) -> LinearLayerPlan:
    values = stats.values if isinstance(stats, ChannelStats) else np.asarray(stats, dtype=np.float64)
    if len(values) < 1:
        raise ValidationError("need at least one channel")
    n_hi = percent_count(p1, len(values))
    return LinearLayerPlan(tuple(int(i) for i in top_indices(values)), n_hi, float(p1))


def build_attention_plan(head_stats: ChannelStats | Sequence[float], p2: float) -> AttentionPlan:
    values = head_stats.values if isinstance(head_stats, ChannelStats) else np.asarray(head_stats, dtype=np.float64)
    if len(values) < 1:
        raise ValidationError("need at least one head")
    h_hi = percent_count(p2, len(values))
    flags = [False] * len(values)
    for h in top_indices(values, h_hi):
        flags[int(h)] = True
    return AttentionPlan(tuple(flags), float(p2))


def permute_weight_channels(w: np.ndarray, plan: LinearLayerPlan, axis: int = 0) -> np.ndarray:
    """Reorder the reduction axis of ``w`` to follow the activation order."""
    w = np.asarray(w)
    if w.shape[axis] != plan.channels:
        raise ValidationError(f"weight has {w.shape[axis]} channels, plan expects {plan.channels}")
    return np.take(w, np.asarray(plan.permutation), axis=axis)


def consistency_score(stats_a, stats_b, k: int) -> float:
    """Jaccard similarity of the top-k index sets."""
    a = stats_a.values if isinstance(stats_a, ChannelStats) else np.asarray(stats_a)
    b = stats_b.values if isinstance(stats_b, ChannelStats) else np.asarray(stats_b)
    if len(a) != len(b):
        raise ValidationError(f"length mismatch: {len(a)} vs {len(b)}")
    if not 1 <= k <= len(a):
        raise ValidationError(f"k={k} outside [1, {len(a)}]")
    sa, sb = set(top_indices(a, k).tolist()), set(top_indices(b, k).tolist())
    return len(sa & sb) / len(sa | sb)


@dataclass
class PrecisionPlanSet:
    plans: dict[tuple[str, int], Plan] = field(default_factory=dict)
    mode: str = PER_TIMESTEP

    def __getitem__(self, key: tuple[str, int]) -> Plan:
        try:
            return self.plans[key]
        except KeyError:
            raise PlanError(f"no plan for layer {key[0]!r} at timestep {key[1]}", "missing_plan")

    def __contains__(self, key) -> bool:
        return key in self.plans

    def __len__(self) -> int:
        return len(self.plans)

    def reorder_table(self) -> dict[tuple[str, int], tuple[int, ...]]:
        """Channel order per (layer, timestep), as held by the reordering controller."""
        return {k: p.permutation for k, p in sorted(self.plans.items()) if isinstance(p, LinearLayerPlan)}

    def to_json(self) -> str:
        entries = []
        for (layer, t), plan in sorted(self.plans.items()):
            entries.append({"layer": layer, "timestep": t, **plan.to_dict()})
        return json.dumps({"mode": self.mode, "entries": entries}, indent=2) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> PrecisionPlanSet:
        doc = json.loads(text)
        out = cls(mode=doc.get("mode", PER_TIMESTEP))
        for e in doc["entries"]:
            key = (e["layer"], int(e["timestep"]))
            if e["kind"] == "linear":
                out.plans[key] = LinearLayerPlan(tuple(e["permutation"]), int(e["n_hi"]), float(e["p1"]))
            elif e["kind"] == "attention":
                out.plans[key] = AttentionPlan(tuple(bool(f) for f in e["head_flags"]), float(e["p2"]))
            else:
                raise PlanError(f"unknown plan kind {e['kind']!r}")
        return out

    @classmethod
    def load(cls, path: str | os.PathLike) -> PrecisionPlanSet:
        return cls.from_json(Path(path).read_text())


def build_plan_set(
    bundle: CalibrationBundle,
    layers: Iterable,
    timesteps: int,
    p1: float,
    p2: float,
    mode: str = PER_TIMESTEP,
) -> PrecisionPlanSet:
    """Plans for every (layer, timestep) of a workload.

    ``layers`` are objects with ``name`` and ``kind`` attributes (see ``workload``).
    In averaged mode one plan per layer is computed from pooled statistics and
    repeated for every timestep.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown planning mode {mode!r}")
    out = PrecisionPlanSet(mode=mode)
    for layer in layers:
        stat_fn = head_magnitudes if layer.kind == "attention" else channel_magnitudes
        build = build_attention_plan if layer.kind == "attention" else build_linear_plan
        p = p2 if layer.kind == "attention" else p1
        shared = build(stat_fn(bundle, layer.name, None), p) if mode == AVERAGED else None
        for t in range(timesteps):
            out.plans[(layer.name, t)] = shared if shared is not None else build(stat_fn(bundle, layer.name, t), p)
    return out
