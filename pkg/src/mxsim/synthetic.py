"""Seeded synthetic workloads and calibration bundles with planted outliers.

Linear-layer activations get a fixed set of outlier channels (the same
channels at every timestep and sample, scaled by ``outlier_scale``);
attention layers get a fixed set of large-magnitude heads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accel import AttentionLayer, LinearLayer, WorkloadSpec
from .tensor_io import BundleEntry, load_bundle, write_manifest, write_tensor


def transformer_block_workload(
    hidden: int = 64,
    tokens: int = 32,
    heads: int = 4,
    mlp_ratio: int = 4,
    depth: int = 1,
    timesteps: int = 4,
    name: str = "synthetic-dit",
) -> WorkloadSpec:
    """Layers of ``depth`` transformer blocks at batch size 1."""
    if hidden % heads:
        raise ValueError("hidden must be divisible by heads")
    layers = []
    for b in range(depth):
        p = f"blk{b}"
        layers += [
            LinearLayer(f"{p}.qkv", tokens, hidden, 3 * hidden),
            AttentionLayer(f"{p}.attn", heads, tokens, hidden // heads),
            LinearLayer(f"{p}.proj", tokens, hidden, hidden),
            LinearLayer(f"{p}.fc1", tokens, hidden, mlp_ratio * hidden),
            LinearLayer(f"{p}.fc2", tokens, mlp_ratio * hidden, hidden),
        ]
    return WorkloadSpec(tuple(layers), timesteps, name)


@dataclass(frozen=True)
class OutlierProfile:
    channel_fraction: float = 0.02
    outlier_scale: float = 64.0
    head_fraction: float = 0.25
    head_scale: float = 16.0
    # "mx6" draws integer weights in [-15, 15], which MX6 stores exactly under any grouping
    weights: str = "normal"


def planted_channels(k: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = max(1, round(fraction * k)) if fraction > 0 else 0
    return np.sort(rng.choice(k, size=n, replace=False)) if n else np.array([], dtype=int)


def synthetic_tensors(workload: WorkloadSpec, seed: int = 0, profile: OutlierProfile = OutlierProfile()):
    """Yield (layer, timestep, role, array) for every calibration tensor of the workload."""
    rng = np.random.default_rng(seed)
    for layer in workload.layers:
        if isinstance(layer, LinearLayer):
            hot = planted_channels(layer.K, profile.channel_fraction, rng)
            if profile.weights == "mx6":
                w = rng.integers(-15, 16, size=(layer.K, layer.N)).astype(np.float32)
            else:
                w = (rng.standard_normal((layer.K, layer.N)) / np.sqrt(layer.K)).astype(np.float32)
            yield layer.name, 0, "weight", w
            for t in range(workload.timesteps):
                x = rng.standard_normal((layer.M, layer.K))
                x[:, hot] *= profile.outlier_scale
                yield layer.name, t, "activation", x.astype(np.float32)
        else:
            hot = planted_channels(layer.heads, profile.head_fraction, rng)
            for t in range(workload.timesteps):
                for role in ("query", "key", "value"):
                    x = rng.standard_normal((layer.heads, layer.seq_len, layer.head_dim))
                    x[hot] *= profile.head_scale
                    yield layer.name, t, role, x.astype(np.float32)


def write_synthetic_bundle(
    root: str | os.PathLike,
    workload: WorkloadSpec,
    seed: int = 0,
    profile: OutlierProfile = OutlierProfile(),
):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer, t, role, arr in synthetic_tensors(workload, seed, profile):
        rel = f"{layer}.t{t:03d}.{role}.mxt"
        write_tensor(arr, root / rel)
        entries.append(BundleEntry(layer, t, role, rel))
    write_manifest(root, entries)
    return load_bundle(root)
