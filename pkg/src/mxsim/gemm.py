"""Bit-exact emulation of the accelerator's mixed-precision GEMMs.

Accumulation contract: each group dot product is exact (integer mantissas),
rounded to f32 once, and the per-group results are summed in f32 in
ascending group order.  In a linear layer the MX9 outlier region comes first
and covers whole groups, so no group mixes precisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import MX6, MX9, MxFormatSpec, MxTensor, encode_tensor, rel_frobenius
from .errors import ValidationError
from .planner import AttentionPlan, LinearLayerPlan

PAIR_66 = "mx6xmx6"
PAIR_69 = "mx6xmx9"
PAIR_99 = "mx9xmx9"
PAIRS = (PAIR_66, PAIR_69, PAIR_99)


def pair_name(a: MxFormatSpec, b: MxFormatSpec) -> str:
    lo, hi = sorted((a.name, b.name))
    return f"{lo}x{hi}"


@dataclass
class MixedGemmResult:
    output: np.ndarray
    rel_frobenius: float = 0.0
    max_abs: float = 0.0
    group_counts: dict[str, int] = field(default_factory=lambda: dict.fromkeys(PAIRS, 0))

    @property
    def total_groups(self) -> int:
        return sum(self.group_counts.values())

    def summary(self) -> dict:
        return {
            "shape": list(self.output.shape),
            "rel_frobenius": self.rel_frobenius,
            "max_abs": self.max_abs,
            "group_counts": dict(sorted(self.group_counts.items())),
        }


def _matmul_terms(a: MxTensor, b: MxTensor):
    """Yield per-group f32 partial products for A (M x K, grouped on axis 1) times B (K x N, axis 0)."""
    if a.axis != 1 or b.axis != 0 or len(a.shape) != 2 or len(b.shape) != 2:
        raise ValidationError("expected A grouped along columns and B grouped along rows")
    if a.groups_per_fiber != b.groups_per_fiber or a.spec.group_size != b.spec.group_size:
        raise ValidationError(f"reduction mismatch: {a.shape} x {b.shape}")
    va, ea = a.groups.int_mantissas()  # (M, G, k1), (M, G)
    vb, eb = b.groups.int_mantissas()  # (N, G, k1), (N, G)
    for g in range(a.groups_per_fiber):
        acc = va[:, g, :] @ vb[:, g, :].T
        yield np.ldexp(acc.astype(np.float64), ea[:, g, None] + eb[None, :, g]).astype(np.float32)


def mx_matmul(*pairs: tuple[MxTensor, MxTensor]) -> np.ndarray:
    """Sum of A_r @ B_r over regions r, accumulated group by group in f32."""
    m, n = pairs[0][0].shape[0], pairs[0][1].shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for a, b in pairs:
        if a.shape[0] != m or b.shape[1] != n:
            raise ValidationError("region output shapes differ")
        for term in _matmul_terms(a, b):
            out += term
    return out


def _metrics(result: MixedGemmResult, ref: np.ndarray) -> MixedGemmResult:
    diff = np.abs(result.output.astype(np.float64) - ref.astype(np.float64))
    result.rel_frobenius = rel_frobenius(result.output, ref)
    result.max_abs = float(diff.max()) if diff.size else 0.0
    return result


def linear_regions(x: np.ndarray, w: np.ndarray, plan: LinearLayerPlan, lo: MxFormatSpec = MX6, hi: MxFormatSpec = MX9):
    """Encoded (activation, weight) pairs for the outlier and inlier regions, in order."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValidationError(f"shape mismatch: X {x.shape}, W {w.shape}")
    if plan.channels != x.shape[1]:
        raise ValidationError(f"plan has {plan.channels} channels, layer has K={x.shape[1]}")
    if lo.group_size != hi.group_size:
        raise ValidationError("MX6 and MX9 group sizes must match")
    perm = np.asarray(plan.permutation)
    xp, wp = x[:, perm], w[perm, :]
    split = plan.mx9_width(hi.group_size)
    regions = []
    if split:
        regions.append((encode_tensor(xp[:, :split], 1, hi), encode_tensor(wp[:split], 0, lo)))
    if split < plan.channels:
        regions.append((encode_tensor(xp[:, split:], 1, lo), encode_tensor(wp[split:], 0, lo)))
    return regions


def linear_forward(
    x: np.ndarray,
    w: np.ndarray,
    plan: LinearLayerPlan,
    lo: MxFormatSpec = MX6,
    hi: MxFormatSpec = MX9,
    reference: np.ndarray | None = None,
) -> MixedGemmResult:
    """Y = X @ W with reordered, mixed-precision activations and MX6 weights."""
    regions = linear_regions(x, w, plan, lo, hi)
    result = MixedGemmResult(mx_matmul(*regions))
    m, n = result.output.shape
    for a, b in regions:
        result.group_counts[pair_name(a.spec, b.spec)] += a.groups_per_fiber * m * n
    ref = reference_linear(x, w) if reference is None else reference
    return _metrics(result, ref)


def _softmax_f32(s: np.ndarray) -> np.ndarray:
    s = s.astype(np.float32)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True, dtype=np.float32)).astype(np.float32)


def attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    plan: AttentionPlan,
    lo: MxFormatSpec = MX6,
    hi: MxFormatSpec = MX9,
    reference: np.ndarray | None = None,
) -> MixedGemmResult:
    """Per-head softmax(Q K^T / sqrt(d)) V with each head at its planned precision.

    Q, K, V are (H, L, d).  Scale and softmax run in f32; the softmax output
    is re-quantized at the head's precision before the product with V.
    """
    q, k, v = (np.asarray(t, dtype=np.float32) for t in (q, k, v))
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ValidationError(f"Q, K, V must share an (H, L, d) shape: {q.shape}, {k.shape}, {v.shape}")
    heads, length, d = q.shape
    if d == 0:
        raise ValidationError("head dimension must be positive")
    if plan.heads != heads:
        raise ValidationError(f"plan has {plan.heads} heads, tensors have {heads}")
    scale = np.float32(1.0 / np.sqrt(d))
    out = np.empty_like(q)
    result = MixedGemmResult(out)
    for h in range(heads):
        spec = hi if plan.head_flags[h] else lo
        qe = encode_tensor(q[h], 1, spec)
        ke = encode_tensor(k[h].T, 0, spec)
        scores = mx_matmul((qe, ke)) * scale
        probs = _softmax_f32(scores)
        pe = encode_tensor(probs, 1, spec)
        ve = encode_tensor(v[h], 0, spec)
        out[h] = mx_matmul((pe, ve))
        pair = pair_name(spec, spec)
        result.group_counts[pair] += qe.groups_per_fiber * length * length + pe.groups_per_fiber * length * d
    ref = reference_attention(q, k, v) if reference is None else reference
    return _metrics(result, ref)


# f64 references ---------------------------------------------------------------


def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """f64 product summed over the reduction index in ascending order."""
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for i in range(a.shape[1]):
        acc += a[:, i, None] * b[None, i, :]
    return acc


def reference_linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValidationError(f"shape mismatch: X {x.shape}, W {w.shape}")
    return _ordered_matmul(x, w).astype(np.float32)


def reference_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ValidationError("Q, K, V must share an (H, L, d) shape")
    out = np.empty(q.shape, dtype=np.float64)
    for h in range(q.shape[0]):
        s = _ordered_matmul(q[h], k[h].T) / np.sqrt(q.shape[2])
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        denom = np.zeros((e.shape[0], 1))
        for j in range(e.shape[1]):
            denom[:, 0] += e[:, j]
        out[h] = _ordered_matmul(e / denom, v[h])
    return out.astype(np.float32)


def reference_forward(*tensors: np.ndarray) -> np.ndarray:
    """Dispatch on arity: (X, W) for linear layers, (Q, K, V) for attention."""
    if len(tensors) == 2:
        return reference_linear(*tensors)
    if len(tensors) == 3:
        return reference_attention(*tensors)
    raise ValidationError("reference_forward takes (X, W) or (Q, K, V)")
