"""Independent reference paths used by several test modules."""

import numpy as np

from mxsim.codec import MX6, MX9, quantize


def grouped_float_matmul(a: np.ndarray, b: np.ndarray, k1: int = 16) -> np.ndarray:
    """Decoded operands: f64 dot within each k1 group, f32 sum across groups in order."""
    k = a.shape[1]
    pad = -k % k1
    a = np.pad(a.astype(np.float64), ((0, 0), (0, pad)))
    b = np.pad(b.astype(np.float64), ((0, pad), (0, 0)))
    out = np.zeros((a.shape[0], b.shape[1]), np.float32)
    for g in range(0, k + pad, k1):
        out += (a[:, g : g + k1] @ b[g : g + k1]).astype(np.float32)
    return out


def _pad_groups(a, axis, k1=16):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (0, -a.shape[axis] % k1)
    return np.pad(a, pad)


def linear_oracle(x, w, plan, lo=MX6, hi=MX9):
    """Decode each precision region, pad it to whole groups, then run one grouped accumulation."""
    perm = list(plan.permutation)
    xp, wp = x[:, perm], w[perm]
    split = plan.mx9_width(hi.group_size)
    xs, ws = [], []
    for a, b, spec in ((xp[:, :split], wp[:split], hi), (xp[:, split:], wp[split:], lo)):
        if a.shape[1]:
            xs.append(_pad_groups(quantize(a, 1, spec), 1))
            ws.append(_pad_groups(quantize(b, 0, lo), 0))
    return grouped_float_matmul(np.concatenate(xs, 1), np.concatenate(ws, 0))


def naive_matmul(x, w):
    m, k = x.shape
    n = w.shape[1]
    out = np.zeros((m, n), np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(x[i, p]) * float(w[p, j])
            out[i, j] = s
    return out.astype(np.float32)
