"""MX6 / MX9 encode, decode and exact group dot products.

A group of ``k1`` values shares an 8-bit exponent (bias 127).  Every run of
``k2`` consecutive elements shares one extra bit ``b`` that shifts the
subgroup one binade down.  Each element stores a sign bit and an ``m``-bit
unsigned magnitude, so element ``i`` in subgroup ``j`` decodes to::

    (-1)**s_i * mag_i * 2**(E - 127 - b_j - (m - 1))

Rounding is round-half-to-even with a saturating clamp at ``2**m - 1``.  A
subgroup gets ``b = 1`` when all of its elements, rounded on the fine grid,
stay below half the shared binade; this keeps encode(decode(encode(x)))
bit-identical to encode(x).

Groups whose largest magnitude lies below ``2**-127`` are encoded at the
minimum exponent (E = 0); elements smaller than the resulting step flush
to zero.  A group whose magnitudes all round to zero is stored as the
canonical zero group (E = 0, all b = 1, all signs and magnitudes 0).

All array routines work on a trailing group axis of length ``k1`` so that
millions of groups can be processed at once.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import TensorFormatError, ValidationError

EXP_BIAS = 127
MIN_UNBIASED_EXP = -EXP_BIAS


@dataclass(frozen=True)
class MxFormatSpec:
    group_size: int = 16
    subgroup_size: int = 2
    mantissa_bits: int = 4
    shared_exponent_bits: int = 8
    subgroup_exponent_bits: int = 1

    def __post_init__(self):
        if self.group_size < 1 or self.subgroup_size < 1:
            raise ValidationError("group and subgroup sizes must be positive")
        if self.group_size % self.subgroup_size:
            raise ValidationError(f"subgroup size {self.subgroup_size} does not divide group size {self.group_size}")
        if not 1 <= self.mantissa_bits <= 15:
            raise ValidationError(f"mantissa_bits must be in 1..15, got {self.mantissa_bits}")
        if self.shared_exponent_bits != 8 or self.subgroup_exponent_bits != 1:
            raise ValidationError("only an 8-bit shared exponent with 1-bit subgroup exponents is supported")

    @property
    def name(self) -> str:
        return {4: "mx6", 7: "mx9"}.get(self.mantissa_bits, f"mx_m{self.mantissa_bits}")

    @property
    def n_subgroups(self) -> int:
        return self.group_size // self.subgroup_size

    @property
    def group_bits(self) -> int:
        k1, m = self.group_size, self.mantissa_bits
        return k1 * (1 + m) + self.shared_exponent_bits + self.n_subgroups * self.subgroup_exponent_bits

    @property
    def bits_per_element(self) -> Fraction:
        return Fraction(self.group_bits, self.group_size)

    @property
    def group_bytes(self) -> int:
        """Bytes of one group in the packed serialization (each group byte-aligned)."""
        return 1 + -(-self.n_subgroups // 8) + -(-self.group_size * (1 + self.mantissa_bits) // 8)

    @property
    def max_mag(self) -> int:
        return (1 << self.mantissa_bits) - 1


MX6 = MxFormatSpec(mantissa_bits=4)
MX9 = MxFormatSpec(mantissa_bits=7)
FORMATS = {"mx6": MX6, "mx9": MX9}


def format_by_name(name: str) -> MxFormatSpec:
    try:
        return FORMATS[name.lower()]
    except KeyError:
        raise ValidationError(f"unknown format {name!r}; expected one of {sorted(FORMATS)}")


@dataclass(frozen=True)
class EncodedGroups:
    """Struct-of-arrays view of many groups; leading dims are arbitrary."""

    spec: MxFormatSpec
    exponent: np.ndarray  # uint8 (...)
    subgroup_bits: np.ndarray  # uint8 (..., k1/k2), values 0/1
    signs: np.ndarray  # uint8 (..., k1), values 0/1
    mags: np.ndarray  # uint16 (..., k1)
    saturated: np.ndarray  # bool (..., k1); encode-time bookkeeping only

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.exponent.shape

    def element_shift(self) -> np.ndarray:
        """Per-element b_j, broadcast from subgroups to elements."""
        return np.repeat(self.subgroup_bits, self.spec.subgroup_size, axis=-1)

    def int_mantissas(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed integers ``v`` and exponents ``e`` with value_i == v_i * 2**e exactly.

        ``v_i = ±mag_i << (1 - b_j)`` so that all elements of a group share ``e``.
        """
        v = self.mags.astype(np.int64) << (1 - self.element_shift().astype(np.int64))
        v = np.where(self.signs.astype(bool), -v, v)
        e = self.exponent.astype(np.int64) - EXP_BIAS - self.spec.mantissa_bits
        return v, e


def encode_groups(values: np.ndarray, spec: MxFormatSpec) -> EncodedGroups:
    """Encode an array whose last axis has length ``k1``."""
    x = np.asarray(values, dtype=np.float32)
    k1, k2, m = spec.group_size, spec.subgroup_size, spec.mantissa_bits
    if x.ndim == 0 or x.shape[-1] != k1:
        raise ValidationError(f"expected trailing axis of length {k1}, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError("cannot encode NaN or Inf")

    a = np.abs(x.astype(np.float64))
    amax = a.max(axis=-1)
    _, e = np.frexp(amax)
    eg = np.maximum(e.astype(np.int64) - 1, MIN_UNBIASED_EXP)

    fine = np.rint(a / np.ldexp(1.0, eg - m)[..., None])
    below_half = fine.reshape(*fine.shape[:-1], k1 // k2, k2) < (1 << (m - 1))
    b = below_half.all(axis=-1)
    b_elem = np.repeat(b, k2, axis=-1)

    step = np.ldexp(1.0, eg[..., None] - b_elem - (m - 1))
    q = np.rint(a / step)
    saturated = q > spec.max_mag
    mags = np.minimum(q, spec.max_mag).astype(np.uint16)
    signs = (np.signbit(x) & (mags > 0)).astype(np.uint8)

    zero = ~mags.any(axis=-1)
    exponent = np.where(zero, 0, eg + EXP_BIAS).astype(np.uint8)
    b = np.where(zero[..., None], True, b)
    return EncodedGroups(spec, exponent, b.astype(np.uint8), signs, mags, saturated)


def decode_groups(g: EncodedGroups) -> np.ndarray:
    m = g.spec.mantissa_bits
    eg = g.exponent.astype(np.int64)[..., None] - EXP_BIAS
    step_exp = eg - g.element_shift().astype(np.int64) - (m - 1)
    mag = np.ldexp(g.mags.astype(np.float64), step_exp)
    return np.where(g.signs.astype(bool), -mag, mag).astype(np.float32)


def dot_groups(a: EncodedGroups, b: EncodedGroups) -> np.ndarray:
    """Elementwise-batched exact group dot; one f32 rounding per group."""
    if a.spec.group_size != b.spec.group_size:
        raise ValidationError(f"group size mismatch: {a.spec.group_size} vs {b.spec.group_size}")
    va, ea = a.int_mantissas()
    vb, eb = b.int_mantissas()
    acc = (va * vb).sum(axis=-1)
    return np.ldexp(acc.astype(np.float64), ea + eb).astype(np.float32)


# single-group API -----------------------------------------------------------


@dataclass(frozen=True)
class MxGroup:
    spec: MxFormatSpec
    exponent: int
    subgroup_bits: tuple[int, ...]
    signs: tuple[int, ...]
    mags: tuple[int, ...]
    saturation_count: int = 0

    @property
    def unbiased_exponent(self) -> int:
        return self.exponent - EXP_BIAS

    def is_zero(self) -> bool:
        return not any(self.mags)

    def _arrays(self) -> EncodedGroups:
        return EncodedGroups(
            self.spec,
            np.array(self.exponent, dtype=np.uint8),
            np.array(self.subgroup_bits, dtype=np.uint8),
            np.array(self.signs, dtype=np.uint8),
            np.array(self.mags, dtype=np.uint16),
            np.zeros(self.spec.group_size, dtype=bool),
        )

    def to_bytes(self) -> bytes:
        return pack_groups(self._arrays())

    @classmethod
    def from_bytes(cls, buf: bytes, spec: MxFormatSpec) -> MxGroup:
        return group_at(unpack_groups(buf, spec, 1), 0)


def group_at(g: EncodedGroups, index) -> MxGroup:
    return MxGroup(
        g.spec,
        int(g.exponent[index]),
        tuple(int(v) for v in g.subgroup_bits[index]),
        tuple(int(v) for v in g.signs[index]),
        tuple(int(v) for v in g.mags[index]),
        int(g.saturated[index].sum()),
    )


def encode_group(values, spec: MxFormatSpec = MX6) -> MxGroup:
    x = np.asarray(values, dtype=np.float32)
    if x.shape != (spec.group_size,):
        raise ValidationError(f"a group needs exactly {spec.group_size} values, got shape {x.shape}")
    return group_at(encode_groups(x[None, :], spec), 0)


def decode_group(g: MxGroup) -> np.ndarray:
    return decode_groups(g._arrays())


def group_dot(a: MxGroup, b: MxGroup) -> np.float32:
    return np.float32(dot_groups(a._arrays(), b._arrays()))


# packed serialization -------------------------------------------------------


def pack_groups(g: EncodedGroups) -> bytes:
    """Serialize groups in C order.

    Per group: exponent u8 | subgroup bits (LSB first, ceil(k1/k2 / 8) bytes) |
    k1 elements LSB-first as (sign bit, then m magnitude bits LSB first),
    padded to a byte boundary.
    """
    spec = g.spec
    k1, m = spec.group_size, spec.mantissa_bits
    n = int(np.prod(g.batch_shape, dtype=np.int64))
    exp = g.exponent.reshape(n, 1)
    sub = np.packbits(g.subgroup_bits.reshape(n, -1).astype(np.uint8), axis=-1, bitorder="little")
    mags = g.mags.reshape(n, k1).astype(np.uint32)
    mag_bits = (mags[..., None] >> np.arange(m, dtype=np.uint32)) & 1
    elem_bits = np.concatenate([g.signs.reshape(n, k1, 1).astype(np.uint32), mag_bits], axis=-1)
    payload = np.packbits(elem_bits.reshape(n, -1).astype(np.uint8), axis=-1, bitorder="little")
    return np.concatenate([exp, sub, payload], axis=-1).astype(np.uint8).tobytes()


def unpack_groups(buf: bytes, spec: MxFormatSpec, count: int) -> EncodedGroups:
    k1, m = spec.group_size, spec.mantissa_bits
    gb = spec.group_bytes
    if len(buf) != gb * count:
        raise TensorFormatError(f"expected {gb * count} bytes for {count} groups, got {len(buf)}", "truncated_payload", "groups")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(count, gb)
    nsub_bytes = -(-spec.n_subgroups // 8)
    exponent = raw[:, 0].copy()
    sub = np.unpackbits(raw[:, 1 : 1 + nsub_bytes], axis=-1, bitorder="little")[:, : spec.n_subgroups]
    bits = np.unpackbits(raw[:, 1 + nsub_bytes :], axis=-1, bitorder="little")[:, : k1 * (1 + m)]
    bits = bits.reshape(count, k1, 1 + m).astype(np.uint16)
    signs = bits[..., 0].astype(np.uint8)
    mags = (bits[..., 1:] << np.arange(m, dtype=np.uint16)).sum(axis=-1).astype(np.uint16)
    return EncodedGroups(spec, exponent, sub.astype(np.uint8), signs, mags, np.zeros((count, k1), dtype=bool))


# tensors --------------------------------------------------------------------


@dataclass(frozen=True)
class MxTensor:
    """A tensor grouped along ``axis``; group arrays are laid out as (*other dims, n_groups, k1)."""

    spec: MxFormatSpec
    shape: tuple[int, ...]
    axis: int
    groups: EncodedGroups

    @property
    def reduction_len(self) -> int:
        return self.shape[self.axis]

    @property
    def groups_per_fiber(self) -> int:
        return self.groups.batch_shape[-1]

    @property
    def group_count(self) -> int:
        return int(np.prod(self.groups.batch_shape, dtype=np.int64))

    @property
    def saturation_count(self) -> int:
        return int(self.groups.saturated.sum())

    @property
    def nbytes(self) -> int:
        """Exact packed size in bits / 8 (from the field widths, padding included)."""
        return self.group_count * self.spec.group_bits // 8

    def group(self, *index) -> MxGroup:
        return group_at(self.groups, index)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValidationError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def encode_tensor(t: np.ndarray, axis: int, spec: MxFormatSpec) -> MxTensor:
    t = np.asarray(t, dtype=np.float32)
    if t.ndim == 0:
        raise ValidationError("cannot encode a 0-d tensor")
    axis = _normalize_axis(axis, t.ndim)
    if t.shape[axis] < 1:
        raise ValidationError("reduction length must be >= 1")
    k1 = spec.group_size
    moved = np.moveaxis(t, axis, -1)
    length = moved.shape[-1]
    pad = -length % k1
    if pad:
        moved = np.concatenate([moved, np.zeros((*moved.shape[:-1], pad), np.float32)], axis=-1)
    blocks = moved.reshape(*moved.shape[:-1], (length + pad) // k1, k1)
    return MxTensor(spec, tuple(t.shape), axis, encode_groups(blocks, spec))


def decode_tensor(mt: MxTensor) -> np.ndarray:
    vals = decode_groups(mt.groups)
    flat = vals.reshape(*vals.shape[:-2], -1)[..., : mt.reduction_len]
    return np.ascontiguousarray(np.moveaxis(flat, -1, mt.axis))


def quantize(t: np.ndarray, axis: int, spec: MxFormatSpec) -> np.ndarray:
    """decode(encode(t)) shorthand."""
    return decode_tensor(encode_tensor(t, axis, spec))


@dataclass(frozen=True)
class ErrorStats:
    max_abs_err: float
    mse: float
    rel_frobenius: float
    saturation_count: int

    def to_dict(self) -> dict:
        return {
            "max_abs_err": self.max_abs_err,
            "mse": self.mse,
            "rel_frobenius": self.rel_frobenius,
            "saturation_count": self.saturation_count,
        }


def rel_frobenius(approx: np.ndarray, ref: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    diff = np.asarray(approx, dtype=np.float64) - ref
    num = float(np.sqrt(np.sum(diff * diff)))
    den = float(np.sqrt(np.sum(ref * ref)))
    if num == 0.0:
        return 0.0
    return num / den if den > 0 else float("inf")


def quant_error_stats(t: np.ndarray, axis: int, spec: MxFormatSpec) -> ErrorStats:
    t = np.asarray(t, dtype=np.float32)
    mt = encode_tensor(t, axis, spec)
    diff = decode_tensor(mt).astype(np.float64) - t.astype(np.float64)
    return ErrorStats(
        max_abs_err=float(np.abs(diff).max()),
        mse=float(np.mean(diff * diff)),
        rel_frobenius=rel_frobenius(decode_tensor(mt), t),
        saturation_count=mt.saturation_count,
    )


# MXQ1 container: header + packed groups ---------------------------------------

MXQ_MAGIC = b"MXQ1"
_MXQ_HEADER = "<4sBBBBB3x"


def mx_tensor_to_bytes(mt: MxTensor) -> bytes:
    """magic | k1 u8 | k2 u8 | m u8 | ndim u8 | axis u8 | 3 pad bytes | dims u64 LE | groups."""
    s = mt.spec
    head = struct.pack(_MXQ_HEADER, MXQ_MAGIC, s.group_size, s.subgroup_size, s.mantissa_bits, len(mt.shape), mt.axis)
    return head + struct.pack(f"<{len(mt.shape)}Q", *mt.shape) + pack_groups(mt.groups)


def mx_header_size(ndim: int) -> int:
    return struct.calcsize(_MXQ_HEADER) + 8 * ndim


def mx_tensor_from_bytes(buf: bytes) -> MxTensor:
    base = struct.calcsize(_MXQ_HEADER)
    if len(buf) < base:
        raise TensorFormatError("file shorter than the MXQ1 header", "truncated_header", "magic")
    magic, k1, k2, m, ndim, axis = struct.unpack_from(_MXQ_HEADER, buf)
    if magic != MXQ_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}", "bad_magic", "magic")
    try:
        spec = MxFormatSpec(k1, k2, m)
    except ValidationError as exc:
        raise TensorFormatError(str(exc), "bad_header", "format")
    if not 0 <= axis < ndim:
        raise TensorFormatError(f"axis {axis} invalid for ndim {ndim}", "bad_header", "axis")
    if len(buf) < base + 8 * ndim:
        raise TensorFormatError("header truncated inside dims", "truncated_header", "dims")
    shape = struct.unpack_from(f"<{ndim}Q", buf, base)
    if 0 in shape:
        raise TensorFormatError("zero-sized dimension", "bad_header", "dims")
    other = [d for i, d in enumerate(shape) if i != axis]
    n_groups = -(-shape[axis] // k1)
    count = int(np.prod(other, dtype=np.int64)) * n_groups
    g = unpack_groups(buf[base + 8 * ndim :], spec, count)
    batch = (*other, n_groups)
    groups = EncodedGroups(
        spec,
        g.exponent.reshape(batch),
        g.subgroup_bits.reshape(*batch, -1),
        g.signs.reshape(*batch, k1),
        g.mags.reshape(*batch, k1),
        g.saturated.reshape(*batch, k1),
    )
    return MxTensor(spec, tuple(shape), axis, groups)
