import numpy as np
import pytest

from mxsim.codec import MX6, MX9, encode_tensor, quantize
from mxsim.errors import ValidationError
from mxsim.gemm import (
    PAIR_66,
    PAIR_69,
    PAIR_99,
    attention_forward,
    linear_forward,
    mx_matmul,
    reference_attention,
    reference_forward,
    reference_linear,
)
from mxsim.planner import (
    LinearLayerPlan,
    build_attention_plan,
    build_linear_plan,
    uniform_attention_plan,
    uniform_linear_plan,
)

from oracles import linear_oracle, naive_matmul


def test_zero_activations():
    w = np.ones((16, 8), np.float32)
    res = linear_forward(np.zeros((4, 16), np.float32), w, uniform_linear_plan(16))
    assert not res.output.any()
    assert res.rel_frobenius == 0.0


def test_identity_times_integer_weights(rng):
    w = rng.integers(-8, 8, size=(16, 16)).astype(np.float32)
    x = np.eye(16, dtype=np.float32)
    plan = build_linear_plan(rng.random(16), 50)
    res = linear_forward(x, w, plan)
    assert np.array_equal(res.output, w)


@pytest.mark.parametrize("p1", [0, 25, 50, 100])
def test_matches_float_oracle(p1, rng):
    x = (rng.standard_normal((32, 32)) * np.exp(rng.standard_normal(32))).astype(np.float32)
    w = rng.standard_normal((32, 32)).astype(np.float32)
    plan = build_linear_plan(np.abs(x).mean(0), p1)
    out = linear_forward(x, w, plan).output
    assert np.array_equal(out.view(np.uint32), linear_oracle(x, w, plan).view(np.uint32))


def test_region_accounting(rng):
    m, k, n = 5, 70, 3
    x = rng.standard_normal((m, k)).astype(np.float32)
    w = rng.standard_normal((k, n)).astype(np.float32)
    totals = set()
    for p1 in (0, 1, 10, 30, 60, 100):
        plan = build_linear_plan(np.abs(x).mean(0), p1)
        res = linear_forward(x, w, plan)
        hi_groups = -(-plan.mx9_width(16) // 16)
        assert res.group_counts[PAIR_69] == hi_groups * m * n
        assert res.group_counts[PAIR_99] == 0
        totals.add(res.total_groups)
    assert totals == {5 * m * n}


def test_extremes_match_uniform_paths(rng):
    x = rng.standard_normal((8, 48)).astype(np.float32)
    w = rng.standard_normal((48, 8)).astype(np.float32)
    stats = np.abs(x).mean(0)
    for p1, spec in ((0, MX6), (100, MX9)):
        plan = build_linear_plan(stats, p1)
        perm = list(plan.permutation)
        direct = mx_matmul((encode_tensor(x[:, perm], 1, spec), encode_tensor(w[perm], 0, MX6)))
        assert np.array_equal(linear_forward(x, w, plan).output, direct)


def test_planted_outliers_mixed_beats_uniform_mx6(rng):
    x = rng.standard_normal((32, 128)).astype(np.float32)
    hot = [3, 40, 77, 100]
    x[:, hot] *= 64
    w = rng.integers(-15, 16, size=(128, 16)).astype(np.float32)
    mixed = linear_forward(x, w, build_linear_plan(np.abs(x).mean(0), 100 * 4 / 128))
    plain = linear_forward(x, w, build_linear_plan(np.abs(x).mean(0), 0))
    assert mixed.rel_frobenius < plain.rel_frobenius


def test_shape_errors():
    with pytest.raises(ValidationError):
        linear_forward(np.ones((2, 16)), np.ones((8, 2)), uniform_linear_plan(16))
    with pytest.raises(ValidationError):
        linear_forward(np.ones((2, 16)), np.ones((16, 2)), uniform_linear_plan(8))


def test_attention_single_token():
    rng = np.random.default_rng(3)
    q, k, v = (rng.standard_normal((2, 1, 16)).astype(np.float32) for _ in range(3))
    plan = build_attention_plan([1.0, 2.0], 50)
    res = attention_forward(q, k, v, plan)
    assert np.array_equal(res.output[0], quantize(v[0], 0, MX6))
    assert np.array_equal(res.output[1], quantize(v[1], 0, MX9))


def test_attention_all_mx9_close_to_reference():
    rng = np.random.default_rng(5)
    # values on a coarse dyadic grid are exact in MX9
    q, k, v = (rng.integers(-4, 5, size=(2, 8, 16)).astype(np.float32) / 8 for _ in range(3))
    res = attention_forward(q, k, v, uniform_attention_plan(2, "mx9"))
    ref = reference_attention(q, k, v)
    # only the re-quantized softmax (MX9, 7-bit mantissa) and f32 steps differ
    assert res.rel_frobenius < 2e-2
    assert np.allclose(res.output, ref, atol=2e-2)


def test_attention_large_head_benefits_from_mx9():
    rng = np.random.default_rng(11)
    q, k, v = (rng.standard_normal((4, 16, 32)).astype(np.float32) for _ in range(3))
    for t in (q, k, v):
        t[2] *= 16
    stats = [np.abs(np.stack([q[h], k[h], v[h]])).mean() for h in range(4)]
    hi = attention_forward(q, k, v, build_attention_plan(stats, 100))
    lo = attention_forward(q, k, v, build_attention_plan(stats, 0))
    mid = attention_forward(q, k, v, build_attention_plan(stats, 25))
    assert hi.rel_frobenius <= mid.rel_frobenius <= lo.rel_frobenius
    assert mid.group_counts[PAIR_99] and mid.group_counts[PAIR_66]
    assert hi.group_counts[PAIR_66] == 0


def test_attention_errors():
    x = np.ones((2, 4, 16), np.float32)
    with pytest.raises(ValidationError):
        attention_forward(x, x, x, uniform_attention_plan(3))
    with pytest.raises(ValidationError):
        attention_forward(x, x[:, :2], x, uniform_attention_plan(2))


def test_reference_examples(rng):
    assert reference_forward(np.array([[2.0]]), np.array([[3.0]])).tolist() == [[6.0]]
    x = rng.standard_normal((6, 20)).astype(np.float32)
    w = rng.standard_normal((20, 4)).astype(np.float32)
    assert np.array_equal(reference_linear(x, w), naive_matmul(x, w))
    xi = rng.integers(-9, 9, size=(4, 12)).astype(np.float32)
    wi = rng.integers(-9, 9, size=(12, 3)).astype(np.float32)
    perm = rng.permutation(12)
    assert np.array_equal(reference_linear(xi[:, perm], wi[perm]), reference_linear(xi, wi))
    with pytest.raises(ValidationError):
        reference_forward(x)


def test_deterministic(rng):
    x = rng.standard_normal((16, 40)).astype(np.float32)
    w = rng.standard_normal((40, 16)).astype(np.float32)
    plan = build_linear_plan(np.abs(x).mean(0), 20)
    a = linear_forward(x, w, plan).output
    b = linear_forward(x.copy(), w.copy(), plan).output
    assert a.tobytes() == b.tobytes()
