import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightleak import mathref
from weightleak.floats import f32, from_bits, next_down, next_up, to_bits
from weightleak.leakmodel import (LeakFnKind, RegionMap, classify, classify_batch,
                                  derive_region_map, reference_eval, reference_eval_batch,
                                  threshold_between, thresholds_of)

EXPF = LeakFnKind.EXPF
ALL_KINDS = list(LeakFnKind)


@pytest.fixture(scope="module")
def expf_map():
    return derive_region_map(EXPF)


def test_expf_anchor_counts():
    over = reference_eval(EXPF, f32(110.0))
    under = reference_eval(EXPF, f32(-200.0))
    assert (over.case, over.instr_count) == ("overflow", 17)
    assert (under.case, under.instr_count) == ("underflow", 18)
    assert over.y == np.inf and under.y == 0.0


def test_expf_matches_libm_within_one_ulp():
    rng = np.random.default_rng(1)
    xs = rng.uniform(-87, 88, 50_000).astype(np.float32)
    y, _ = mathref.expf_batch(xs)
    ref = np.exp(xs.astype(np.float64)).astype(np.float32)
    ulps = np.abs(y.view(np.int32).astype(np.int64) - ref.view(np.int32).astype(np.int64))
    assert ulps.max() <= 1


def test_scalar_and_batch_expf_agree_bitwise():
    rng = np.random.default_rng(2)
    xs = rng.integers(0, 2**32, 4000, dtype=np.uint64).astype(np.uint32).view(np.float32)
    xs = np.concatenate([xs, rng.uniform(-110, 95, 4000).astype(np.float32)])
    y, code = mathref.expf_batch(xs)
    for x, yb, cb in zip(xs, y, code):
        r = mathref.expf(x)
        assert mathref.EXPF_CASES[cb] == r.case
        assert to_bits(r.y) == to_bits(yb) or (np.isnan(r.y) and np.isnan(yb))


def test_expf_boundaries(expf_map):
    t = threshold_between(expf_map, "NormalPos", "Overflow")
    assert to_bits(t.value) == 0x42B17217
    assert abs(float(t.value) - 88.7228) < 1e-3
    t = threshold_between(expf_map, "Underflow", "Filtered")
    assert next_up(t.value) == from_bits(0xC2CFF1B5)
    assert abs(float(t.value) + 103.972) < 1e-3


def test_expf_region_labels(expf_map):
    labels = expf_map.labels()
    for name in ["Underflow", "Overflow", "TooSmall", "NormalPos", "NormalNeg", "Inner1Pos",
                 "Inner1Neg", "Inner2Pos", "Inner2Neg", "NaN", "InfPos", "InfNeg"]:
        assert name in labels


@pytest.mark.parametrize("x,label", [(4.0, "NormalPos"), (110.0, "Overflow"), (0.0, "TooSmall"),
                                     (-0.0, "TooSmall"), (-200.0, "Underflow")])
def test_classify_examples(expf_map, x, label):
    assert classify(expf_map, f32(x)).region.label == label


def test_logistic_cutoffs():
    m = derive_region_map(LeakFnKind.LOGISTIC)
    up = threshold_between(m, "Standard", "SaturateOne")
    assert up.value == f32(16.619047164916992188)
    low = threshold_between(m, "Lower", "Standard")
    assert next_up(low.value) == f32(-9.0)
    assert m.lookup(f32(-9.0)).label == "Standard"


def test_logistic_saturate_has_no_exp_call():
    r = reference_eval(LeakFnKind.LOGISTIC, f32(20.0))
    assert r.y == f32(1.0) and r.calls == []


def test_framework_branch_counts_distinct():
    m = derive_region_map(LeakFnKind.LOGISTIC)
    counts = [m.region(l).instr_count for l in ("Lower", "Standard", "SaturateOne")]
    assert len(set(counts)) == 3


def test_relu_cardinalities():
    rng = np.random.default_rng(3)
    xs = rng.normal(0, 10, 2000).astype(np.float32)
    for kind, n in [(LeakFnKind.RELU_BRANCHLESS, 1), (LeakFnKind.RELU_BRANCHY, 2)]:
        counts = {reference_eval(kind, x).instr_count for x in xs}
        assert len(counts) == n
    assert reference_eval(LeakFnKind.RELU_BRANCHLESS, f32(-1.0)).instr_count == \
        reference_eval(LeakFnKind.RELU_BRANCHLESS, f32(1.0)).instr_count
    assert thresholds_of(derive_region_map(LeakFnKind.RELU_BRANCHLESS)) == []
    (t,) = thresholds_of(derive_region_map(LeakFnKind.RELU_BRANCHY))
    assert to_bits(t.value) == 0


def _boundary_probes(m):
    xs = []
    for t in thresholds_of(m):
        for v in (next_down(t.value), t.value, next_up(t.value), next_up(next_up(t.value))):
            xs.append(v)
    return np.array(xs, dtype=np.float32)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_partition_million(kind):
    m = derive_region_map(kind)
    rng = np.random.default_rng(4)
    xs = rng.integers(0, 2**32, 1_000_000, dtype=np.uint64).astype(np.uint32).view(np.float32)
    xs = np.concatenate([xs, _boundary_probes(m)])
    idx = classify_batch(m, xs)
    regions = m.all_regions()
    # each finite or infinite x sits in exactly one closed key interval
    from weightleak.floats import keys_of
    keys = keys_of(xs)
    los = np.array([r.lo_key for r in m.regions])
    his = np.array([r.hi_key for r in m.regions])
    finite = ~np.isnan(xs)
    inside = (keys[finite, None] >= los[None, :]) & (keys[finite, None] <= his[None, :])
    assert (inside.sum(axis=1) == 1).all()
    _, names, _ = reference_eval_batch(kind, xs)
    region_case = np.array([r.case for r in regions], dtype=object)[idx]
    assert (region_case == names).all()


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_classify_count_matches_scalar_reference(kind):
    m = derive_region_map(kind)
    rng = np.random.default_rng(5)
    xs = rng.integers(0, 2**32, 5000, dtype=np.uint64).astype(np.uint32).view(np.float32)
    special = np.array([np.nan, np.inf, -np.inf, 0.0, -0.0], dtype=np.float32)
    xs = np.concatenate([xs, _boundary_probes(m), special])
    for x in xs:
        assert classify(m, x).instr_count == reference_eval(kind, x).instr_count


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=2.0**-28, max_value=float(f32(1.0397)), width=32))
def test_inner_band_symmetry(x):
    m = derive_region_map(EXPF)
    x = f32(x)
    assert classify(m, x).instr_count == classify(m, -x).instr_count


def test_classify_deterministic(expf_map):
    assert classify(expf_map, f32(3.3)) == classify(expf_map, f32(3.3))


def test_map_roundtrip(tmp_path):
    for kind in ALL_KINDS:
        m = derive_region_map(kind)
        p = tmp_path / f"{kind.value}.map"
        m.save(p)
        assert RegionMap.load(p) == m
