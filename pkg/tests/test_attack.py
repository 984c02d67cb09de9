import math

import numpy as np
import pytest

from weightleak.attack import (BOTTOM, TOP, AttackConfig, ConvergenceSet, InsufficientThresholdDiversity,
                               LostBracket, NoClassChange, Oracle, RankDeficient, Response, SignAmbiguous,
                               TargetUnreachable, Unreachable, binary_search_threshold,
                               calibrate_layer_input_centric, calibrate_neuron, collect_convergence_sets,
                               error_report, forward64, gap_search, grid_search_deeper, input_centric_recover,
                               observable_map, query_budget_estimate, recover_first_layer, solve_deeper,
                               solve_neuron, solve_rows, unwrap_layers, verify_certificate)
from weightleak.attack.recover import RecoveredLayer, set_from_dict, set_to_dict
from weightleak.floats import f32, next_up, to_key
from weightleak.leakmodel import LeakFnKind, derive_region_map
from weightleak.victim import ActivationKind, LayerSpec, ModelSpec, _activate, preset_model, random_model

EXP, SIG = ActivationKind.EXPONENTIAL, ActivationKind.SIGMOID


def layer_model(w, b, act=EXP):
    w = np.atleast_2d(np.asarray(w, np.float32))
    b = np.asarray(b, np.float32).reshape(w.shape[0])
    return ModelSpec([LayerSpec(w.shape[1], w.shape[0], act)], [w], [b])


def truth_params(m, layer=0):
    return np.column_stack([m.weights[layer], m.biases[layer]]).astype(np.float64)


class DoubleOracle(Oracle):
    """Pre-activations summed in double and rounded once, so only the search quantises."""

    def query(self, x, phase="other"):
        x = np.asarray(x, np.float32)
        m = self._model
        pre = (m.weights[0].astype(np.float64) @ x.astype(np.float64) + m.biases[0]).astype(np.float32)
        _, _, counts = _activate(m.layers[0].activation, pre)
        with self._lock:
            self.query_counter += 1
            self.phases[phase] += 1
        return Response([counts])


@pytest.fixture(scope="module")
def small_exp():
    return random_model([(4, 6, EXP)], seed=11)


# ---------------------------------------------------------------------------
# observable map

def test_side_thresholds_match_region_boundaries():
    em = derive_region_map(LeakFnKind.EXPF)
    om = observable_map(EXP)
    assert om.top.last == em.region("NormalPos").hi and om.top.first == em.region("Overflow").lo
    assert om.bottom.first == em.region("Underflow").hi
    sm = observable_map(SIG)
    assert sm.top.last == derive_region_map(LeakFnKind.LOGISTIC).region("Standard").hi
    assert sm.top_sig == (7,) and sm.bottom_sig == (9, 18)


def test_branchless_relu_not_attackable():
    assert not observable_map(ActivationKind.RELU).attackable


# ---------------------------------------------------------------------------
# calibration

def test_calibrate_positive_weight():
    o = Oracle(layer_model([[0.1]], [0.0]))
    cal = calibrate_neuron(o, 0, 1, 10.0)
    assert cal.sign_string() == "+" and cal.maxvals[0] == 1000.0 and cal.queries == 4


@pytest.mark.parametrize("w", [-0.1, -0.05, -0.3, 0.02, 0.7])
def test_calibrate_matches_brute_force(w):
    o = Oracle(layer_model([[w]], [0.0]))
    cal = calibrate_neuron(o, 0, 1, 10.0)
    em = derive_region_map(LeakFnKind.EXPF)
    k = next(k for k in range(38) if em.lookup(f32(w) * f32(10.0 ** k)).label in ("Overflow", "Underflow"))
    assert cal.maxvals[0] == f32(10.0 ** k)
    assert cal.sides[0] == (TOP if w > 0 else BOTTOM)


def test_calibrate_zero_weight_unreachable():
    o = Oracle(layer_model([[0.0, 0.4]], [0.1]))
    cal = calibrate_neuron(o, 0, 2, 10.0, D=38)
    assert cal.sides[0] == 0 and cal.maxvals[0] == 0 and cal.sides[1] == TOP
    # 0.4 first overflows at 10**3: four probes
    assert cal.queries == 38 + 4


def test_layer_calibration_zero_column_and_bound():
    w = np.array([[0.0, 0.2], [0.0, -0.3], [0.0, 0.05]], np.float32)
    o = Oracle(layer_model(w, [0, 0, 0]))
    cal = calibrate_layer_input_centric(o, 0, base=2.0, D=40)
    assert (cal.sides[:, 0] == 0).all() and cal.queries[0] == 40
    assert (cal.sides[:, 1] != 0).all()
    assert o.query_counter <= 2 * 40


def test_layer_calibration_single_neuron_matches_per_neuron():
    m = layer_model([[0.3, -0.07, 0.9]], [0.0])
    a = calibrate_layer_input_centric(Oracle(m), 0, base=10.0, D=38)
    o = Oracle(m)
    b = calibrate_neuron(o, 0, 3, 10.0)
    assert (a.sides[0] == b.sides).all() and (a.maxvals[0] == b.maxvals).all()
    assert a.queries.sum() == b.queries


# ---------------------------------------------------------------------------
# search

def test_search_recovers_single_weight():
    o = Oracle(layer_model([[27.5846]], [0.0]))
    cs = binary_search_threshold(o, 0, 0, [0.0], f32(10.0), 55, side=TOP)
    assert cs.ulp_tight and cs.certified
    assert abs(float(cs.lo) - 3.2164) < 1e-3
    w, *_ = solve_rows([[cs.row()[0]]], [cs.threshold])
    assert abs(w[0] - 27.5846) < 1e-5


def test_search_depth_zero_returns_calibration_bracket():
    o = Oracle(layer_model([[0.5]], [0.0]))
    cs = binary_search_threshold(o, 0, 0, [0.0], f32(1000.0), 0, side=TOP)
    assert (cs.lo, cs.hi) == (0.0, 1000.0) and o.query_counter == 0 and cs.depth == 0


def test_search_depth_counts_queries_and_trail():
    o = Oracle(layer_model([[0.5, 0.1]], [0.2]))
    for depth in (1, 5, 12):
        q0 = o.query_counter
        cs = binary_search_threshold(o, 0, 0, [0.0, 0.3], f32(1000.0), depth, side=TOP)
        assert o.query_counter - q0 == depth == cs.depth
        assert len(cs.trail) == depth + 1


def test_search_expands_when_start_too_small():
    o = Oracle(layer_model([[0.5]], [0.0]))
    cs = binary_search_threshold(o, 0, 0, [0.0], f32(10.0), 60, side=TOP)
    assert cs.ulp_tight and 170 < float(cs.lo) < 180


def test_wrong_direction_loses_bracket():
    o = Oracle(layer_model([[0.5]], [0.0]))
    with pytest.raises(LostBracket):
        binary_search_threshold(o, 0, 0, [0.0], f32(1000.0), 20, side=BOTTOM)


def test_never_saturating_input_unreachable():
    o = Oracle(layer_model([[0.0]], [0.0]))
    with pytest.raises(Unreachable):
        binary_search_threshold(o, 0, 0, [0.0], f32(1e30), 200, side=TOP)


def test_single_input_neuron_uses_both_thresholds():
    m = layer_model([[0.4]], [0.1])
    o = Oracle(m)
    cal = calibrate_neuron(o, 0, 1, 10.0)
    sets = collect_convergence_sets(o, 0, 2, 55, cal)
    assert [cs.side for cs in sets] == [TOP, BOTTOM]
    assert sets[0].lo > 0 > sets[1].lo
    w, b, _ = solve_neuron(sets)
    assert abs(w[0] - 0.4) < 1e-5 and abs(b - 0.1) < 1e-4


def test_sets_mix_thresholds(small_exp):
    o = Oracle(small_exp)
    cal = calibrate_layer_input_centric(o, 0, base=10.0, D=38).for_neuron(2)
    sets = collect_convergence_sets(o, 2, 5, 55, cal)
    assert len({cs.threshold for cs in sets}) == 2
    assert all(cs.neuron == (0, 2) for cs in sets)


def test_branchy_relu_has_no_threshold_diversity():
    m = layer_model([[0.5, -0.2]], [0.1], ActivationKind.RELU_BRANCHY)
    o = Oracle(m)
    cal = calibrate_neuron(o, 0, 2, 10.0)
    with pytest.raises(InsufficientThresholdDiversity):
        collect_convergence_sets(o, 0, 3, 30, cal)


def test_certificates_verify_on_fresh_oracle(small_exp):
    o = Oracle(small_exp)
    rec = recover_first_layer(o, AttackConfig(depth=55))
    fresh = Oracle(small_exp)
    for sets in rec.sets.values():
        for cs in sets:
            assert cs.ulp_tight
            assert verify_certificate(fresh, cs)
            # one ulp past the low end is the high end
            step = next_up(cs.lo) if cs.hi > cs.lo else f32(np.nextafter(cs.lo, f32(-np.inf)))
            assert step == cs.hi
    assert fresh.phases["verify"] == fresh.query_counter


# ---------------------------------------------------------------------------
# solve

def test_solve_three_rows_exact():
    w1, w2, b = 0.37, -1.25, 0.5
    A = np.array([[3.0, 0, 1], [0, 7.5, 1], [2.25, -4.0, 1]])
    z, res = solve_rows(A, A @ [w1, w2, b])
    assert np.allclose(z, [w1, w2, b], atol=1e-12) and res < 1e-12


def test_duplicate_rows_rank_deficient():
    with pytest.raises(RankDeficient):
        solve_rows([[1.0, 2.0, 1.0]] * 3, [1.0, 1.0, 1.0])


def test_same_threshold_rejected():
    sets = [ConvergenceSet(np.zeros(1, np.float32), 0, f32(v), f32(v), (88.7,), (0, 0)) for v in (1.0, 2.0)]
    with pytest.raises(InsufficientThresholdDiversity):
        solve_neuron(sets)


def test_noise_free_error_within_quantisation_bound():
    m = random_model([(3, 4, EXP)], seed=5)
    o = DoubleOracle(m)
    rec = recover_first_layer(o, AttackConfig(depth=60, extras=0))
    T = truth_params(m)
    for j, sets in rec.sets.items():
        A = np.array([cs.row() for cs in sets])
        # each equation is off by the bracket half-width times the weight plus half an ulp of the threshold
        delta = np.array([abs(T[j, cs.dyn_index]) * abs(float(cs.hi) - float(cs.lo)) / 2
                          + abs(float(np.spacing(f32(cs.threshold)))) for cs in sets])
        bound = np.linalg.norm(np.linalg.pinv(A), 2) * np.linalg.norm(delta)
        assert np.abs(rec.params()[j] - T[j]).max() <= bound


# ---------------------------------------------------------------------------
# recovery driver

def test_recovery_accuracy_and_signs(small_exp):
    o = Oracle(small_exp)
    rec = recover_first_layer(o, AttackConfig())
    err, _ = rec.errors(small_exp.weights[0], small_exp.biases[0])
    assert not rec.unsolved and err.max() < 1e-4
    big = np.abs(small_exp.weights[0]) > 1e-6
    assert (rec.signs()[big] == np.sign(small_exp.weights[0])[big]).all()


@pytest.mark.parametrize("depth", [0, 3, 10, 30])
def test_accounting(small_exp, depth):
    cfg = AttackConfig(depth=depth, verify=depth > 0)
    o = Oracle(small_exp)
    rec = recover_first_layer(o, cfg)
    assert o.query_counter == o.phase_total() == rec.queries_used
    P, N = 5, 6
    search = o.phases["search"]
    assert o.phases["calibrate"] + search <= (P - 1) * cfg.D + N * (P + cfg.extras) * depth
    assert search <= N * (P + cfg.extras) * depth


def test_sweep_matches_separate_runs(small_exp):
    full = recover_first_layer(Oracle(small_exp), AttackConfig(depth=40))
    for d in (0, 4, 12, 20):
        sep = recover_first_layer(Oracle(small_exp), AttackConfig(depth=d))
        at = full.at_depth(d)
        assert np.array_equal(at.weights, sep.weights, equal_nan=True)
        assert np.array_equal(at.biases, sep.biases, equal_nan=True)


def test_monotone_refinement(small_exp):
    rec = recover_first_layer(Oracle(small_exp), AttackConfig(depth=55))
    rep = error_report(rec, small_exp, list(range(5, 56, 5)))
    avg = rep.column("avg_abs_error")
    slack = float(np.nanmax(rec.residuals))
    for a, b in zip(avg, avg[1:]):
        assert b <= a + slack


def test_error_report_perfect_and_unsolved(small_exp):
    N, n = small_exp.weights[0].shape
    rec = RecoveredLayer(0, EXP, small_exp.weights[0].astype(np.float64), small_exp.biases[0].astype(np.float64),
                         np.zeros(N), depth=55)
    rep = error_report(rec, small_exp)
    assert rep.rows == [(55, 0.0, 0.0, 0.0, 0.0)]
    w = rec.weights.copy()
    w[3] = 99.0
    bad = RecoveredLayer(0, EXP, w, rec.biases, np.zeros(N), unsolved={3: "RankDeficient"}, depth=55)
    rep = error_report(bad, small_exp)
    assert rep.rows[0][2] == 0.0 and rep.unsolved[55] == {3: "RankDeficient"}
    assert rep.to_csv().splitlines()[1].endswith(",3")
    with pytest.raises(ValueError):
        error_report(rec, preset_model("mult", 0))


def test_unreachable_neuron_reported_not_fatal():
    w = np.array([[0.3, 0.2], [0.0, 0.0]], np.float32)
    rec = recover_first_layer(Oracle(layer_model(w, [0.1, 0.2])), AttackConfig(D=10))
    assert list(rec.unsolved) == [1] and "Unreachable" in rec.unsolved[1]
    assert np.isfinite(rec.weights[0]).all()


def test_parallel_matches_sequential(small_exp):
    a_o, b_o = Oracle(small_exp), Oracle(small_exp)
    a = recover_first_layer(a_o, AttackConfig(depth=30))
    b = recover_first_layer(b_o, AttackConfig(depth=30, workers=4))
    assert a.weights.tobytes() == b.weights.tobytes() and a.biases.tobytes() == b.biases.tobytes()
    assert a_o.query_counter == b_o.query_counter and b_o.query_counter == b_o.phase_total()


def test_checkpoint_resume_identical(small_exp, tmp_path):
    cfg = AttackConfig(depth=30)
    whole = recover_first_layer(Oracle(small_exp), cfg)
    ck = tmp_path / "ck.json"
    part = recover_first_layer(Oracle(small_exp), cfg, checkpoint=ck, limit=2)
    assert not part.complete and len(part.sets) == 2
    resumed = recover_first_layer(Oracle(small_exp), cfg, checkpoint=ck, resume=True)
    assert resumed.complete
    assert resumed.weights.tobytes() == whole.weights.tobytes()
    assert resumed.queries_used == whole.queries_used and resumed.phases == whole.phases
    with pytest.raises(ValueError):
        recover_first_layer(Oracle(small_exp), AttackConfig(depth=31), checkpoint=ck, resume=True)


def test_set_serialisation_roundtrip(small_exp):
    rec = recover_first_layer(Oracle(small_exp), AttackConfig(depth=20))
    cs = rec.sets[0][1]
    back = set_from_dict(set_to_dict(cs))
    assert back.inputs.tobytes() == cs.inputs.tobytes() and back.trail == cs.trail
    assert back.thresholds == cs.thresholds and np.array_equal(back.row(7), cs.row(7))


def test_oracle_modes_agree():
    m = preset_model("mult", 2)
    d, t = Oracle(m, "direct"), Oracle(m, "trace")
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = (rng.normal(0, 1, 2) * 10 ** rng.uniform(-1, 2.5, 2)).astype(np.float32)
        for a, b in zip(d.query(x).counts, t.query(x).counts):
            assert np.array_equal(a, b)


def test_determinism_guard_counts_mismatch():
    m = layer_model([[1.0]], [0.0])
    o = Oracle(m)
    o.query([1.0])
    o._model = layer_model([[100.0]], [0.0])
    o.query([1.0])
    assert o.nondeterministic == 1 and o.query_counter == 2


def test_unknown_oracle_mode():
    with pytest.raises(ValueError):
        Oracle(layer_model([[1.0]], [0.0]), "timing")


# ---------------------------------------------------------------------------
# unwrap and deeper layers

def solved(w, b, act):
    w = np.asarray(w, np.float64)
    return RecoveredLayer(0, act, w, np.asarray(b, np.float64), np.zeros(len(w)))


def test_unwrap_identity_exponential():
    x = unwrap_layers([solved(np.eye(2), [0, 0], EXP)], [math.e, math.e ** 2])
    assert np.allclose(x, [1.0, 2.0], atol=1e-12)


def test_unwrap_sigmoid_negative_target():
    with pytest.raises(TargetUnreachable):
        unwrap_layers([solved(np.eye(2), [0, 0], SIG)], [0.5, -0.1])


def test_unwrap_off_image_target():
    layer = solved(np.random.default_rng(0).normal(0, 1, (4, 2)), np.zeros(4), SIG)
    with pytest.raises(TargetUnreachable):
        unwrap_layers([layer], [0.2, 0.4, 0.6, 0.8])


def test_unwrap_two_layers_roundtrip():
    rng = np.random.default_rng(4)
    l1 = solved(rng.normal(0, 0.5, (3, 3)), rng.normal(0, 0.2, 3), ActivationKind.TANH)
    l2 = solved(rng.normal(0, 0.5, (3, 3)), rng.normal(0, 0.2, 3), SIG)
    x0 = rng.normal(0, 1, 3)
    target = forward64([l1, l2], x0)
    assert np.abs(forward64([l1, l2], unwrap_layers([l1, l2], target)) - target).max() < 1e-9


@pytest.fixture(scope="module")
def mult_setup():
    m = preset_model("mult", 0)
    o = Oracle(m)
    rec = recover_first_layer(o, AttackConfig(depth=30))
    return m, o, rec


def test_grid_search_finds_signless_sets(mult_setup):
    m, o, rec = mult_setup
    best = 0
    for j in range(8):
        try:
            sets = grid_search_deeper(o, [rec], 1, j, 0.25, 50.0, n_scans=8)
        except NoClassChange:
            continue
        for cs in sets:
            assert cs.neuron == (1, j) and cs.hidden.shape == (4,)
        best = max(best, sum(not cs.sign_known for cs in sets))
        with pytest.raises(SignAmbiguous):
            solve_deeper(sets, 5)
    assert best >= 5


def test_grid_set_sits_on_a_candidate_threshold(mult_setup):
    m, o, rec = mult_setup
    sets = grid_search_deeper(o, [rec], 1, 0, 0.25, 50.0, n_scans=2)
    w, b = m.weights[1][0].astype(np.float64), float(m.biases[1][0])
    for cs in sets:
        sigma = w @ cs.hidden + b
        assert min(abs(sigma - t) for t in cs.thresholds) < 1e-4


def test_grid_search_no_class_change():
    w1 = np.array([[0.3, -0.2], [0.1, 0.4]], np.float32)
    w2 = np.array([[1e-4, 1e-4]], np.float32)
    m = ModelSpec([LayerSpec(2, 2, SIG), LayerSpec(2, 1, SIG)], [w1, w2],
                  [np.zeros(2, np.float32), np.array([0.6], np.float32)])
    o = Oracle(m)
    rec = recover_first_layer(o, AttackConfig(depth=30))
    with pytest.raises(NoClassChange):
        grid_search_deeper(o, [rec], 1, 0, 0.25, 50.0, n_scans=2)
    with pytest.raises(NoClassChange):
        grid_search_deeper(o, [rec], 1, 0, 500.0, 50.0)


# ---------------------------------------------------------------------------
# input-centric

def test_gap_search_clustered_beats_per_neuron():
    # six neurons in two tight clusters on one input, searched to depth 10
    w = np.array([[0.50], [0.505], [0.51], [0.90], [0.905], [0.91]], np.float32)
    o = Oracle(layer_model(w, np.zeros(6)))
    omap = observable_map(EXP)
    x = np.zeros(1, np.float32)

    def sat(t):
        x[0] = t
        sigs = o.query(x).signatures(0)
        return {j: omap.side_of(s) == TOP for j, s in enumerate(sigs)}

    span = 256.0
    res = gap_search(sat, 0.0, span, range(6), span / 2 ** 10)
    assert res.queries == o.query_counter < 60
    for j, (a, b) in res.brackets.items():
        crossing = omap.top.value / float(w[j, 0])
        assert a <= crossing <= b and b - a <= span / 2 ** 10


def test_gap_search_abandons_empty_gaps():
    res = gap_search(lambda t: {0: t >= 10.0}, 0.0, 1024.0, [0], 1.0)
    assert res.queries == 10 and all(g == 1 for g, _ in res.iterations)


def test_input_centric_agrees_with_neuron_centric():
    m = random_model([(6, 5, SIG)], seed=3)
    ic = input_centric_recover(Oracle(m), 0, 0.1, AttackConfig(strategy="input"))
    nc = recover_first_layer(Oracle(m), AttackConfig())
    assert not ic.unsolved and not nc.unsolved
    diff = np.abs(ic.params() - nc.params()).max(axis=1)
    assert (diff <= 10 * np.maximum(ic.residuals, nc.residuals)).all()


def test_input_centric_bias_equation_flips_direction():
    # every weight positive: only the negative-direction equation reaches the bottom threshold
    m = layer_model([[0.2, 0.3, 0.25]], [0.0])
    rec = input_centric_recover(Oracle(m), 0, 0.1, AttackConfig(strategy="input", extras=0))
    assert not rec.unsolved
    assert sorted(cs.side for cs in rec.sets[0]) == [BOTTOM, TOP, TOP, TOP]
    assert np.abs(rec.params()[0] - truth_params(m)[0]).max() < 1e-2


# ---------------------------------------------------------------------------
# budget

def test_budget_formulas():
    b = query_budget_estimate(12, 100, 55, 4)
    assert (b.Q, b.C) == (12 * 100 * 55, 11 * 4)
    assert query_budget_estimate(12, 100, 55, 4, extras=3).Q == 15 * 100 * 55
    assert query_budget_estimate(785, 128, 55, 18).tramer == 10_048_000
    with pytest.raises(ValueError):
        query_budget_estimate(0, 1, 1, 1)
