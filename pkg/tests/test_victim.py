import json

import numpy as np
import pytest

from weightleak import kernels, _fallback
from weightleak.floats import f32
from weightleak.leakmodel import LeakFnKind, classify, derive_region_map
from weightleak.victim import (ActivationKind, LayerSpec, ModelError, ModelSpec, infer, load_model,
                               preset_model, random_model, save_model)


def single(act, w, b=0.0):
    w = np.array([w], dtype=np.float32)
    return ModelSpec([LayerSpec(w.shape[1], 1, act)], [w], [np.array([b], np.float32)])


def labels(log, layer=0, neuron=0):
    return [o.region.label for o in log.layers[layer].observations(neuron)]


def test_exponential_neuron_examples():
    m = single(ActivationKind.EXPONENTIAL, [1.0, 0.0])
    out, log = infer(m, [4.0, 9.0])
    assert log.layers[0].pre[0] == f32(4.0)
    assert labels(log) == ["NormalPos"]
    _, log = infer(m, [110.0, 0.0])
    assert labels(log) == ["Overflow"]
    assert log.count_tuples(0) == [(17,)]


def test_sigmoid_saturate():
    m = single(ActivationKind.SIGMOID, [1.0])
    out, log = infer(m, [20.0])
    assert out[0] == f32(1.0)
    assert labels(log) == ["SaturateOne"]
    out, log = infer(m, [0.5])
    assert labels(log)[0] == "Standard" and len(labels(log)) == 2


def test_tanh_two_invocations():
    m = single(ActivationKind.TANH, [1.0])
    out, log = infer(m, [0.8])
    assert labels(log) == ["Inner1Pos", "Inner1Neg"]
    assert abs(out[0] - np.tanh(0.8)) < 1e-6


@pytest.mark.parametrize("name,arch", [
    ("insurance", [(11, 100, "exponential"), (100, 10, "relu"), (10, 1, "relu")]),
    ("mult", [(2, 4, "sigmoid"), (4, 8, "sigmoid"), (8, 1, "relu")]),
])
def test_presets(name, arch):
    m = preset_model(name, seed=1)
    assert [(l.n_inputs, l.n_neurons, l.activation.value) for l in m.layers] == arch


def test_preset_param_counts():
    assert preset_model("insurance", 0).param_count(0) == 1200
    mn = preset_model("mnist", 0)
    assert (mn.layers[0].n_inputs, mn.layers[0].n_neurons) == (784, 128)
    assert mn.param_count(0) == 100480
    with pytest.raises(ModelError):
        preset_model("resnet", 0)


def test_output_ranges():
    assert str(ActivationKind.SIGMOID.output_range) == "(0.0, 1.0)"
    assert str(ActivationKind.TANH.output_range) == "(-1.0, 1.0)"
    assert str(ActivationKind.RELU.output_range) == "[0.0, inf)"


def test_deterministic_and_log_consistent():
    rng = np.random.default_rng(0)
    for name in ("insurance", "mult"):
        m = preset_model(name, seed=3)
        for _ in range(20):
            x = rng.normal(0, 30, m.n_inputs).astype(np.float32)
            y1, l1 = infer(m, x)
            y2, l2 = infer(m, x)
            assert (y1.view(np.uint32) == y2.view(np.uint32)).all()
            for layer in l1.layers:
                for i, pre in enumerate(layer.pre):
                    obs = layer.observations(i)
                    kinds = layer.activation.leak_fns
                    assert obs[0].region == classify(derive_region_map(kinds[0]), pre).region
                    if layer.activation is ActivationKind.SIGMOID and len(obs) == 2:
                        arg = pre if pre < f32(-9.0) else -pre
                        assert obs[1].region == classify(derive_region_map(LeakFnKind.EXPF), arg).region


def test_float32_closure_diverges_from_double():
    # 1 + 2**-24 + 2**-24 - 1 is 0 in float32 sequential order but 2**-23 in double
    w = np.array([[1.0, 2.0**-24, 2.0**-24, -1.0]], dtype=np.float32)
    m = ModelSpec([LayerSpec(4, 1, ActivationKind.RELU)], [w], [np.zeros(1, np.float32)])
    _, log = infer(m, np.ones(4, np.float32))
    assert log.layers[0].pre[0] == 0.0
    assert float(np.dot(w.astype(np.float64)[0], np.ones(4))) == 2.0**-23


def test_fallback_matches_compiled_on_models():
    rng = np.random.default_rng(9)
    m = preset_model("mnist", seed=2)
    xs = rng.normal(0, 5, (8, 784)).astype(np.float32)
    for x in xs:
        assert (kernels.dense(m.weights[0], m.biases[0], x) ==
                _fallback.dense(m.weights[0], m.biases[0], x)).all()


def test_shape_mismatch():
    m = preset_model("mult", 0)
    with pytest.raises(ModelError):
        infer(m, [1.0, 2.0, 3.0])


def test_save_load_roundtrip(tmp_path):
    m = preset_model("mult", seed=7)
    save_model(m, tmp_path / "m.json")
    assert load_model(tmp_path / "m.json") == m


def test_load_rejects_bad_files(tmp_path):
    m = preset_model("mult", seed=7)
    save_model(m, tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["layers"][0]["weights"][0].append("3f800000")
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(ModelError):
        load_model(tmp_path / "bad.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["layers"][1]["weights"][0][0] = "7fc00000"
    (tmp_path / "nan.json").write_text(json.dumps(d))
    with pytest.raises(ModelError):
        load_model(tmp_path / "nan.json")
    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(ModelError):
        load_model(tmp_path / "junk.json")


def test_random_model_chain():
    m = random_model([(3, 5, ActivationKind.TANH), (5, 2, ActivationKind.RELU_BRANCHY)], seed=1)
    out, log = infer(m, [1.0, -2.0, 0.5])
    assert out.shape == (2,) and len(log.layers) == 2
