import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsearch.energy import EnergyTable, expected_energy
from opsearch.network import (
    LayerSpec,
    MixtureLayer,
    Network,
    NetworkSpec,
    argmax_assignment,
    build_network,
    count_macs,
    count_weights,
    mini_cnn,
    mini_mlp,
    mini_squeeze,
    resolve_network,
    sample_assignment,
    sample_assignments,
    saturated_alpha,
)
from opsearch.operators import op_binary, op_mulfree, op_typical
from opsearch.tensor import ShapeError, Tensor, cross_entropy, no_grad, smoothed

from conftest import gradcheck

DIGITAL = EnergyTable.default().choice_set("digital")
HYBRID = EnergyTable.default().choice_set("hybrid")


def dense_mixture(theta, choices=DIGITAL):
    layer = MixtureLayer(LayerSpec("dense", "d", out_features=1), (len(theta),), choices, np.random.default_rng(0))
    layer.weight.data = np.asarray(theta, float).reshape(-1, 1)
    return layer


# -- mixture layer -------------------------------------------------------------


def test_uniform_mixture_example():
    layer = dense_mixture([0.5, -0.3])
    y = layer.forward(Tensor([[1.0, 2.0]])).item()
    x, w = [1.0, 2.0], [0.5, -0.3]
    parts = [op_typical(x, w).item(), op_mulfree(x, w).item(), op_binary(x, w).item()]
    assert np.allclose(parts, [-0.1, -0.2, -1.0])
    assert abs(y - (-1.3 / 3)) < 1e-9
    assert abs(y - (-0.433333)) < 1e-6


@pytest.mark.parametrize("j", range(3))
def test_saturated_alpha_selects_single_operator(j, rng):
    layer = MixtureLayer(LayerSpec("conv2d", "c", out_channels=3, kernel=3, padding=1), (2, 5, 5), DIGITAL, rng)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    layer.alpha.data = saturated_alpha(3, j)
    mixed = layer.forward(x).data
    single = layer.forward(x, choice=j).data
    assert np.allclose(mixed, single, rtol=0, atol=1e-10)


def test_hybrid_saturation_matches_digital_operator(rng):
    # the CiM twin of an operator has the same float forward
    layer = MixtureLayer(LayerSpec("dense", "d", out_features=4), (6,), HYBRID, rng)
    x = Tensor(rng.normal(size=(3, 6)))
    for j in range(6):
        layer.alpha.data = saturated_alpha(6, j)
        assert np.allclose(layer.forward(x).data, layer.forward(x, choice=j % 3).data, atol=1e-10)


def test_alpha_shift_invariance(rng):
    layer = MixtureLayer(LayerSpec("dense", "d", out_features=2), (4,), DIGITAL, rng)
    layer.alpha.data = rng.normal(size=3)
    x = Tensor(rng.normal(size=(5, 4)))
    before = layer.forward(x).data
    e0 = expected_energy([layer.alpha], [100], DIGITAL).item()
    a0 = argmax_assignment(layer.alpha)
    layer.alpha.data = layer.alpha.data + 7.25
    assert np.allclose(layer.forward(x).data, before, rtol=0, atol=1e-12)
    assert argmax_assignment(layer.alpha) == a0
    assert abs(expected_energy([layer.alpha], [100], DIGITAL).item() - e0) < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_mixture_loss_gradcheck_smoothed(seed):
    rng = np.random.default_rng(seed)
    layer = MixtureLayer(LayerSpec("dense", "d", out_features=3), (4,), DIGITAL, rng)
    x = rng.normal(size=(5, 4))
    labels = rng.integers(0, 3, size=5)
    w0 = rng.uniform(-0.8, 0.8, size=(4, 3))

    def loss(alpha, w, b):
        layer.alpha, layer.weight, layer.bias = alpha, w, b
        return cross_entropy(layer.forward(Tensor(x), k=2), labels)

    with smoothed():
        assert gradcheck(loss, [rng.normal(size=3), w0, rng.normal(size=3)]) < 1e-3


def test_quantized_forward_needs_choice(rng):
    layer = dense_mixture([0.5, -0.3])
    with pytest.raises(ValueError):
        layer.forward(Tensor([[1.0, 2.0]]), quant_bits=8)


def test_quantized_binary_keeps_weight_signs():
    # a tiny weight must stay +1/-1 instead of rounding to zero
    layer = dense_mixture([1.0, -1e-4])
    y = layer.forward(Tensor([[1.0, 1.0]]), choice=2, quant_bits=8).item()
    assert y == 0.0


def test_choice_index_and_pin(rng):
    layer = MixtureLayer(LayerSpec("dense", "d", out_features=1, pin="MF"), (2,), HYBRID, rng)
    assert layer.fixed == 1
    assert layer.choice_index("B-CiM") == 5
    with pytest.raises(ValueError):
        MixtureLayer(LayerSpec("dense", "d", out_features=1), (2,), DIGITAL, rng).choice_index("T-CiM")


# -- counting ---------------------------------------------------------------------


def test_count_examples():
    conv = LayerSpec("conv2d", "c", out_channels=4, kernel=3, padding="same")
    assert count_macs(conv, (1, 8, 8)) == 2304
    assert count_weights(conv, (1, 8, 8)) == 36
    dense = LayerSpec("dense", "d", out_features=10)
    assert count_macs(dense, (16,)) == 160 and count_weights(dense, (16,)) == 160
    one = LayerSpec("conv2d", "o", out_channels=4, kernel=1)
    assert count_macs(one, (4, 4, 4)) == 256 and count_weights(one, (4, 4, 4)) == 16


def test_count_rejects_non_searchable():
    with pytest.raises(ValueError):
        count_macs(LayerSpec("relu", "r", searchable=False), (4,))
    with pytest.raises(ValueError):
        count_weights(LayerSpec("flatten", "f", searchable=False), (4,))


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
    k=st.integers(1, 3), stride=st.integers(1, 2), pad=st.integers(0, 1),
)
def test_counts_match_enumeration(c, o, h, w, k, stride, pad):
    layer = LayerSpec("conv2d", "c", out_channels=o, kernel=k, stride=stride, padding=pad)
    pairs = 0
    for i in range(-pad, h + pad - k + 1, stride):
        for j in range(-pad, w + pad - k + 1, stride):
            pairs += o * k * k * c  # one MAC per (window element, filter)
    assert count_macs(layer, (c, h, w)) == pairs
    filters = np.zeros((o, c, k, k))
    assert count_weights(layer, (c, h, w)) == filters.size


def test_preset_counts():
    assert mini_cnn().mac_counts() == [2304, 4608, 384]
    sq = mini_squeeze()
    assert sq.mac_counts() == [4608, 2048, 2048, 18432, 1024, 512, 4608, 2048, 2048, 18432, 320]
    assert len(sq.searchable) == 11
    assert sq.layers[0].pin == "T"
    assert mini_squeeze(pin_first=False).layers[0].pin is None


# -- specs -----------------------------------------------------------------------------


@st.composite
def random_specs(draw):
    c = draw(st.integers(1, 3))
    side = draw(st.integers(4, 9))
    layers, shape = [], (c, side, side)
    for i in range(draw(st.integers(1, 4))):
        kind = draw(st.sampled_from(["conv2d", "relu", "maxpool", "avgpool"]))
        if kind == "conv2d":
            k = draw(st.integers(1, min(3, shape[1])))
            layer = LayerSpec("conv2d", f"l{i}", out_channels=draw(st.integers(1, 4)), kernel=k,
                              padding=draw(st.sampled_from(["same", "valid", 0, 1])) if k % 2 else 0)
        elif kind in ("maxpool", "avgpool"):
            if shape[1] < 2:
                continue
            layer = LayerSpec(kind, f"l{i}", kernel=2, stride=2, searchable=False)
        else:
            layer = LayerSpec("relu", f"l{i}", searchable=False)
        shape = layer.output_shape([shape])
        layers.append(layer)
    tail = draw(st.sampled_from(["flatten", "global-avgpool"]))
    layers.append(LayerSpec(tail, "tail", searchable=False))
    classes = draw(st.integers(2, 4))
    layers.append(LayerSpec("dense", "fc", out_features=classes))
    return NetworkSpec((c, side, side), classes, layers)


def traced_shapes(spec, x):
    """Run a forward pass and record the actual output shape of every searchable layer."""
    net = build_network(spec)
    seen = {}
    for i, m in net.mixtures.items():
        def wrapped(inp, *a, _m=m, _name=spec.layers[i].name, _fwd=m.forward, **kw):
            out = _fwd(inp, *a, **kw)
            seen[_name] = tuple(out.shape[1:])
            return out
        m.forward = wrapped
    with no_grad():
        out = net.forward(x)
    return out, seen


@settings(max_examples=100, deadline=None)
@given(random_specs(), st.integers(0, 3))
def test_forward_shapes_match_static_shapes(spec, seed):
    x = np.random.default_rng(seed).normal(size=(2,) + spec.input_shape)
    out, seen = traced_shapes(spec, x)
    assert out.shape == (2, spec.classes)
    assert set(seen) == set(spec.searchable_names)
    for name, shape in seen.items():
        assert shape == spec.shape_of(name)


def test_mini_squeeze_forward_shapes():
    spec = mini_squeeze()
    out, seen = traced_shapes(spec, np.zeros((3, 1, 8, 8)))
    assert out.shape == (3, 10)
    for name, shape in seen.items():
        assert shape == spec.shape_of(name)


def test_spec_round_trip_and_unknown_keys(tmp_path):
    spec = mini_squeeze()
    path = tmp_path / "net.json"
    path.write_text(spec.to_json())
    back = NetworkSpec.load(path)
    assert back.to_dict() == spec.to_dict()
    assert back.mac_counts() == spec.mac_counts()
    d = spec.to_dict()
    d["layers"][0]["dilation"] = 2
    with pytest.raises(ValueError, match="dilation"):
        NetworkSpec.from_dict(d)
    d = spec.to_dict()
    d["optimizer"] = "sgd"
    with pytest.raises(ValueError, match="optimizer"):
        NetworkSpec.from_dict(d)


def test_spec_shape_errors():
    with pytest.raises(ShapeError):
        NetworkSpec((1, 8, 8), 3, [LayerSpec("dense", "fc", out_features=3)])
    with pytest.raises(ShapeError):
        NetworkSpec((1, 8, 8), 3, [LayerSpec("flatten", "f", searchable=False), LayerSpec("dense", "fc", out_features=4)])
    with pytest.raises(ValueError):
        NetworkSpec((4,), 2, [LayerSpec("dense", "a", input="missing", out_features=2)])


def test_network_rejects_wrong_input_shape():
    net = build_network(mini_cnn())
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 1, 7, 7)))


def test_resolve_network(tmp_path):
    assert resolve_network("mini-mlp", (2,), 2).name == "mini-mlp"
    path = tmp_path / "n.json"
    path.write_text(mini_cnn().to_json())
    assert resolve_network(str(path), (1, 8, 8), 3).mac_counts() == [2304, 4608, 384]
    with pytest.raises(ValueError):
        resolve_network(str(path), (1, 8, 8), 4)
    with pytest.raises(ValueError):
        resolve_network("resnet", (1, 8, 8), 3)


def test_mini_mlp_flattens_images():
    spec = mini_mlp((1, 4, 4), 3)
    assert spec.layers[0].kind == "flatten" and spec.mac_counts()[0] == 16 * 16


# -- assignments --------------------------------------------------------------------


def test_argmax_examples():
    assert argmax_assignment(np.array([0.2, 1.5, -0.3])) == 1
    assert argmax_assignment(np.zeros(3)) == 0


def test_sampling_saturated_alpha():
    rng = np.random.default_rng(0)
    draws = [sample_assignment(np.array([10.0, 0.0, 0.0]), rng) for _ in range(10_000)]
    freq = draws.count(0) / len(draws)
    p0 = np.exp(10) / (np.exp(10) + 2)
    assert p0 - 0.002 <= freq <= 1.0
    assert 0.9998 - 0.002 <= freq


def test_sample_assignments_frequencies():
    rng = np.random.default_rng(3)
    alphas = [np.array([0.5, -1.0, 0.2]), np.array([2.0, 0.0, 0.0, 1.0, -1.0, 0.3])]
    draws = sample_assignments(alphas, rng, 10_000)
    for i, a in enumerate(alphas):
        p = np.exp(a) / np.exp(a).sum()
        freq = np.bincount(draws[:, i], minlength=len(a)) / 10_000
        assert np.all(np.abs(freq - p) <= 0.02)


def test_set_assignment_and_state_round_trip(rng):
    net = build_network(mini_cnn(), seed=3)
    net.set_assignment([2, 1, 0])
    assert net.assignment() == [2, 1, 0]
    assert net.free_alphas() == []
    state = net.state()
    other = build_network(mini_cnn(), seed=4)
    other.load_state(state)
    x = rng.normal(size=(2, 1, 8, 8))
    with no_grad():
        assert np.array_equal(net.forward(x, [2, 1, 0]).data, other.forward(x, [2, 1, 0]).data)
    with pytest.raises(ValueError):
        net.set_assignment([0, 1])


def test_quantized_forward_requires_full_assignment():
    net = build_network(mini_cnn())
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 8, 8)), quantized=True)


def test_network_class_is_exported():
    assert isinstance(build_network(mini_cnn()), Network)
    json.dumps(mini_cnn().to_dict())
