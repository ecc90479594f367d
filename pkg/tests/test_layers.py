import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cegan.layers import (ArchitectureSpec, InfeasibleArchitecture, LayerSpec, ParamSet, backward,
                          conv2d, conv2d_adjoint, conv_pads, forward, gradient_check, infer_shapes,
                          init_params, layer_backward, layer_forward, layer_output_shape,
                          lint_architecture, load_architecture, load_builtin, param_shapes)
from cegan.tensor import ShapeError


def single(spec, in_shape, seed=0, dtype=np.float64):
    arch = ArchitectureSpec("t", in_shape, (spec,))
    return arch, init_params(arch, np.random.default_rng(seed), dtype)


# ---------------------------------------------------------------- shapes

def test_table2_layer1_and_table1_layer6_rules():
    conv = LayerSpec("conv", 24, (4, 4), 2, "same")
    assert layer_output_shape(conv, (3, 218, 178), 1) == (24, 109, 89)
    deconv = LayerSpec("deconv", 24, (4, 4), 2, "valid")
    assert layer_output_shape(deconv, (96, 108, 88), 6) == (24, 218, 178)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 5))
def test_stride1_same_conv_preserves_extent(h, w, k):
    assert layer_output_shape(LayerSpec("conv", 2, (k, k), 1, "same"), (3, h, w), 1) == (2, h, w)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(1, 4), st.sampled_from(["same", "valid"]))
def test_shape_rules(n, k, s, pad):
    conv = LayerSpec("conv", 1, (k, 1), s, pad)
    if pad == "same":
        assert layer_output_shape(conv, (1, n, 1), 1)[1] == -(-n // s)
    elif n >= k:
        assert layer_output_shape(conv, (1, n, 1), 1)[1] == (n - k) // s + 1
    else:
        with pytest.raises(InfeasibleArchitecture):
            layer_output_shape(conv, (1, n, 1), 1)
    deconv = LayerSpec("deconv", 1, (k, 1), s, pad)
    expect = n * s if pad == "same" else (n - 1) * s + k
    assert layer_output_shape(deconv, (1, n, 1), 1)[1] == expect


def test_fc_shape_and_infer_batch():
    arch = ArchitectureSpec("a", (2, 3, 3), (LayerSpec("fully_connected", 7),))
    assert infer_shapes(arch, 5) == [(5, 7)]


def test_infeasible_names_layer():
    arch = load_builtin("table2_discriminator")
    with pytest.raises(InfeasibleArchitecture) as e:
        infer_shapes(arch)
    assert e.value.layer == 7


def test_table1_lint_exact():
    rows = lint_architecture(load_builtin("table1_generator"))
    assert len(rows) == 7 and all(r.ok for r in rows)
    assert rows[0].inferred_hwc == (5, 4, 192)
    assert rows[-1].inferred_hwc == (218, 178, 3)


def test_table2_lint_reports_layer7():
    rows = lint_architecture(load_builtin("table2_discriminator"))
    bad = [r for r in rows if not r.ok]
    assert [r.layer for r in bad] == [7]
    assert "infeasible" in bad[0].message
    assert rows[0].inferred_hwc == (109, 89, 24)
    assert rows[5].inferred_hwc == (4, 3, 192)


def test_desk_specs_fit_together():
    gen, disc = load_builtin("desk_generator"), load_builtin("desk_discriminator")
    assert infer_shapes(gen, 2)[-1] == (2, *disc.input_shape)
    assert infer_shapes(disc, 2)[-1] == (2, 5)


def test_spec_json_roundtrip_and_unknown_keys(tmp_path):
    arch = load_builtin("desk_discriminator")
    p = tmp_path / "a.json"
    p.write_text(json.dumps(arch.to_json()))
    assert load_architecture(p) == arch
    bad = arch.to_json()
    bad["layers"][0]["dilation"] = 2
    p.write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        load_architecture(p)
    with pytest.raises(ValueError):
        LayerSpec("pool", 3)


def test_param_names_and_shapes():
    shapes = param_shapes(load_builtin("desk_discriminator"))
    assert shapes["layer1.conv.weight"] == (8, 3, 4, 4) and "layer1.conv.bias" in shapes
    assert set(k for k in shapes if k.startswith("layer2.")) == {
        "layer2.conv.weight", "layer2.bn.gamma", "layer2.bn.beta", "layer2.bn.running_mean",
        "layer2.bn.running_var"}
    gen = param_shapes(load_builtin("desk_generator"))
    assert gen["layer1.deconv.weight"][0] == 100


def test_init_policy():
    arch = load_builtin("desk_discriminator")
    p = init_params(arch, np.random.default_rng(0))
    assert not p.trainable["layer2.bn.running_mean"] and p.trainable["layer2.bn.gamma"]
    np.testing.assert_array_equal(p["layer2.bn.running_var"], 1)
    np.testing.assert_array_equal(p["layer2.bn.beta"], 0)
    big = init_params(ArchitectureSpec("b", (400,), (LayerSpec("fully_connected", 300),)),
                      np.random.default_rng(1), np.float64)
    assert abs(big["layer1.fc.weight"].std() - np.sqrt(2 / 400)) < 0.002


# ---------------------------------------------------------------- forward examples

def test_identity_conv():
    spec = LayerSpec("conv", 1, (1, 1))
    _, p = single(spec, (1, 1, 1))
    p.entries["layer1.conv.weight"][...] = 1.0
    x = np.array([[[[3.25]]]])
    y, _ = layer_forward(spec, p, x, False)
    np.testing.assert_array_equal(y, x)


def test_ones_conv_sums():
    spec = LayerSpec("conv", 1, (2, 2))
    _, p = single(spec, (1, 3, 3))
    p.entries["layer1.conv.weight"][...] = 1.0
    y, _ = layer_forward(spec, p, np.ones((1, 1, 3, 3)), False)
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 4.0))


def test_activation_examples():
    for act, x, expect in [("relu", [-1.0, 0.0, 2.0], [0, 0, 2]), ("sigmoid", [0.0], [0.5])]:
        spec = LayerSpec("fully_connected", len(x), activation=act)
        _, p = single(spec, (len(x),))
        p.entries["layer1.fc.weight"] = np.eye(len(x))
        y, _ = layer_forward(spec, p, np.array([x]), False)
        np.testing.assert_array_equal(y[0], expect)


def test_relu_gate_backward():
    spec = LayerSpec("fully_connected", 2, activation="relu")
    _, p = single(spec, (2,))
    p.entries["layer1.fc.weight"] = np.eye(2)
    _, c = layer_forward(spec, p, np.array([[-1.0, 2.0]]), False)
    gin, _ = layer_backward(spec, p, c, np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(gin, [[0, 1]])


@pytest.mark.parametrize("spec,in_shape", [
    (LayerSpec("conv", 3, (3, 3), 2, "same", True, "relu"), (2, 5, 5)),
    (LayerSpec("deconv", 3, (4, 4), 2, "valid", False, "sigmoid"), (2, 3, 3)),
    (LayerSpec("fully_connected", 4, batch_norm=True), (6,)),
])
def test_zero_grad_out_gives_zero_grads(spec, in_shape):
    _, p = single(spec, in_shape)
    x = np.random.default_rng(0).standard_normal((3, *in_shape))
    y, c = layer_forward(spec, p, x, True)
    gin, grads = layer_backward(spec, p, c, np.zeros_like(y))
    assert not gin.any() and not any(g.any() for g in grads.values())


def test_backward_without_cache():
    spec = LayerSpec("fully_connected", 2)
    _, p = single(spec, (2,))
    with pytest.raises(ValueError):
        layer_backward(spec, p, None, np.ones((1, 2)))


def test_shape_mismatch():
    spec = LayerSpec("conv", 2, (3, 3))
    _, p = single(spec, (2, 5, 5))
    with pytest.raises(ShapeError):
        layer_forward(spec, p, np.ones((1, 3, 5, 5)), False)


def test_bn_needs_batch_of_two_in_training():
    spec = LayerSpec("conv", 2, (1, 1), batch_norm=True)
    _, p = single(spec, (1, 2, 2))
    with pytest.raises(ShapeError):
        layer_forward(spec, p, np.ones((1, 1, 2, 2)), True)
    layer_forward(spec, p, np.ones((1, 1, 2, 2)), False)


def test_same_padding_bottom_right():
    spec = LayerSpec("conv", 1, (2, 2), 1, "same")
    assert conv_pads(spec, (4, 4), (4, 4)) == (0, 1, 0, 1)
    _, p = single(spec, (1, 4, 4))
    p.entries["layer1.conv.weight"][...] = 1.0
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y, _ = layer_forward(spec, p, x, False)
    # bottom-right output only sees the corner pixel
    assert y[0, 0, 3, 3] == x[0, 0, 3, 3]
    assert y[0, 0, 0, 0] == x[0, 0, :2, :2].sum()


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    stride = 2
    oh, ow = (7 - 3) // stride + 1, (6 - 2) // stride + 1
    y = conv2d(x, w, stride, (0, 0, 0, 0), (oh, ow))
    ref = np.zeros((2, 4, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride:i * stride + 3, j * stride:j * stride + 2]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,s,pad,hw", [((4, 4), 2, "same", (7, 6)), ((3, 3), 1, "same", (5, 5)),
                                         ((4, 4), 2, "valid", (9, 8)), ((2, 3), 3, "same", (7, 10))])
def test_conv_adjoint_property(k, s, pad, hw):
    spec = LayerSpec("conv", 4, k, s, pad)
    out_hw = layer_output_shape(spec, (3, *hw), 1)[1:]
    pads = conv_pads(spec, hw, out_hw)
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 3, *k))
    x = rng.standard_normal((2, 3, *hw))
    y = rng.standard_normal((2, 4, *out_hw))
    lhs = np.sum(conv2d(x, w, s, pads, out_hw) * y)
    rhs = np.sum(x * conv2d_adjoint(y, w, s, pads, hw))
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


def test_conv_layer_adjoint_via_backward():
    spec = LayerSpec("conv", 4, (3, 3), 2, "same")
    _, p = single(spec, (2, 5, 5), seed=3)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    y_out, c = layer_forward(spec, p, x, False)
    r = rng.standard_normal(y_out.shape)
    gin, _ = layer_backward(spec, p, c, r)
    assert abs(np.sum(y_out * r) - np.sum(x * gin)) < 1e-10


def test_bn_training_statistics():
    spec = LayerSpec("conv", 3, (3, 3), 1, "same", True, "none")
    _, p = single(spec, (2, 6, 6))
    p.entries["layer1.bn.gamma"] = np.array([0.5, 2.0, -1.5])
    p.entries["layer1.bn.beta"] = np.array([0.1, -0.3, 2.0])
    x = np.random.default_rng(2).standard_normal((5, 2, 6, 6)) * 3 + 1
    y, _ = layer_forward(spec, p, x, True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), p["layer1.bn.beta"], atol=1e-5)
    var = y.var(axis=(0, 2, 3))
    np.testing.assert_allclose(var, p["layer1.bn.gamma"] ** 2, rtol=1e-4)


def test_bn_running_stats_update_in_place_only_when_training():
    spec = LayerSpec("fully_connected", 2, batch_norm=True)
    _, p = single(spec, (3,))
    rm = p["layer1.bn.running_mean"]
    x = np.random.default_rng(0).standard_normal((8, 3)) + 2
    layer_forward(spec, p, x, False)
    np.testing.assert_array_equal(rm, 0)
    z = x @ p["layer1.fc.weight"]
    layer_forward(spec, p, x, True)
    assert p["layer1.bn.running_mean"] is rm
    np.testing.assert_allclose(rm, 0.1 * z.mean(axis=0))
    np.testing.assert_allclose(p["layer1.bn.running_var"], 0.9 + 0.1 * z.var(axis=0))


def test_inference_is_pure():
    arch = load_builtin("desk_discriminator")
    p = init_params(arch, np.random.default_rng(0))
    x = np.random.default_rng(1).random((3, 3, 28, 24), dtype=np.float32)
    before = p.copy()
    a, _ = forward(arch, p, x, False)
    b, _ = forward(arch, p, x, False)
    np.testing.assert_array_equal(a, b)
    for k in p.names():
        np.testing.assert_array_equal(p[k], before[k])


def test_network_backward_cache_count():
    arch = load_builtin("desk_discriminator")
    p = init_params(arch, np.random.default_rng(0))
    y, caches = forward(arch, p, np.zeros((2, 3, 28, 24), np.float32), True)
    assert len(caches) == len(arch.layers)
    with pytest.raises(ValueError):
        backward(arch, p, caches[:-1], np.ones_like(y))


# ---------------------------------------------------------------- gradient check

@pytest.mark.parametrize("spec", [
    LayerSpec("fully_connected", 4, activation="sigmoid"),
    LayerSpec("conv", 4, (4, 4), 2, "same", True, "relu"),
    LayerSpec("deconv", 4, (4, 4), 2, "valid"),
    LayerSpec("deconv", 3, (4, 4), 2, "same", True, "tanh"),
    LayerSpec("conv", 3, (2, 3), 1, "valid", False, "tanh"),
])
def test_gradient_check_examples(spec):
    r = gradient_check(spec, 0)
    assert r.passed, r
    assert r.checked > 0


def test_small_conv_grads_match_finite_differences():
    r = gradient_check(LayerSpec("conv", 4, (3, 3)), 7, input_shape=(2, 5, 5), batch=1)
    assert r.passed and r.max_rel_error < 1e-4


def test_gradient_check_detects_wrong_gradient(monkeypatch):
    import cegan.layers as L
    real = L.activate_backward
    monkeypatch.setattr(L, "activate_backward", lambda k, z, y, g: 1.01 * real(k, z, y, g))
    r = gradient_check(LayerSpec("fully_connected", 3, activation="sigmoid"), 0)
    assert not r.passed


def test_paramset_views():
    p = ParamSet()
    p.add("a.x", np.zeros(2))
    with pytest.raises(KeyError):
        p.add("a.x", np.zeros(2))
    v = p.prefixed("m.").strip("m.")
    assert v["a.x"] is p["a.x"]
    c = p.copy()
    c.entries["a.x"][0] = 1
    assert p["a.x"][0] == 0


@pytest.mark.parametrize("spec,seed", [
    (LayerSpec("deconv", 4, (3, 3), 1, "valid", False, "sigmoid"), 4),
    (LayerSpec("deconv", 4, (3, 3), 1, "valid", True, "sigmoid"), 9),
    (LayerSpec("conv", 3, (3, 3), 2, "same", False, "sigmoid"), 8),
])
def test_known_finite_difference_noise_cases(spec, seed):
    # these instances miss 1e-4 at h=1e-3 through truncation error on a
    # near-cancelling coordinate; a smaller step shows the analytic side is right
    assert not gradient_check(spec, seed).passed
    assert gradient_check(spec, seed, h=1e-4).max_rel_error < 1e-5
