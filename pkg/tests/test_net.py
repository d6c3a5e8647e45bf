import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv, naive_forward, naive_score
from stgconvnet import gradcheck, net
from stgconvnet.net import LayerSpec, NetParams, NetSpec
from stgconvnet.tensor import ShapeError, inner, sq_norm

seeds = st.integers(0, 2**32 - 1)


def constant_params(spec, shape, weight, bias):
    p = net.init_params(spec, shape, np.random.default_rng(0))
    return NetParams([np.full_like(w, weight) for w in p.weights],
                     [np.full_like(b, bias) for b in p.biases])


def two_layer():
    return NetSpec(1, (LayerSpec("conv3d", 3, (2, 2, 2), (1, 1, 1)),
                       LayerSpec("conv3d", 2, (2, 2, 1), (1, 1, 1))))


@pytest.mark.parametrize("bias, expected", [(1.0, 1.0), (-1.0, 0.0)])
def test_constant_pre_activation(bias, expected):
    spec = two_layer()
    video = np.random.default_rng(0).normal(size=(1, 4, 4, 3))
    maps, pattern = net.forward(spec, constant_params(spec, video.shape, 0.0, bias), video)
    for f, d in zip(maps, pattern):
        assert np.all(f == expected)
        assert np.all(d == (expected > 0))


def test_single_filter_matches_loop_oracle():
    rng = np.random.default_rng(1)
    spec = NetSpec(1, (LayerSpec("conv3d", 1, (2, 2, 2), (1, 1, 1)),))
    video = rng.normal(size=(1, 3, 3, 3))
    params = NetParams([rng.normal(size=(1, 1, 2, 2, 2))], [np.array([0.1])])
    maps, _ = net.forward(spec, params, video)
    assert maps[0].shape == (1, 2, 2, 2)
    np.testing.assert_allclose(maps[0], naive_forward(spec, params, video)[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("layer, shape, by_position", [
    (LayerSpec("conv3d", 2, (2, 2, 2), (1, 1, 1)), (2, 6, 6, 5), False),
    (LayerSpec("conv3d", 2, (4, 4, 3), (2, 1, 2)), (2, 6, 5, 5), True),
    (LayerSpec("spatial_full", 3, (0, 0, 2), (1, 1, 1)), (2, 3, 4, 5), True),
    (LayerSpec("full", 2), (3, 2, 3, 2), True),
])
def test_both_loop_strategies_match_oracle(layer, shape, by_position):
    rng = np.random.default_rng(2)
    spec = NetSpec(shape[0], (layer,))
    g = spec.geometry(shape)[0]
    assert net._by_position(g) == by_position
    params = net.init_params(spec, shape, rng, std=1.0)
    x = rng.normal(size=(2, *shape))
    pre = net.conv_forward(x, params.weights[0], params.biases[0], g)
    for i in range(2):
        np.testing.assert_allclose(pre[i], naive_conv(x[i], params.weights[0], params.biases[0],
                                                      g.stride), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_random_nets_match_oracle(seed):
    spec, params, video = gradcheck.random_tiny_net(np.random.default_rng(seed))
    maps, _ = net.forward(spec, params, video)
    for got, want in zip(maps, naive_forward(spec, params, video)):
        np.testing.assert_allclose(got, want, atol=1e-12)
    assert net.score(spec, params, video) == pytest.approx(naive_score(spec, params, video),
                                                          rel=1e-12, abs=1e-12)


def test_score_zero_and_counting():
    spec = NetSpec(1, (LayerSpec("conv3d", 5, (3, 3, 4), (1, 1, 1)),))
    video = np.random.default_rng(3).normal(size=(1, 4, 4, 4))
    assert net.score(spec, constant_params(spec, video.shape, 0.0, 0.0), video) == 0.0
    # 5 filters on a 2x2x1 map
    assert net.score(spec, constant_params(spec, video.shape, 0.0, 1.0), video) == 20.0


def test_grad_input_of_constant_net_is_zero():
    spec = two_layer()
    video = np.random.default_rng(4).normal(size=(1, 4, 4, 3))
    assert not net.grad_input(spec, constant_params(spec, video.shape, 0.0, 1.0), video).any()


@pytest.mark.parametrize("seed", range(10))
def test_grad_input_matches_finite_differences(seed):
    spec, params, video = gradcheck.random_tiny_net(np.random.default_rng(seed))
    err, compared, _ = gradcheck.check_input(spec, params, video)
    if compared:
        assert err <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_grad_params_matches_finite_differences(seed):
    spec, params, video = gradcheck.random_tiny_net(np.random.default_rng(100 + seed))
    err, compared, _ = gradcheck.check_params(spec, params, video)
    if compared:
        assert err <= 1e-5


def test_step_along_reconstruction_is_affine():
    rng = np.random.default_rng(5)
    for _ in range(20):
        spec, params, video = gradcheck.random_tiny_net(rng)
        b = net.grad_input(spec, params, video)
        t = 1e-7
        _, before = net.forward(spec, params, video)
        _, after = net.forward(spec, params, video + t * b)
        if not all(np.array_equal(x, y) for x, y in zip(before, after)):
            continue
        lhs = net.score(spec, params, video + t * b) - net.score(spec, params, video)
        assert lhs == pytest.approx(t * sq_norm(b), rel=1e-6, abs=1e-12)


def test_top_bias_gradient_counts_positions():
    spec = two_layer()
    video = np.random.default_rng(6).normal(size=(1, 4, 4, 3))
    g = net.grad_params(spec, constant_params(spec, video.shape, 0.0, 1.0), video)
    # top map is 2 filters x 2x2x2 positions
    np.testing.assert_array_equal(g.biases[-1], [8.0, 8.0])


def test_dead_net_has_zero_parameter_gradient():
    spec = two_layer()
    video = np.random.default_rng(7).normal(size=(1, 4, 4, 3))
    g = net.grad_params(spec, constant_params(spec, video.shape, 0.0, -1.0), video)
    assert all(not a.any() for a in g.arrays())


def test_affine_decomposition_trivial_cases():
    spec = two_layer()
    video = np.random.default_rng(8).normal(size=(1, 4, 4, 3))
    a, b = net.affine_decomposition(spec, constant_params(spec, video.shape, 0.0, 0.0), video)
    assert a == 0.0 and not b.any()
    a, b = net.affine_decomposition(spec, constant_params(spec, video.shape, 0.0, 1.0), video)
    assert a == 16.0 and not b.any()


def test_piecewise_linearity_under_small_perturbation():
    rng = np.random.default_rng(9)
    checked = 0
    while checked < 30:
        spec, params, video = gradcheck.random_tiny_net(rng)
        a, b = net.affine_decomposition(spec, params, video)
        moved = video + 1e-6 * rng.normal(size=video.shape)
        _, d0 = net.forward(spec, params, video)
        _, d1 = net.forward(spec, params, moved)
        if not all(np.array_equal(x, y) for x, y in zip(d0, d1)):
            continue
        f1 = net.score(spec, params, moved)
        assert abs(f1 - a - inner(moved, b)) <= 1e-9 * (1 + abs(f1))
        checked += 1


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_decomposition_is_exact_at_expansion_point(seed):
    spec, params, video = gradcheck.random_tiny_net(np.random.default_rng(seed))
    a, b = net.affine_decomposition(spec, params, video)
    f = net.score(spec, params, video)
    assert abs(f - a - inner(video, b)) <= 1e-10 * max(1.0, abs(f))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_relu_identity(seed):
    spec, params, video = gradcheck.random_tiny_net(np.random.default_rng(seed))
    trace = net.propagate(spec, params, video[None])
    for pre, feat, delta in zip(trace.pre, trace.features, trace.pattern):
        np.testing.assert_array_equal(feat, delta * pre)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0.01, 100.0))
def test_positive_homogeneity_without_biases(seed, lam):
    spec, params, video = gradcheck.random_tiny_net(np.random.default_rng(seed))
    params = NetParams(params.weights, [np.zeros_like(b) for b in params.biases])
    maps, _ = net.forward(spec, params, video)
    scaled, _ = net.forward(spec, params, lam * video)
    for m, s in zip(maps, scaled):
        np.testing.assert_allclose(s, lam * m, rtol=1e-10, atol=1e-12)


def test_presets():
    e1 = net.preset("exp1")
    assert [(l.kind, l.num_filters, l.kernel, l.stride) for l in e1.layers] == [
        ("conv3d", 120, (15, 15, 15), (7, 7, 7)),
        ("conv3d", 40, (7, 7, 7), (3, 3, 3)),
        ("conv3d", 20, (3, 3, 2), (2, 2, 1))]
    e2 = net.preset("exp2")
    assert [(l.kind, l.num_filters) for l in e2.layers] == [
        ("conv3d", 120), ("spatial_full", 30), ("conv3d", 5)]
    assert e2.layers[0].kernel == (7, 7, 7) and e2.layers[0].stride == (3, 3, 3)
    assert e2.layers[1].kernel[2] == 4 and e2.layers[1].stride[2] == 2
    assert e2.layers[2].kernel == (1, 1, 2) and e2.layers[2].stride == (1, 1, 1)
    e3 = net.preset("exp3")
    assert [(l.kind, l.num_filters) for l in e3.layers] == [("conv3d", 200), ("full", 1)]
    assert e3.layers[0].kernel == (7, 7, 7) and e3.layers[0].stride == (3, 3, 3)
    assert net.preset("exp1", input_channels=1).input_channels == 1
    with pytest.raises(ValueError):
        net.preset("exp9")


def test_spatial_full_and_full_output_shapes():
    spec = NetSpec(1, (LayerSpec("conv3d", 4, (3, 3, 3), (2, 2, 1)),
                       LayerSpec("spatial_full", 3, (0, 0, 2), (5, 5, 2)),
                       LayerSpec("full", 2)))
    g = spec.geometry((1, 9, 7, 6))
    assert [x.out_shape for x in g] == [(4, 4, 3, 4), (3, 1, 1, 2), (2, 1, 1, 1)]


def test_geometry_errors_name_the_layer():
    spec = NetSpec(1, (LayerSpec("conv3d", 2, (3, 3, 3)), LayerSpec("conv3d", 2, (5, 5, 1))))
    with pytest.raises(ShapeError, match="layer 2"):
        spec.geometry((1, 6, 6, 3))
    with pytest.raises(ShapeError, match="channels"):
        spec.geometry((3, 6, 6, 3))


def test_wrong_parameter_shapes_are_rejected():
    spec = NetSpec(1, (LayerSpec("conv3d", 2, (2, 2, 2)), LayerSpec("full", 1)))
    params = net.init_params(spec, (1, 4, 4, 3), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="layer 2"):
        net.score(spec, params, np.zeros((1, 5, 4, 3)))


def test_init_params_statistics():
    spec = NetSpec(1, (LayerSpec("conv3d", 50, (5, 5, 5)),))
    p = net.init_params(spec, (1, 5, 5, 5), np.random.default_rng(0))
    assert p.weights[0].std() == pytest.approx(0.01, rel=0.05)
    assert not p.biases[0].any()


def test_net_text_round_trip():
    for name in ("exp1", "exp2", "exp2_fire", "exp3"):
        spec = net.preset(name, 3)
        assert net.spec_from_text(net.spec_to_text(spec)) == spec


def test_params_file_round_trip(tmp_path):
    spec, params, _ = gradcheck.random_tiny_net(np.random.default_rng(3), layers=3)
    net.save_params(params, tmp_path / "p.stp")
    assert net.load_params(tmp_path / "p.stp").equal(params)
    buf = (tmp_path / "p.stp").read_bytes()
    with pytest.raises(ValueError):
        net.decode_params(buf[:-3])
