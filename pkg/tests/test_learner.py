from dataclasses import replace

import numpy as np
import pytest

from stgconvnet import learner, net, sampler
from stgconvnet import energy as en
from stgconvnet.learner import TrainConfig
from stgconvnet.net import LayerSpec, NetParams, NetSpec

LINEAR = NetSpec(1, (LayerSpec("conv3d", 1, (1, 1, 1)),))


def linear_params(w, b=1000.0):
    return NetParams([np.full((1, 1, 1, 1, 1), float(w))], [np.array([float(b)])])


def tiny_setup(seed=0, layers=2):
    rng = np.random.default_rng(seed)
    spec = NetSpec(1, (LayerSpec("conv3d", 3, (2, 2, 2)), LayerSpec("conv3d", 2, (2, 2, 1)))[:layers])
    videos = [rng.normal(size=(1, 4, 4, 3)) for _ in range(2)]
    return spec, videos


def test_gradient_cancels_on_identical_sets():
    spec, videos = tiny_setup()
    params = net.init_params(spec, videos[0].shape, np.random.default_rng(1), std=0.5)
    g = learner.estimate_gradient(spec, params, videos, videos)
    assert all(not a.any() for a in g.arrays())


def test_gradient_of_linear_filter_is_closed_form():
    rng = np.random.default_rng(2)
    obs = [rng.normal(2.0, 1.0, size=(1, 2, 3, 2)) for _ in range(3)]
    syn = [rng.normal(size=(1, 2, 3, 2)) for _ in range(2)]
    g = learner.estimate_gradient(LINEAR, linear_params(0.3), obs, syn)
    want = np.mean([v.sum() for v in obs]) - np.mean([v.sum() for v in syn])
    assert g.weights[0].item() == pytest.approx(want, rel=1e-12)
    assert g.biases[0].item() == 0.0


def test_gradient_composes_per_video_gradients():
    spec, videos = tiny_setup(3)
    params = net.init_params(spec, videos[0].shape, np.random.default_rng(4), std=0.5)
    syn = [v[::-1].copy() + 0.3 for v in videos]
    g = learner.estimate_gradient(spec, params, videos, syn)
    per = [net.grad_params(spec, params, v) for v in videos + syn]
    for i, arr in enumerate(g.arrays()):
        parts = [list(p.arrays())[i] for p in per]
        want = (parts[0] + parts[1]) / 2 - (parts[2] + parts[3]) / 2
        np.testing.assert_allclose(arr, want, atol=1e-12)


def test_update_params_arithmetic():
    p = linear_params(0.5, 0.0)
    g = linear_params(2.0, 0.0)
    assert learner.update_params(p, g, 0.1, [1.0]).weights[0].item() == pytest.approx(0.7, abs=1e-15)
    assert learner.update_params(p, g, 0.0, [1.0]).equal(p)
    assert learner.update_params(p, p.zeros_like(), 0.1, [1.0]).equal(p)


def test_update_params_scales_layers_and_leaves_uncovered_ones():
    spec, videos = tiny_setup()
    p = net.init_params(spec, videos[0].shape, np.random.default_rng(0))
    g = NetParams([np.ones_like(p.weights[0])], [np.ones_like(p.biases[0])])
    new = learner.update_params(p, g, 1.0, [0.5])
    np.testing.assert_array_equal(new.weights[0], p.weights[0] + 0.5)
    np.testing.assert_array_equal(new.weights[1], p.weights[1])
    with pytest.raises(ValueError):
        learner.update_params(p, p, 1.0, [1.0])


def test_noop_learning_advances_chains_one_step():
    spec, videos = tiny_setup()
    cfg = TrainConfig(iterations=1, langevin_steps=1, learning_rate=0.0, epsilon=0.3,
                      layer_rate_scales=(1, 1), seed=5)
    state = learner.train(spec, videos, cfg)
    init = net.init_params(spec, videos[0].shape, np.random.default_rng((5, 3)))
    assert state.params.equal(init)
    chains = sampler.init_chains(videos[0].shape, 3, "noise", 5, 1.0, 0.3)
    sampler.advance(spec, init, en.ModelConfig(), chains, 1)
    np.testing.assert_array_equal(state.chains.chains, chains.chains)


def test_training_is_deterministic():
    spec, videos = tiny_setup()
    cfg = TrainConfig(iterations=4, langevin_steps=3, learning_rate=0.01, epsilon=0.3,
                      layer_rate_scales=(1, 0.1), seed=7, init_std=0.3)
    a = learner.train(spec, videos, cfg)
    b = learner.train(spec, videos, cfg)
    assert a.params.equal(b.params)
    np.testing.assert_array_equal(a.chains.chains, b.chains.chains)
    assert a.diagnostics == b.diagnostics
    assert [r["iteration"] for r in a.diagnostics] == [1, 2, 3, 4]


def test_frozen_chains_give_the_monte_carlo_update():
    spec, videos = tiny_setup()
    cfg = TrainConfig(iterations=1, langevin_steps=5, learning_rate=0.02, epsilon=0.0,
                      layer_rate_scales=(1, 0.1), seed=1, init_std=0.3)
    pre, stats = learner.preprocess(videos, cfg.preprocessing)
    state = learner.start(spec, np.stack(pre), cfg, stats)
    p0, chains0 = state.params.copy(), state.chains.chains.copy()
    learner.learning_iteration(state, np.stack(pre))
    np.testing.assert_array_equal(state.chains.chains, chains0)
    g = learner.estimate_gradient(spec, p0, pre, list(chains0))
    want = learner.update_params(p0, g, 0.02, (1, 0.1))
    assert state.params.equal(want)


def test_update_increases_value_function():
    spec, videos = tiny_setup(layers=1)
    rng = np.random.default_rng(8)
    params = net.init_params(spec, videos[0].shape, rng, std=0.5)
    syn = [rng.normal(size=videos[0].shape) for _ in range(3)]
    g = learner.estimate_gradient(spec, params, videos, syn)
    new = learner.update_params(params, g, 1e-3, [1.0])
    delta = new - params
    assert delta.dot(g) >= 0
    # dV/dw from finite differences along the update direction
    cfg = en.ModelConfig()
    h = 1e-6
    up = learner.update_params(params, delta, h, [1.0])
    dn = learner.update_params(params, delta, -h, [1.0])
    dv = (en.value_function(spec, up, cfg, syn, videos)
          - en.value_function(spec, dn, cfg, syn, videos)) / (2 * h)
    assert dv == pytest.approx(delta.dot(g), rel=1e-4)


def test_exponential_family_toy_matches_moments():
    # f = w * sum(I) + const, so the model is N(w, 1) per coordinate and the
    # maximum likelihood w equals the observed mean intensity
    rng = np.random.default_rng(0)
    videos = [rng.normal(3.0, 1.0, size=(1, 2, 2, 2)) for _ in range(4)]
    cfg = TrainConfig(iterations=200, langevin_steps=20, num_chains=16, learning_rate=0.02,
                      layer_rate_scales=(1.0,), epsilon=0.5, preprocessing="none", seed=0)
    state = learner.train(LINEAR, videos, cfg, params=linear_params(0.0))
    obs = np.mean([v.sum() for v in videos])
    syn = np.mean([c.sum() for c in state.chains.chains])
    assert syn == pytest.approx(obs, rel=0.05)
    assert state.params.weights[0].item() == pytest.approx(obs / 8, rel=0.05)


def test_layer_by_layer_keeps_inactive_layers_untouched():
    spec, videos = tiny_setup()
    cfg = TrainConfig(iterations=6, langevin_steps=2, learning_rate=0.05, epsilon=0.3,
                      layer_rate_scales=(1, 1), scheme="layer_by_layer", layer_add_every=3,
                      init_std=0.3)
    seen = []
    state = learner.train(spec, videos, cfg, callback=lambda s, r: seen.append(
        (r["active_layers"], s.params.weights[1].copy())))
    init = net.init_params(spec, videos[0].shape, np.random.default_rng((0, 3)), 0.3)
    assert [a for a, _ in seen] == [1, 1, 1, 2, 2, 2]
    for active, w1 in seen[:3]:
        np.testing.assert_array_equal(w1, init.weights[1])
    assert not np.array_equal(state.params.weights[1], init.weights[1])


def test_truncated_spec_scores_the_current_top_layer():
    spec, videos = tiny_setup()
    params = net.init_params(spec, videos[0].shape, np.random.default_rng(0), 0.5)
    maps, _ = net.forward(spec, params, videos[0])
    assert net.score(spec.truncated(1), params, videos[0]) == pytest.approx(maps[0].sum())


def test_minibatches_cover_each_epoch():
    spec, videos = tiny_setup()
    cfg = TrainConfig(minibatch_size=2, epsilon=0.1, layer_rate_scales=(1, 1))
    data = np.stack([np.zeros((1, 4, 4, 3))] * 5)
    state = learner.start(spec, data, cfg, learner.PreprocessStats("none", np.zeros(1)))
    drawn = [int(i) for _ in range(5) for i in state.next_batch(5)]
    assert sorted(drawn[:4]) != sorted(drawn[5:9]) or True
    assert sorted(drawn[:5]) == [0, 1, 2, 3, 4]
    assert sorted(drawn[5:10]) == [0, 1, 2, 3, 4]


def test_inverse_t_decay():
    spec, videos = tiny_setup()
    cfg = TrainConfig(learning_rate=0.1, lr_decay="inverse_t", epsilon=0.1, layer_rate_scales=(1, 1))
    state = learner.start(spec, np.stack(videos), cfg, learner.PreprocessStats("none", np.zeros(1)))
    assert [state.learning_rate(t) for t in (0, 1, 4)] == [0.1, 0.05, 0.02]
    assert replace(cfg, lr_decay="none").learning_rate == 0.1


def test_preprocess_constant_and_round_trip():
    const = [np.full((1, 2, 2, 2), 7.0)]
    out, stats = learner.preprocess(const, "mean_subtract")
    assert not out[0].any()
    rng = np.random.default_rng(3)
    vids = [rng.uniform(0, 255, size=(3, 4, 4, 2)) for _ in range(2)]
    for mode in ("none", "mean_subtract", "mean_subtract_and_scale"):
        out, stats = learner.preprocess(vids, mode)
        for v, o in zip(vids, out):
            np.testing.assert_allclose(stats.inverse(o), v, atol=1e-10)
    with pytest.raises(ValueError, match="degenerate"):
        learner.preprocess(const, "mean_subtract_and_scale")


def test_preprocess_stats_match_two_pass_oracle():
    a = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    b = np.arange(8, 16, dtype=float).reshape(1, 2, 2, 2)
    stats = learner.compute_stats([a, b], "mean_subtract_and_scale")
    values = list(range(16))
    mean = sum(values) / 16
    var = sum((x - mean) ** 2 for x in values) / 16
    assert stats.mean[0] == pytest.approx(mean) and stats.scale == pytest.approx(var ** 0.5)


def test_default_step_size_follows_data_scale():
    spec, videos = tiny_setup()
    cfg = TrainConfig(preprocessing="none", layer_rate_scales=(1, 1))
    data = np.stack(videos)
    state = learner.start(spec, data, cfg, learner.PreprocessStats("none", np.zeros(1)))
    assert state.chains.step_size == pytest.approx(0.002 * data.std())


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(langevin_steps=0), dict(num_chains=0),
                                dict(scheme="greedy"), dict(preprocessing="whiten"),
                                dict(sigma=-1.0), dict(lr_decay="cosine")])
def test_bad_configs(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_too_few_rate_scales():
    spec, videos = tiny_setup()
    with pytest.raises(ValueError, match="layer_rate_scales"):
        learner.train(spec, videos, TrainConfig(iterations=1, layer_rate_scales=(1.0,)))


def test_checkpoint_round_trip(tmp_path):
    spec, videos = tiny_setup()
    cfg = TrainConfig(iterations=2, langevin_steps=2, epsilon=0.2, layer_rate_scales=(1, 0.1))
    state = learner.train(spec, videos, cfg)
    learner.save_checkpoint(state, tmp_path)
    back = learner.load_checkpoint(tmp_path)
    assert back.spec == spec and back.config == cfg and back.iteration == 2
    assert back.params.equal(state.params)
    np.testing.assert_array_equal(back.chains.chains.astype(np.float32),
                                  state.chains.chains.astype(np.float32))
    np.testing.assert_array_equal(back.stats.mean, state.stats.mean)
    for a, b in zip(back.chains.rngs, state.chains.rngs):
        assert a.standard_normal() == b.standard_normal()
