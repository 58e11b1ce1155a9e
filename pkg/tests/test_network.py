"""Network construction: parameters, initialization, expression graphs."""

import numpy as np
import pytest

from pinnbalance.expr import evaluate, gradient
from pinnbalance.network import (
    MlpConfig,
    MlpParams,
    NormStats,
    build_network_expr,
    fit_norm_stats,
    init_params,
    input_derivative,
    load_checkpoint,
    param_names,
    save_checkpoint,
    substream,
)


def small_config(activation="sin"):
    return MlpConfig(2, 1, hidden_layers=2, width=4, activation=activation)


def test_flat_roundtrip():
    cfg = small_config()
    p = init_params(cfg, seed=3)
    q = MlpParams.from_flat(cfg, p.flat())
    for a, b in zip(p.weights, q.weights):
        assert np.array_equal(a, b)
    for a, b in zip(p.biases, q.biases):
        assert np.array_equal(a, b)


def test_from_flat_rejects_wrong_length():
    cfg = small_config()
    with pytest.raises(ValueError, match="parameters"):
        MlpParams.from_flat(cfg, np.zeros(cfg.n_params + 1))


def test_param_names_match_flat_layout():
    cfg = MlpConfig(2, 1, hidden_layers=1, width=3, activation="tanh")
    names = param_names(cfg)
    assert len(names) == cfg.n_params
    p = init_params(cfg, seed=0)
    flat = p.flat()
    # spot-check a weight and a bias against the naming convention
    idx_w = names.index("w0_2_1")
    assert flat[idx_w] == p.weights[0][2, 1]
    idx_b = names.index("b1_0")
    assert flat[idx_b] == p.biases[1][0]


def test_init_is_deterministic_per_seed():
    cfg = small_config()
    a = init_params(cfg, seed=7).flat()
    b = init_params(cfg, seed=7).flat()
    c = init_params(cfg, seed=8).flat()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_init_scale_tracks_xavier():
    cfg = MlpConfig(2, 1, hidden_layers=3, width=64, activation="sin")
    p = init_params(cfg, seed=0)
    w = p.weights[1]  # 64x64 hidden layer, enough samples for a std estimate
    want = np.sqrt(2.0 / (64 + 64))
    assert np.std(w) == pytest.approx(want, rel=0.15)
    assert all(np.all(b == 0.0) for b in p.biases)


def test_tanh_gain_scales_weights():
    sin_cfg = MlpConfig(2, 1, hidden_layers=1, width=32, activation="sin")
    tanh_cfg = MlpConfig(2, 1, hidden_layers=1, width=32, activation="tanh")
    ws = init_params(sin_cfg, seed=0).weights[0]
    wt = init_params(tanh_cfg, seed=0).weights[0]
    assert np.allclose(wt, (5.0 / 3.0) * ws)


def test_substreams_are_independent():
    a = substream(0, "init").uniform(size=4)
    b = substream(0, "target").uniform(size=4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, substream(0, "init").uniform(size=4))


def test_substream_rejects_unknown_stream():
    with pytest.raises(KeyError):
        substream(0, "nonsense")


def test_fit_norm_stats_population_moments():
    pts = np.array([[0.0, 10.0], [2.0, 10.5], [4.0, 11.0]])
    stats = fit_norm_stats(pts)
    assert np.allclose(stats.mean, [2.0, 10.5])
    assert np.allclose(stats.std, pts.std(axis=0))


def test_norm_stats_rejects_degenerate_dimension():
    with pytest.raises(ValueError, match="dimension 1"):
        NormStats(mean=np.zeros(2), std=np.array([1.0, 0.0]))


def network_value(cfg, flat, x, y, stats=None):
    outputs, _ = build_network_expr(cfg, stats)
    bindings = dict(zip(param_names(cfg), flat))
    bindings["x"] = x
    bindings["y"] = y
    return evaluate(outputs[0], bindings)


def reference_forward(cfg, params, x, y, stats=None):
    """Plain numpy forward pass for cross-checking the expression graph."""
    act = {"sin": np.sin, "tanh": np.tanh}[cfg.activation]
    v = np.array([x, y], dtype=np.float64)
    if stats is not None:
        v = (v - stats.mean) / stats.std
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        v = act(w @ v + b)
    return float((params.weights[-1] @ v + params.biases[-1])[0])


@pytest.mark.parametrize("activation", ["sin", "tanh"])
def test_expression_graph_matches_numpy_forward(activation):
    cfg = small_config(activation)
    p = init_params(cfg, seed=5)
    got = network_value(cfg, p.flat(), 0.3, -0.8)
    want = reference_forward(cfg, p, 0.3, -0.8)
    assert got == pytest.approx(want, rel=1e-14)


def test_normalization_is_folded_into_graph():
    cfg = small_config()
    p = init_params(cfg, seed=2)
    stats = NormStats(mean=np.array([3.0, -1.0]), std=np.array([2.0, 0.5]))
    got = network_value(cfg, p.flat(), 4.0, 0.0, stats)
    want = reference_forward(cfg, p, 4.0, 0.0, stats)
    assert got == pytest.approx(want, rel=1e-13)


def test_parameter_gradient_matches_finite_differences():
    cfg = small_config()
    p = init_params(cfg, seed=1)
    flat = p.flat()
    names = param_names(cfg)
    outputs, _ = build_network_expr(cfg)
    out = outputs[0]
    pt = dict(zip(names, flat))
    pt.update(x=0.4, y=0.9)
    g = gradient(out, pt, names)
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in rng.choice(len(names), 8, replace=False):
        up, dn = dict(pt), dict(pt)
        up[names[i]] += h
        dn[names[i]] -= h
        fd = (evaluate(out, up) - evaluate(out, dn)) / (2 * h)
        assert g[i] == pytest.approx(fd, abs=1e-8, rel=1e-6)


def test_input_derivative_matches_finite_differences():
    cfg = small_config()
    p = init_params(cfg, seed=4)
    flat = p.flat()
    outputs, _ = build_network_expr(cfg)
    dxx = input_derivative(outputs[0], (2, 0))
    bindings = dict(zip(param_names(cfg), flat))
    bindings.update(x=0.25, y=-0.5)
    got = evaluate(dxx, bindings)

    def f(x):
        return network_value(cfg, flat, x, -0.5)

    h = 1e-4
    fd = (f(0.25 + h) - 2 * f(0.25) + f(0.25 - h)) / h**2
    assert got == pytest.approx(fd, rel=1e-5)


def test_mixed_derivative_order_is_symmetric():
    cfg = small_config()
    flat = init_params(cfg, seed=6).flat()
    outputs, _ = build_network_expr(cfg)
    dxy = input_derivative(outputs[0], (1, 1))
    bindings = dict(zip(param_names(cfg), flat))
    bindings.update(x=0.1, y=0.2)
    # build in the other axis order via two explicit calls
    dy = input_derivative(outputs[0], (0, 1))
    dyx = input_derivative(dy, (1, 0))
    assert evaluate(dxy, bindings) == pytest.approx(
        evaluate(dyx, bindings), rel=1e-14
    )


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_config("tanh")
    p = init_params(cfg, seed=9)
    stats = NormStats(mean=np.array([0.5, 0.25]), std=np.array([1.5, 2.0]))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, p, stats, extra={"epoch": 12})
    q, qstats, extra = load_checkpoint(path)
    assert q.config == cfg
    assert np.array_equal(q.flat(), p.flat())
    assert np.array_equal(qstats.mean, stats.mean)
    assert np.array_equal(qstats.std, stats.std)
    assert extra["epoch"] == 12


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"kind": "something-else"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
