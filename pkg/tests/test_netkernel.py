"""Batched field kernel vs the expression-graph oracle, both engines."""

import numpy as np
import pytest

from pinnbalance.expr import Evaluator, evaluate
from pinnbalance.netkernel import (
    LAP_LEVEL,
    LAPLACIAN,
    PURE,
    NetKernel,
    available_engines,
    engine_name,
)
from pinnbalance.network import (
    MlpConfig,
    NormStats,
    build_network_expr,
    init_params,
    input_derivative,
    param_names,
)

ENGINES = available_engines()


def make_case(activation="sin", seed=0, width=4, hidden=2):
    cfg = MlpConfig(2, 1, hidden_layers=hidden, width=width, activation=activation)
    stats = NormStats(mean=np.array([0.3, -0.2]), std=np.array([1.7, 0.9]))
    flat = init_params(cfg, seed).flat()
    X = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(6, 2))
    return cfg, stats, flat, X


def oracle_levels(cfg, stats, flat, X, orders_list):
    """Evaluate the named derivative stack per point via the symbolic graph."""
    outputs, _ = build_network_expr(cfg, stats)
    exprs = [input_derivative(outputs[0], o) for o in orders_list]
    names = param_names(cfg)
    rows = []
    for ex in exprs:
        row = []
        for x, y in X:
            b = dict(zip(names, flat))
            b.update(x=x, y=y)
            row.append(evaluate(ex, b))
        rows.append(row)
    return np.array(rows)


PURE_ORDERS = [
    (0, 0),
    (1, 0), (0, 1),
    (2, 0), (0, 2),
    (3, 0), (0, 3),
    (4, 0), (0, 4),
]


@pytest.mark.parametrize("engine", ENGINES)
@pytest.mark.parametrize("activation", ["sin", "tanh", "elu"])
def test_pure_stack_matches_symbolic_oracle(engine, activation):
    cfg, stats, flat, X = make_case(activation)
    kern = NetKernel(cfg, stats, engine=engine)
    run = kern.evaluate(flat, X, order=4, mode=PURE)
    want = oracle_levels(cfg, stats, flat, X, PURE_ORDERS)
    assert run.fields.shape == (9, 6)
    np.testing.assert_allclose(run.fields, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("engine", ENGINES)
def test_laplacian_stack_matches_symbolic_oracle(engine):
    cfg, stats, flat, X = make_case("tanh", seed=3)
    kern = NetKernel(cfg, stats, engine=engine)
    run = kern.evaluate(flat, X, order=2, mode=LAPLACIAN)
    want = oracle_levels(cfg, stats, flat, X, [(0, 0), (1, 0), (0, 1)])
    lap = oracle_levels(cfg, stats, flat, X, [(2, 0), (0, 2)]).sum(axis=0)
    assert run.fields.shape == (4, 6)
    np.testing.assert_allclose(run.fields[:3], want, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(run.fields[LAP_LEVEL], lap, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("engine", ENGINES)
def test_vjp_matches_symbolic_gradient(engine):
    cfg, stats, flat, X = make_case("sin", seed=5)
    kern = NetKernel(cfg, stats, engine=engine)
    run = kern.evaluate(flat, X, order=2, mode=PURE)
    rng = np.random.default_rng(7)
    seeds = rng.normal(size=(5, X.shape[0]))
    got = run.vjp(seeds)

    outputs, _ = build_network_expr(cfg, stats)
    orders = PURE_ORDERS[:5]
    exprs = [input_derivative(outputs[0], o) for o in orders]
    names = param_names(cfg)
    want = np.zeros(cfg.n_params)
    for lev, ex in enumerate(exprs):
        ev = Evaluator(ex)
        for i, (x, y) in enumerate(X):
            b = dict(zip(names, flat))
            b.update(x=x, y=y)
            want += seeds[lev, i] * np.asarray(ev.gradient(b, names))
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("engine", ENGINES)
def test_vjp_accepts_level_prefix(engine):
    cfg, stats, flat, X = make_case("tanh", seed=2)
    kern = NetKernel(cfg, stats, engine=engine)
    run = kern.evaluate(flat, X, order=2, mode=PURE)
    seeds = np.zeros((5, X.shape[0]))
    seeds[0] = 1.0
    full = run.vjp(seeds)
    run2 = kern.evaluate(flat, X, order=2, mode=PURE)
    prefix = run2.vjp(np.ones((1, X.shape[0])))
    np.testing.assert_allclose(prefix, full, rtol=1e-13)


@pytest.mark.skipif(len(ENGINES) < 2, reason="single engine available")
def test_engines_agree_bit_for_bit_scale():
    cfg, stats, flat, X = make_case("sin", seed=9, width=8, hidden=3)
    runs = {}
    for engine in ENGINES:
        kern = NetKernel(cfg, stats, engine=engine)
        run = kern.evaluate(flat, X, order=4, mode=PURE)
        seeds = np.random.default_rng(1).normal(size=(9, X.shape[0]))
        runs[engine] = (run.fields.copy(), run.vjp(seeds))
    (fa, ga), (fb, gb) = runs.values()
    np.testing.assert_allclose(fa, fb, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-13)


def test_values_only_fast_path_matches_full_run():
    cfg, stats, flat, X = make_case("elu", seed=4)
    kern = NetKernel(cfg, stats)
    v = kern.values(flat, X)
    run = kern.evaluate(flat, X, order=1)
    np.testing.assert_allclose(v, run.fields[0], rtol=1e-14)


def test_normalization_applies_chain_rule_to_derivatives():
    # with (x - m) / s folded in, each d/dx_i picks up a 1/s_i factor
    cfg = MlpConfig(2, 1, hidden_layers=1, width=4, activation="sin")
    flat = init_params(cfg, 11).flat()
    mean = np.array([0.25, -0.5])
    std = np.array([2.0, 0.5])
    Z = np.random.default_rng(3).uniform(-1.0, 1.0, size=(4, 2))
    plain = NormStats(mean=np.zeros(2), std=np.ones(2))
    scaled = NormStats(mean=mean, std=std)
    r1 = NetKernel(cfg, plain).evaluate(flat, Z, order=2)
    r2 = NetKernel(cfg, scaled).evaluate(flat, Z * std + mean, order=2)
    np.testing.assert_allclose(r2.fields[0], r1.fields[0], rtol=1e-13)
    np.testing.assert_allclose(r2.fields[1], r1.fields[1] / std[0], rtol=1e-13)
    np.testing.assert_allclose(r2.fields[2], r1.fields[2] / std[1], rtol=1e-13)
    np.testing.assert_allclose(r2.fields[3], r1.fields[3] / std[0] ** 2, rtol=1e-13)
    np.testing.assert_allclose(r2.fields[4], r1.fields[4] / std[1] ** 2, rtol=1e-13)


def test_stale_vjp_raises_after_workspace_reuse():
    cfg, stats, flat, X = make_case()
    kern = NetKernel(cfg, stats)
    first = kern.evaluate(flat, X, order=1)
    kern.evaluate(flat, X, order=1)
    with pytest.raises(RuntimeError, match="reused"):
        first.vjp(np.ones((3, X.shape[0])))


def test_value_only_run_refuses_vjp():
    cfg, stats, flat, X = make_case()
    kern = NetKernel(cfg, stats)
    run = kern.evaluate(flat, X, order=0, with_vjp=False)
    with pytest.raises(RuntimeError, match="value-only"):
        run.vjp(np.ones((1, X.shape[0])))


def test_rejects_bad_inputs():
    cfg, stats, flat, X = make_case()
    kern = NetKernel(cfg, stats)
    with pytest.raises(ValueError, match="parameters"):
        kern.evaluate(flat[:-1], X, order=1)
    with pytest.raises(ValueError, match=r"\(n, 2\)"):
        kern.evaluate(flat, X[:, :1], order=1)
    with pytest.raises(ValueError, match="laplacian"):
        kern.evaluate(flat, X, order=1, mode=LAPLACIAN)
    with pytest.raises(ValueError, match="order"):
        kern.evaluate(flat, X, order=5)


def test_engine_selection_and_reporting():
    assert engine_name() in ENGINES
    cfg, stats, _, _ = make_case()
    for engine in ENGINES:
        assert NetKernel(cfg, stats, engine=engine).engine == engine
    with pytest.raises(ValueError):
        NetKernel(cfg, stats, engine="gpu")


def test_flat_snapshot_is_defensive():
    # mutating the parameter vector after evaluate must not change the run
    cfg, stats, flat, X = make_case()
    kern = NetKernel(cfg, stats)
    run = kern.evaluate(flat, X, order=1)
    before = run.fields.copy()
    flat[:] = 0.0
    run2 = kern.evaluate(flat, X, order=1)
    assert not np.allclose(before, run2.fields)
    np.testing.assert_array_equal(before, run.fields)
