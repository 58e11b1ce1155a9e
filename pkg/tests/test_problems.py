"""Tests for target fields, loss algebra, and the two training problems."""

import csv

import numpy as np
import pytest

from pinnbalance.netkernel import LAP_LEVEL, NetKernel, level_index
from pinnbalance.network import MlpConfig, NormStats, init_params, substream
from pinnbalance.problems import (
    PoissonProblem,
    SobolevProblem,
    SobolevTarget,
    ToneTarget,
    pure_tone,
    relative_l1,
    relative_l2,
    sobolev_level_scales,
    sobolev_losses,
    sobolev_objective_levels,
    sobolev_residuals,
    write_field_csv,
)


def richardson_partial(f, X, beta, h=1e-2):
    """Richardson-extrapolated central difference for a pure partial."""

    def stencil(step):
        a, b = beta
        axis, order = (0, a) if a > 0 else (1, b)
        pts = X.copy()
        if order == 0:
            return f(pts)
        # central difference coefficients for orders 1..4
        offsets_weights = {
            1: [(-1, -0.5), (1, 0.5)],
            2: [(-1, 1.0), (0, -2.0), (1, 1.0)],
            3: [(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
            4: [(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
        }[order]
        acc = np.zeros(X.shape[0])
        for off, w in offsets_weights:
            shifted = X.copy()
            shifted[:, axis] = X[:, axis] + off * step
            acc += w * f(shifted)
        return acc / step**order

    coarse = stencil(h)
    fine = stencil(h / 2.0)
    return (4.0 * fine - coarse) / 3.0


def central_difference(f, x, index, h):
    """Richardson-extrapolated central difference along one coordinate."""

    def slope(step):
        xp = x.copy()
        xp[index] += step
        xm = x.copy()
        xm[index] -= step
        return (f(xp) - f(xm)) / (2.0 * step)

    return (4.0 * slope(h / 2.0) - slope(h)) / 3.0


class TestToneTarget:
    def make_target(self):
        return ToneTarget(
            ax=[2.0, -1.5],
            ay=[0.7, 3.0],
            phx=[0.3, 1.1],
            phy=[2.0, 0.4],
            lx=[2, 4],
            ly=[3, 1],
            length=2.0 * np.pi,
        )

    def test_value_matches_direct_formula(self):
        t = self.make_target()
        rng = np.random.default_rng(0)
        X = rng.uniform(0.0, 2.0 * np.pi, size=(40, 2))
        expected = np.zeros(40)
        for i in range(t.n_modes):
            kx = 2.0 * np.pi * t.lx[i] / t.length
            ky = 2.0 * np.pi * t.ly[i] / t.length
            expected += (
                t.ax[i] * np.cos(kx * X[:, 0] + t.phx[i])
                * t.ay[i] * np.sin(ky * X[:, 1] + t.phy[i])
            )
        np.testing.assert_allclose(t(X), expected, rtol=1e-14)

    @pytest.mark.parametrize(
        "beta", [(1, 0), (0, 1), (2, 0), (0, 2), (3, 0), (0, 3), (4, 0), (0, 4)]
    )
    def test_derivatives_match_finite_differences(self, beta):
        t = self.make_target()
        rng = np.random.default_rng(7)
        X = rng.uniform(0.5, 5.5, size=(25, 2))
        fd = richardson_partial(t, X, beta)
        exact = t.derivative(X, beta)
        scale = np.abs(exact).max()
        np.testing.assert_allclose(exact, fd, atol=1e-4 * max(scale, 1.0))

    def test_stack_layout_matches_individual_derivatives(self):
        t = self.make_target()
        rng = np.random.default_rng(3)
        X = rng.uniform(0.0, 2.0 * np.pi, size=(15, 2))
        stack = t.stack(X, order=3)
        assert stack.shape == (7, 15)
        np.testing.assert_array_equal(stack[0], t.derivative(X, (0, 0)))
        for j in range(1, 4):
            np.testing.assert_array_equal(
                stack[level_index(j, 0)], t.derivative(X, (j, 0))
            )
            np.testing.assert_array_equal(
                stack[level_index(j, 1)], t.derivative(X, (0, j))
            )

    def test_mismatched_mode_arrays_rejected(self):
        with pytest.raises(ValueError, match="share one length"):
            ToneTarget(
                ax=[1.0, 2.0], ay=[1.0], phx=[0.0], phy=[0.0],
                lx=[1], ly=[1], length=2.0 * np.pi,
            )

    def test_max_wavenumber(self):
        assert self.make_target().max_wavenumber() == 4


class TestSobolevTarget:
    def test_draw_is_deterministic_per_seed(self):
        a = SobolevTarget.draw(n_modes=5, seed=11)
        b = SobolevTarget.draw(n_modes=5, seed=11)
        c = SobolevTarget.draw(n_modes=5, seed=12)
        np.testing.assert_array_equal(a.ax, b.ax)
        np.testing.assert_array_equal(a.lx, b.lx)
        assert not np.array_equal(a.ax, c.ax)

    def test_draw_respects_parameter_ranges(self):
        t = SobolevTarget.draw(n_modes=64, seed=5)
        assert np.all((t.ax >= -5.0) & (t.ax <= 5.0))
        assert np.all((t.ay >= -5.0) & (t.ay <= 5.0))
        assert np.all((t.phx >= 0.0) & (t.phx <= 2.0 * np.pi))
        assert np.all((t.lx >= 1) & (t.lx <= 5))
        assert np.all((t.ly >= 1) & (t.ly <= 5))

    def test_out_of_range_parameters_rejected(self):
        with pytest.raises(ValueError, match="amplitudes"):
            SobolevTarget(
                ax=[9.0], ay=[1.0], phx=[0.0], phy=[0.0],
                lx=[1], ly=[1], length=2.0 * np.pi,
            )
        with pytest.raises(ValueError, match="phases"):
            SobolevTarget(
                ax=[1.0], ay=[1.0], phx=[-1.0], phy=[0.0],
                lx=[1], ly=[1], length=2.0 * np.pi,
            )
        with pytest.raises(ValueError, match="length scales"):
            SobolevTarget(
                ax=[1.0], ay=[1.0], phx=[0.0], phy=[0.0],
                lx=[7], ly=[1], length=2.0 * np.pi,
            )


class TestPureTone:
    def test_is_product_of_sines(self):
        k0 = 4
        t = pure_tone(k0)
        rng = np.random.default_rng(2)
        X = rng.uniform(0.0, 2.0 * np.pi, size=(30, 2))
        expected = np.sin(k0 * X[:, 0]) * np.sin(k0 * X[:, 1])
        np.testing.assert_allclose(t(X), expected, atol=1e-14)
        assert t.max_wavenumber() == k0


class TestErrorNorms:
    def test_relative_l2_worked_example(self):
        true = np.array([3.0, 4.0])          # norm 5
        pred = np.array([3.0, 4.0 + 1.0])    # difference norm 1
        assert relative_l2(pred, true) == pytest.approx(0.2)

    def test_relative_l2_zero_at_equality(self):
        x = np.random.default_rng(0).normal(size=(8, 8))
        assert relative_l2(x, x) == 0.0

    def test_relative_l2_rejects_zero_reference(self):
        with pytest.raises(ValueError, match="zero norm"):
            relative_l2(np.ones(3), np.zeros(3))

    def test_relative_l1_worked_example(self):
        coeff = np.array([1.0, -2.0, 1.0])       # abs sum 4
        coeff_hat = np.array([1.5, -2.0, 0.5])   # abs diff sum 1
        assert relative_l1(coeff_hat, coeff) == pytest.approx(0.25)

    def test_relative_l1_rejects_zero_reference(self):
        with pytest.raises(ValueError, match="zero norm"):
            relative_l1(np.ones(2), np.zeros(2))


class TestSobolevLossAlgebra:
    def test_level_scales_layout(self):
        xi_hat = np.array([0.5, 0.25])
        xi_true = np.array([1.0, 2.0])
        s_net, s_tgt = sobolev_level_scales(xi_hat, xi_true, order=2)
        np.testing.assert_array_equal(s_net, [1.0, 0.5, 0.5, 0.25, 0.25])
        np.testing.assert_array_equal(s_tgt, [1.0, 1.0, 1.0, 2.0, 2.0])

    def test_residuals_definition(self):
        rng = np.random.default_rng(4)
        fields = rng.normal(size=(5, 9))
        target = rng.normal(size=(5, 9))
        xi_hat = np.array([0.3, 0.7])
        xi_true = np.array([1.0, 1.0])
        E, s_net = sobolev_residuals(fields, target, xi_hat, xi_true, order=2)
        s_net_ref, s_tgt_ref = sobolev_level_scales(xi_hat, xi_true, 2)
        np.testing.assert_allclose(
            E, s_net_ref[:, None] * fields - s_tgt_ref[:, None] * target
        )
        np.testing.assert_array_equal(s_net, s_net_ref)

    def test_losses_group_level_pairs(self):
        rng = np.random.default_rng(5)
        E = rng.normal(size=(5, 12))
        losses = sobolev_losses(E, order=2)
        assert losses.shape == (3,)
        np.testing.assert_allclose(losses[0], np.mean(E[0] ** 2))
        np.testing.assert_allclose(losses[1], np.mean(E[1] ** 2 + E[2] ** 2))
        np.testing.assert_allclose(losses[2], np.mean(E[3] ** 2 + E[4] ** 2))

    def test_objective_levels(self):
        assert sobolev_objective_levels(0) == [0]
        assert sobolev_objective_levels(1) == [1, 2]
        assert sobolev_objective_levels(3) == [5, 6]


def make_sobolev(order=2, grid_n=16, seed=3, n_modes=2, width=8, depth=2):
    target = SobolevTarget.draw(n_modes=n_modes, seed=seed)
    problem = SobolevProblem(target, grid_n=grid_n, seed=seed, order=order)
    cfg = MlpConfig(2, 1, depth, width, "sin")
    kern = NetKernel(cfg, problem.norm_stats())
    problem.bind(kern)
    flat = init_params(cfg, seed=seed).flat()
    return problem, kern, flat


class TestSobolevProblem:
    def test_train_test_split_partitions_grid(self):
        problem, _, _ = make_sobolev()
        n = problem.grid_points.shape[0]
        assert problem.train_points.shape[0] == n // 2
        assert problem.test_points.shape[0] == n - n // 2
        combined = np.concatenate([problem.train_points, problem.test_points])
        key = np.lexsort((combined[:, 1], combined[:, 0]))
        grid_key = np.lexsort((problem.grid_points[:, 1], problem.grid_points[:, 0]))
        np.testing.assert_array_equal(
            combined[key], problem.grid_points[grid_key]
        )

    def test_split_is_seed_deterministic(self):
        a, _, _ = make_sobolev(seed=9)
        b, _, _ = make_sobolev(seed=9)
        c, _, _ = make_sobolev(seed=10)
        np.testing.assert_array_equal(a.train_points, b.train_points)
        assert not np.array_equal(a.train_points, c.train_points)

    def test_losses_match_manual_recomputation(self):
        problem, kern, flat = make_sobolev()
        xi_hat = problem.initial_task_params()
        lam = np.array([1.0, 2.0, 0.5])
        idx = np.arange(0, problem.n_train, 3)
        out = problem.batch_eval(flat, xi_hat, idx, lam)

        X = problem.train_points[idx]
        run = kern.evaluate(flat, X, order=problem.order)
        T = problem.target.stack(X, problem.order)
        E = np.array(run.fields, copy=True)
        for k in range(1, problem.order + 1):
            for axis in range(2):
                E[level_index(k, axis)] *= xi_hat[k - 1]
        E -= T  # xi_true is all ones
        expected = np.array([
            np.mean(E[0] ** 2),
            np.mean(E[1] ** 2 + E[2] ** 2),
            np.mean(E[3] ** 2 + E[4] ** 2),
        ])
        np.testing.assert_allclose(out.losses, expected, rtol=1e-12)

    def test_weighted_gradient_matches_finite_differences(self):
        problem, _, flat = make_sobolev()
        xi_hat = np.array([0.6, 0.4])
        lam = np.array([0.7, 1.3, 0.9])
        idx = np.arange(64)
        out = problem.batch_eval(flat, xi_hat, idx, lam)

        def total_loss(f):
            return float(lam @ problem.batch_eval(f, xi_hat, idx, lam).losses)

        rng = np.random.default_rng(0)
        probe = rng.choice(flat.shape[0], size=12, replace=False)
        for p in probe:
            fd = central_difference(total_loss, flat, p, h=1e-3)
            assert out.grad[p] == pytest.approx(fd, rel=5e-6, abs=1e-9)

    def test_task_gradient_matches_finite_differences(self):
        problem, _, flat = make_sobolev()
        xi_hat = np.array([0.6, 0.4])
        lam = np.array([0.7, 1.3, 0.9])
        idx = np.arange(64)
        out = problem.batch_eval(flat, xi_hat, idx, lam)
        h = 1e-7
        for k in range(problem.n_task_params):
            xp = xi_hat.copy()
            xp[k] += h
            xm = xi_hat.copy()
            xm[k] -= h
            lp = lam @ problem.batch_eval(flat, xp, idx, lam).losses
            lm = lam @ problem.batch_eval(flat, xm, idx, lam).losses
            fd = (lp - lm) / (2.0 * h)
            assert out.task_grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_capture_returns_per_objective_gradients(self):
        problem, _, flat = make_sobolev()
        xi_hat = np.array([0.5, 0.5])
        lam = np.array([1.0, 2.0, 3.0])
        idx = np.arange(48)
        cap = problem.batch_eval(flat, xi_hat, idx, lam, capture=True)
        plain = problem.batch_eval(flat, xi_hat, idx, lam)
        assert cap.objective_grads.shape == (3, flat.shape[0])
        np.testing.assert_allclose(
            lam @ cap.objective_grads, cap.grad, rtol=1e-12, atol=1e-14
        )
        np.testing.assert_allclose(cap.grad, plain.grad, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(
            lam[1:] * cap.task_grad_raw, cap.task_grad, rtol=1e-12
        )

    def test_inactive_objectives_are_dropped(self):
        problem, _, flat = make_sobolev()
        xi_hat = np.array([0.5, 0.5])
        lam = np.ones(3)
        idx = np.arange(32)
        active = np.array([True, False, True])
        out = problem.batch_eval(flat, xi_hat, idx, lam, active=active)
        assert out.losses[1] == 0.0
        assert out.losses[0] > 0.0 and out.losses[2] > 0.0
        assert out.task_grad[0] == 0.0
        cap = problem.batch_eval(
            flat, xi_hat, idx, lam, active=active, capture=True
        )
        np.testing.assert_array_equal(cap.objective_grads[1], 0.0)
        # the masked weighted gradient only combines the active objectives
        np.testing.assert_allclose(
            out.grad,
            cap.objective_grads[0] + cap.objective_grads[2],
            rtol=1e-9,
            atol=1e-12,
        )

    def test_metrics_near_zero_when_network_is_replaced_by_truth(self):
        problem, kern, flat = make_sobolev()
        xi_hat = np.ones(problem.order)
        m = problem.metrics(flat, xi_hat)
        manual = relative_l2(
            kern.values(flat, problem.test_points),
            problem.target(problem.test_points),
        )
        assert m["rel_l2"] == pytest.approx(manual, rel=1e-12)
        assert m["rel_l1_coeff"] == 0.0

    def test_energy_integrals_closed_form_for_pure_tone(self):
        # u = sin(k0 x) sin(k0 y): the squared field integrates to pi^2 and
        # each pure k-th derivative to k0^(2k) pi^2 over [0, 2 pi]^2.
        k0 = 4
        problem = SobolevProblem(pure_tone(k0), grid_n=64, seed=0, order=3)
        ints = problem.energy_integrals()
        expected = [np.pi**2] + [
            2.0 * float(k0) ** (2 * k) * np.pi**2 for k in range(1, 4)
        ]
        np.testing.assert_allclose(ints.values, expected, rtol=1e-12)

    def test_objective_names_and_task_ownership(self):
        problem, _, _ = make_sobolev(order=3)
        assert problem.objective_names == ["fit", "d1", "d2", "d3"]
        np.testing.assert_array_equal(problem.task_objective, [1, 2, 3])

    def test_order_below_one_rejected(self):
        with pytest.raises(ValueError, match="at least 1"):
            SobolevProblem(pure_tone(2), grid_n=8, order=0)


def make_poisson(n_interior=64, n_boundary=16, grid_n=12, seed=5, width=8):
    problem = PoissonProblem(
        omega=6.0, n_interior=n_interior, n_boundary=n_boundary,
        grid_n=grid_n, seed=seed,
    )
    cfg = MlpConfig(2, 1, 2, width, "tanh")
    kern = NetKernel(cfg, problem.norm_stats())
    problem.bind(kern)
    flat = init_params(cfg, seed=seed).flat()
    return problem, kern, flat


class TestPoissonProblem:
    def test_forcing_is_laplacian_of_solution(self):
        problem, _, _ = make_poisson()
        rng = np.random.default_rng(1)
        X = rng.uniform(0.1, 0.9, size=(40, 2))
        lap_fd = richardson_partial(problem.solution, X, (2, 0), h=1e-3)
        lap_fd += richardson_partial(problem.solution, X, (0, 2), h=1e-3)
        np.testing.assert_allclose(problem.forcing(X), lap_fd, atol=1e-6)

    def test_boundary_points_lie_on_edges(self):
        problem, _, _ = make_poisson(n_boundary=32)
        B = problem.boundary_points
        assert B.shape == (32, 2)
        on_edge = (
            (B[:, 0] == 0.0) | (B[:, 0] == 1.0)
            | (B[:, 1] == 0.0) | (B[:, 1] == 1.0)
        )
        assert on_edge.all()
        # midpoint spacing avoids double-counting corners
        assert np.unique(B, axis=0).shape[0] == 32
        for edge_mask in (B[:, 1] == 0.0, B[:, 1] == 1.0,
                          B[:, 0] == 0.0, B[:, 0] == 1.0):
            assert edge_mask.sum() == 8

    def test_uneven_boundary_count_rejected(self):
        with pytest.raises(ValueError, match="4 edges"):
            PoissonProblem(n_boundary=30, n_interior=16, grid_n=8)

    def test_interior_sampling_is_seeded(self):
        a, _, _ = make_poisson(seed=3)
        b, _, _ = make_poisson(seed=3)
        c, _, _ = make_poisson(seed=4)
        np.testing.assert_array_equal(a.interior_points, b.interior_points)
        assert not np.array_equal(a.interior_points, c.interior_points)
        assert np.all((a.interior_points >= 0.0) & (a.interior_points <= 1.0))

    def test_losses_match_manual_recomputation(self):
        problem, kern, flat = make_poisson()
        lam = np.array([1.0, 3.0])
        idx = np.arange(0, 64, 2)
        out = problem.batch_eval(flat, np.zeros(0), idx, lam)

        X = problem.interior_points[idx]
        run = kern.evaluate(flat, X, order=2, mode="laplacian")
        res = run.fields[LAP_LEVEL] - problem.forcing(X)
        run_b = kern.evaluate(flat, problem.boundary_points, order=0)
        res_b = run_b.fields[0] - problem.solution(problem.boundary_points)
        np.testing.assert_allclose(out.losses[0], np.mean(res**2), rtol=1e-12)
        np.testing.assert_allclose(out.losses[1], np.mean(res_b**2), rtol=1e-12)

    def test_weighted_gradient_matches_finite_differences(self):
        problem, _, flat = make_poisson()
        lam = np.array([0.8, 2.5])
        idx = np.arange(32)
        out = problem.batch_eval(flat, np.zeros(0), idx, lam)

        def total_loss(f):
            return float(lam @ problem.batch_eval(f, np.zeros(0), idx, lam).losses)

        rng = np.random.default_rng(0)
        probe = rng.choice(flat.shape[0], size=12, replace=False)
        for p in probe:
            fd = central_difference(total_loss, flat, p, h=1e-3)
            assert out.grad[p] == pytest.approx(fd, rel=5e-6, abs=1e-8)

    def test_batch_index_selects_interior_only(self):
        problem, _, flat = make_poisson()
        lam = np.ones(2)
        full = problem.batch_eval(flat, np.zeros(0), None, lam)
        sub = problem.batch_eval(flat, np.zeros(0), np.arange(16), lam)
        # boundary objective is identical regardless of the interior batch
        assert sub.losses[1] == full.losses[1]
        assert sub.losses[0] != full.losses[0]

    def test_active_mask_disables_objectives(self):
        problem, _, flat = make_poisson()
        lam = np.ones(2)
        idx = np.arange(16)
        only_boundary = problem.batch_eval(
            flat, np.zeros(0), idx, lam, active=np.array([False, True]),
            capture=True,
        )
        assert only_boundary.losses[0] == 0.0
        np.testing.assert_array_equal(only_boundary.objective_grads[0], 0.0)
        assert only_boundary.losses[1] > 0.0

    def test_metrics_report_grid_relative_error(self):
        problem, kern, flat = make_poisson()
        m = problem.metrics(flat, np.zeros(0))
        manual = relative_l2(
            kern.values(flat, problem.grid_points),
            problem.solution(problem.grid_points),
        )
        assert m["rel_l2"] == pytest.approx(manual, rel=1e-12)
        assert np.isnan(m["rel_l1_coeff"])

    def test_grid_field_shapes(self):
        problem, kern, flat = make_poisson(grid_n=10)
        assert problem.grid_field(flat).shape == (10, 10)
        truth = problem.target_grid_field()
        assert truth.shape == (10, 10)
        np.testing.assert_allclose(
            truth.ravel(), problem.solution(problem.grid_points)
        )


class TestGroundTruthExport:
    def test_field_csv_round_trips_exact_floats(self, tmp_path):
        rng = np.random.default_rng(8)
        points = rng.normal(size=(9, 2))
        values = rng.normal(size=9)
        path = tmp_path / "field.csv"
        write_field_csv(path, points, values)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "y", "value"]
        body = np.array([[float(c) for c in row] for row in rows[1:]])
        np.testing.assert_array_equal(body[:, :2], points)
        np.testing.assert_array_equal(body[:, 2], values)

    def test_export_covers_both_problem_kinds(self, tmp_path):
        from pinnbalance.problems import export_ground_truth

        sob, _, _ = make_sobolev(grid_n=8)
        sob_dir = tmp_path / "sob"
        sob_dir.mkdir()
        written = export_ground_truth(sob, sob_dir)
        names = {p.split("/")[-1] for p in map(str, written)}
        assert names == {"train_points.csv", "test_points.csv", "grid_truth.csv"}

        poi, _, _ = make_poisson(grid_n=6)
        poi_dir = tmp_path / "poi"
        poi_dir.mkdir()
        written = export_ground_truth(poi, poi_dir)
        names = {p.split("/")[-1] for p in map(str, written)}
        assert names == {
            "interior_points.csv", "boundary_points.csv", "grid_truth.csv",
        }
        with open(poi_dir / "grid_truth.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 36
