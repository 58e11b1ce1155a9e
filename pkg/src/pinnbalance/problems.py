"""Benchmark problems with analytic ground truth.

Two tasks drive the weighting experiments:

* Derivative-matching regression ("sobolev"): fit a sinusoidal 2D target
  and its pure partial derivatives up to order 4, with one trainable scale
  coefficient per derivative order. Objective 0 is the plain function fit;
  objective k >= 1 penalizes both k-th pure partials.
* 2D Poisson equation ("poisson"): physics-informed training of
  lap(u) = f on the unit square with the manufactured solution
  u = cos(omega x) sin(omega y), one interior-residual objective and one
  boundary objective.

Targets expose every derivative in closed form, so losses, error norms, and
energy integrals all have exact references.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._netkernel_common import LAP_LEVEL, LAPLACIAN, PURE, level_index, n_levels
from .balancing import EnergyIntegrals, compute_energy_integrals
from .network import NormStats, fit_norm_stats, init_params, substream


# ---------------------------------------------------------------------------
# analytic targets


class ToneTarget:
    """Sum of product-of-sinusoid modes with closed-form derivatives.

    u(x, y) = sum_i ax_i cos(kx_i x + phx_i) * ay_i sin(ky_i y + phy_i)
    with kx_i = 2 pi lx_i / L. Differentiating shifts phases by pi/2 per
    order and scales by the wavenumber, so any pure partial is exact.
    """

    def __init__(self, ax, ay, phx, phy, lx, ly, length: float):
        self.ax = np.atleast_1d(np.asarray(ax, dtype=np.float64))
        self.ay = np.atleast_1d(np.asarray(ay, dtype=np.float64))
        self.phx = np.atleast_1d(np.asarray(phx, dtype=np.float64))
        self.phy = np.atleast_1d(np.asarray(phy, dtype=np.float64))
        self.lx = np.atleast_1d(np.asarray(lx, dtype=np.int64))
        self.ly = np.atleast_1d(np.asarray(ly, dtype=np.int64))
        self.length = float(length)
        m = self.ax.shape[0]
        for arr in (self.ay, self.phx, self.phy, self.lx, self.ly):
            if arr.shape[0] != m:
                raise ValueError("per-mode parameter arrays must share one length")

    @property
    def n_modes(self) -> int:
        return self.ax.shape[0]

    def derivative(self, X: np.ndarray, beta: tuple[int, int]) -> np.ndarray:
        """Exact pure partial d^(a+b) u / dx^a dy^b at points X (n, 2)."""
        a, b = beta
        X = np.asarray(X, dtype=np.float64)
        kx = 2.0 * np.pi * self.lx / self.length
        ky = 2.0 * np.pi * self.ly / self.length
        half = 0.5 * np.pi
        fx = (self.ax * kx**a) * np.cos(
            np.outer(X[:, 0], kx) + self.phx + a * half
        )
        fy = (self.ay * ky**b) * np.sin(
            np.outer(X[:, 1], ky) + self.phy + b * half
        )
        return np.einsum("nm,nm->n", fx, fy)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.derivative(X, (0, 0))

    def stack(self, X: np.ndarray, order: int) -> np.ndarray:
        """Target level stack [u, ux, uy, uxx, uyy, ...] up to a pure order."""
        nf = n_levels(order, PURE)
        out = np.empty((nf, X.shape[0]))
        out[0] = self.derivative(X, (0, 0))
        for j in range(1, order + 1):
            out[level_index(j, 0)] = self.derivative(X, (j, 0))
            out[level_index(j, 1)] = self.derivative(X, (0, j))
        return out

    def max_wavenumber(self) -> int:
        return int(max(self.lx.max(), self.ly.max()))


class SobolevTarget(ToneTarget):
    """Randomly drawn multi-mode target with validated parameter ranges."""

    AMPLITUDE_RANGE = (-5.0, 5.0)
    LENGTH_SCALES = (1, 5)

    def __init__(self, ax, ay, phx, phy, lx, ly, length: float, seed: int | None = None):
        super().__init__(ax, ay, phx, phy, lx, ly, length)
        lo, hi = self.AMPLITUDE_RANGE
        if ((self.ax < lo) | (self.ax > hi) | (self.ay < lo) | (self.ay > hi)).any():
            raise ValueError(f"amplitudes must lie in [{lo}, {hi}]")
        if ((self.phx < 0) | (self.phx > 2 * np.pi)).any() or (
            (self.phy < 0) | (self.phy > 2 * np.pi)
        ).any():
            raise ValueError("phases must lie in [0, 2 pi]")
        slo, shi = self.LENGTH_SCALES
        if ((self.lx < slo) | (self.lx > shi)).any() or (
            (self.ly < slo) | (self.ly > shi)
        ).any():
            raise ValueError(f"length scales must be integers in [{slo}, {shi}]")
        self.seed = seed

    @classmethod
    def draw(cls, n_modes: int, seed: int, length: float = 2.0 * np.pi):
        """Draw a random target from the seed's target substream."""
        rng = substream(seed, "target")
        lo, hi = cls.AMPLITUDE_RANGE
        slo, shi = cls.LENGTH_SCALES
        return cls(
            ax=rng.uniform(lo, hi, n_modes),
            ay=rng.uniform(lo, hi, n_modes),
            phx=rng.uniform(0.0, 2.0 * np.pi, n_modes),
            phy=rng.uniform(0.0, 2.0 * np.pi, n_modes),
            lx=rng.integers(slo, shi + 1, n_modes),
            ly=rng.integers(slo, shi + 1, n_modes),
            length=length,
            seed=seed,
        )


def pure_tone(k0: int, length: float = 2.0 * np.pi) -> ToneTarget:
    """The single mode sin(k0 x) sin(k0 y) used by the stiffness probe.

    With the default length 2 pi the mode's wavenumber equals k0. The
    cosine factor becomes a sine through its phase.
    """
    return ToneTarget(
        ax=[1.0], ay=[1.0], phx=[-0.5 * np.pi], phy=[0.0],
        lx=[k0], ly=[k0], length=length,
    )


# ---------------------------------------------------------------------------
# error norms


def relative_l2(pred: np.ndarray, true: np.ndarray) -> float:
    """||pred - true||_2 / ||true||_2 over flattened fields."""
    true = np.asarray(true, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    denom = float(np.linalg.norm(true))
    if denom == 0.0:
        raise ValueError("reference field has zero norm")
    return float(np.linalg.norm(pred - true)) / denom


def relative_l1(coeff_hat: np.ndarray, coeff: np.ndarray) -> float:
    """||coeff - coeff_hat||_1 / ||coeff||_1."""
    coeff = np.asarray(coeff, dtype=np.float64).ravel()
    coeff_hat = np.asarray(coeff_hat, dtype=np.float64).ravel()
    denom = float(np.abs(coeff).sum())
    if denom == 0.0:
        raise ValueError("reference coefficients have zero norm")
    return float(np.abs(coeff - coeff_hat).sum()) / denom


# ---------------------------------------------------------------------------
# loss algebra (pure functions of field stacks, shared by both problems)


@dataclass
class BatchResult:
    """Everything the training loop needs from one batch evaluation."""

    losses: np.ndarray                      # (K,) unweighted objective losses
    grad: np.ndarray                        # weight-combined shared gradient
    task_grad: np.ndarray                   # weight-scaled task-parameter gradient
    objective_grads: np.ndarray | None = None  # (K, P) unweighted, if captured
    task_grad_raw: np.ndarray | None = None    # unweighted task grads, if captured


def sobolev_level_scales(xi_hat, xi_true, order: int):
    """Per-level coefficient vectors (network scale, target scale).

    Level 0 carries the plain fit (scale 1); the two levels of derivative
    order k carry xi_hat_k on the network side and xi_true_k on the target
    side.
    """
    xi_hat = np.asarray(xi_hat, dtype=np.float64)
    xi_true = np.asarray(xi_true, dtype=np.float64)
    nf = n_levels(order, PURE)
    s_net = np.ones(nf)
    s_tgt = np.ones(nf)
    for k in range(1, order + 1):
        for axis in range(2):
            s_net[level_index(k, axis)] = xi_hat[k - 1]
            s_tgt[level_index(k, axis)] = xi_true[k - 1]
    return s_net, s_tgt


def sobolev_residuals(fields, target_stack, xi_hat, xi_true, order: int):
    """Scaled level residuals E = s_net * fields - s_tgt * target."""
    s_net, s_tgt = sobolev_level_scales(xi_hat, xi_true, order)
    return s_net[:, None] * fields - s_tgt[:, None] * target_stack, s_net


def sobolev_losses(residuals, order: int) -> np.ndarray:
    """Unweighted per-objective losses from the level residuals.

    Objective 0 is mean(E_0^2); objective k >= 1 is the batch mean of the
    sum of both squared k-th-order residual levels.
    """
    nb = residuals.shape[1]
    level_sums = np.einsum("ln,ln->l", residuals, residuals)
    losses = np.empty(order + 1)
    losses[0] = level_sums[0] / nb
    for k in range(1, order + 1):
        losses[k] = (
            level_sums[level_index(k, 0)] + level_sums[level_index(k, 1)]
        ) / nb
    return losses


def sobolev_objective_levels(k: int) -> list[int]:
    """Stack levels carrying objective k's residuals."""
    if k == 0:
        return [0]
    return [level_index(k, 0), level_index(k, 1)]


# ---------------------------------------------------------------------------
# problems


class SobolevProblem:
    """Derivative-matching regression with trainable scale coefficients.

    The domain grid (endpoint-free uniform nodes on [0, L]^2) is split
    50/50 into train and test point sets by a seeded permutation. One
    forward pass per batch serves all K+1 objectives, which live on levels
    of a single derivative stack.
    """

    kind = "sobolev"

    def __init__(
        self,
        target: ToneTarget,
        grid_n: int = 128,
        seed: int = 0,
        order: int = 4,
        xi_init: float = 0.5,
    ):
        if order < 1:
            raise ValueError("derivative order must be at least 1")
        self.target = target
        self.grid_n = int(grid_n)
        self.seed = int(seed)
        self.order = int(order)
        self.n_objectives = order + 1
        self.n_task_params = order
        self.xi_true = np.ones(order)
        self.xi_init = float(xi_init)
        self.nf = n_levels(order, PURE)

        length = target.length
        axis_nodes = np.linspace(0.0, length, self.grid_n, endpoint=False)
        gx, gy = np.meshgrid(axis_nodes, axis_nodes, indexing="ij")
        self.grid_points = np.column_stack([gx.ravel(), gy.ravel()])
        perm = substream(seed, "split").permutation(self.grid_points.shape[0])
        half = perm.shape[0] // 2
        self.train_points = np.ascontiguousarray(self.grid_points[perm[:half]])
        self.test_points = np.ascontiguousarray(self.grid_points[perm[half:]])
        self.n_train = self.train_points.shape[0]

        self._train_stack = target.stack(self.train_points, order)
        self._test_values = target(self.test_points)
        self._grid_values = target(self.grid_points).reshape(grid_n, grid_n)
        self._kern = None

    # -- trainer interface -------------------------------------------------

    @property
    def objective_names(self) -> list[str]:
        return ["fit"] + [f"d{k}" for k in range(1, self.order + 1)]

    def norm_stats(self) -> NormStats:
        return fit_norm_stats(self.train_points)

    def initial_task_params(self) -> np.ndarray:
        return np.full(self.n_task_params, self.xi_init)

    @property
    def task_objective(self) -> np.ndarray:
        """Objective index that owns each task parameter."""
        return np.arange(1, self.order + 1)

    def initial_shared_params(self, seed: int) -> np.ndarray:
        return init_params(self._kern.config, seed).flat()

    def bind(self, kern) -> None:
        """Attach the batched field evaluator used for loss evaluation."""
        self._kern = kern

    @property
    def kernel(self):
        return self._kern

    def batch_eval(
        self,
        flat: np.ndarray,
        xi_hat: np.ndarray,
        idx: np.ndarray,
        lam: np.ndarray,
        active: np.ndarray | None = None,
        capture: bool = False,
    ) -> BatchResult:
        X = self.train_points[idx] if idx is not None else self.train_points
        T = self._train_stack[:, idx] if idx is not None else self._train_stack
        nb = X.shape[0]
        run = self._kern.evaluate(flat, X, order=self.order, mode=PURE)
        E, s_net = sobolev_residuals(run.fields, T, xi_hat, self.xi_true, self.order)
        losses = sobolev_losses(E, self.order)
        if active is None:
            active = np.ones(self.n_objectives, dtype=bool)
        losses[~active] = 0.0

        # d loss_k / d xi_hat_k = (2/nb) sum(E * fields) over objective levels
        task_raw = np.zeros(self.n_task_params)
        for k in range(1, self.order + 1):
            if not active[k]:
                continue
            lv = sobolev_objective_levels(k)
            task_raw[k - 1] = (2.0 / nb) * float(np.sum(E[lv] * run.fields[lv]))
        task_grad = lam[1:] * task_raw

        if capture:
            objective_grads = np.zeros((self.n_objectives, flat.shape[0]))
            for k in range(self.n_objectives):
                if not active[k]:
                    continue
                lv = sobolev_objective_levels(k)
                seeds = np.zeros((lv[-1] + 1, nb))
                seeds[lv] = (2.0 / nb) * s_net[lv, None] * E[lv]
                objective_grads[k] = run.vjp(seeds)
            grad = lam @ objective_grads
            return BatchResult(losses, grad, task_grad, objective_grads, task_raw)

        weight = np.zeros(self.nf)
        for k in range(self.n_objectives):
            if not active[k]:
                continue
            for lv in sobolev_objective_levels(k):
                weight[lv] = lam[k] * s_net[lv]
        seeds = (2.0 / nb) * weight[:, None] * E
        grad = run.vjp(seeds)
        return BatchResult(losses, grad, task_grad)

    def metrics(self, flat: np.ndarray, xi_hat: np.ndarray) -> dict:
        values = self._kern.values(flat, self.test_points)
        return {
            "rel_l2": relative_l2(values, self._test_values),
            "rel_l1_coeff": relative_l1(xi_hat, self.xi_true),
        }

    # -- diagnostics hooks ---------------------------------------------------

    def grid_field(self, flat: np.ndarray) -> np.ndarray:
        """Network values on the full spectral grid, shaped (n, n)."""
        vals = self._kern.values(flat, self.grid_points)
        return vals.reshape(self.grid_n, self.grid_n)

    def target_grid_field(self) -> np.ndarray:
        return self._grid_values

    def energy_integrals(self) -> EnergyIntegrals:
        """Quadrature energies of the true scaled target derivatives.

        Objective k's energy integrates both of its squared derivative
        fields over the domain; the fit objective integrates the squared
        target itself.
        """
        cell = (self.target.length / self.grid_n) ** 2
        stack = self.target.stack(self.grid_points, self.order)
        fields = [stack[0]]
        for k in range(1, self.order + 1):
            lv = sobolev_objective_levels(k)
            fields.append(self.xi_true[k - 1] * stack[lv])
        return compute_energy_integrals(fields, cell, domain=f"[0,{self.target.length}]^2")


class PoissonProblem:
    """Physics-informed Poisson task on the unit square.

    Manufactured solution u = cos(omega x) sin(omega y) gives the forcing
    f = lap(u) = -2 omega^2 cos(omega x) sin(omega y). Objective 0 is the
    interior residual mean (lap u_theta - f)^2; objective 1 is the boundary
    mean (u_theta - u)^2.
    """

    kind = "poisson"
    n_task_params = 0
    n_objectives = 2

    def __init__(
        self,
        omega: float = 6.0,
        n_interior: int = 2500,
        n_boundary: int = 400,
        grid_n: int = 100,
        seed: int = 0,
    ):
        if n_boundary % 4 != 0:
            raise ValueError("boundary points must split evenly over 4 edges")
        self.omega = float(omega)
        self.seed = int(seed)
        self.grid_n = int(grid_n)
        rng = substream(seed, "sampling")
        self.interior_points = rng.uniform(0.0, 1.0, size=(n_interior, 2))
        per_edge = n_boundary // 4
        # equidistant midpoints per edge; no corner is shared twice
        t = (np.arange(per_edge) + 0.5) / per_edge
        zeros = np.zeros(per_edge)
        ones = np.ones(per_edge)
        self.boundary_points = np.concatenate(
            [
                np.column_stack([t, zeros]),
                np.column_stack([t, ones]),
                np.column_stack([zeros, t]),
                np.column_stack([ones, t]),
            ]
        )
        self.n_train = n_interior

        axis = np.linspace(0.0, 1.0, self.grid_n)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        self.grid_points = np.column_stack([gx.ravel(), gy.ravel()])

        self._forcing = self.forcing(self.interior_points)
        self._boundary_values = self.solution(self.boundary_points)
        self._grid_truth = self.solution(self.grid_points)
        self._kern = None

    def solution(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        w = self.omega
        return np.cos(w * X[:, 0]) * np.sin(w * X[:, 1])

    def forcing(self, X: np.ndarray) -> np.ndarray:
        """lap(u) of the manufactured solution."""
        return -2.0 * self.omega**2 * self.solution(X)

    # -- trainer interface -------------------------------------------------

    @property
    def objective_names(self) -> list[str]:
        return ["residual", "boundary"]

    def norm_stats(self) -> NormStats:
        train_inputs = np.concatenate([self.interior_points, self.boundary_points])
        return fit_norm_stats(train_inputs)

    def initial_task_params(self) -> np.ndarray:
        return np.zeros(0)

    @property
    def task_objective(self) -> np.ndarray:
        return np.zeros(0, dtype=np.intp)

    def initial_shared_params(self, seed: int) -> np.ndarray:
        return init_params(self._kern.config, seed).flat()

    def bind(self, kern) -> None:
        self._kern = kern

    @property
    def kernel(self):
        return self._kern

    def batch_eval(
        self,
        flat: np.ndarray,
        xi_hat: np.ndarray,
        idx: np.ndarray,
        lam: np.ndarray,
        active: np.ndarray | None = None,
        capture: bool = False,
    ) -> BatchResult:
        X = self.interior_points[idx] if idx is not None else self.interior_points
        f = self._forcing[idx] if idx is not None else self._forcing
        nb = X.shape[0]
        if active is None:
            active = np.ones(2, dtype=bool)
        losses = np.zeros(2)
        objective_grads = np.zeros((2, flat.shape[0]))
        if active[0]:
            run_i = self._kern.evaluate(flat, X, order=2, mode=LAPLACIAN)
            res = run_i.fields[LAP_LEVEL] - f
            losses[0] = float(res @ res) / nb
            seeds = np.zeros((LAP_LEVEL + 1, nb))
            seeds[LAP_LEVEL] = (2.0 / nb) * res
            objective_grads[0] = run_i.vjp(seeds)
        if active[1]:
            nbd = self.boundary_points.shape[0]
            run_b = self._kern.evaluate(flat, self.boundary_points, order=0)
            res_b = run_b.fields[0] - self._boundary_values
            losses[1] = float(res_b @ res_b) / nbd
            objective_grads[1] = run_b.vjp((2.0 / nbd) * res_b[None, :])
        grad = lam @ objective_grads
        return BatchResult(
            losses, grad, np.zeros(0),
            objective_grads if capture else None,
            np.zeros(0) if capture else None,
        )

    def metrics(self, flat: np.ndarray, xi_hat: np.ndarray) -> dict:
        values = self._kern.values(flat, self.grid_points)
        return {
            "rel_l2": relative_l2(values, self._grid_truth),
            "rel_l1_coeff": float("nan"),
        }

    def grid_field(self, flat: np.ndarray) -> np.ndarray:
        vals = self._kern.values(flat, self.grid_points)
        return vals.reshape(self.grid_n, self.grid_n)

    def target_grid_field(self) -> np.ndarray:
        return self._grid_truth.reshape(self.grid_n, self.grid_n)


# ---------------------------------------------------------------------------
# ground-truth export


def write_field_csv(path, points: np.ndarray, values: np.ndarray) -> None:
    """Write (x, y, value) rows for external verification of a field."""
    values = np.asarray(values).ravel()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for (x, y), v in zip(points, values):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def export_ground_truth(problem, out_dir) -> list:
    """Dump the problem's defining point sets and fields as CSV files."""
    import os

    written = []
    if problem.kind == "sobolev":
        pairs = [
            ("train_points.csv", problem.train_points,
             problem.target(problem.train_points)),
            ("test_points.csv", problem.test_points, problem._test_values),
            ("grid_truth.csv", problem.grid_points,
             problem.target_grid_field().ravel()),
        ]
    else:
        pairs = [
            ("interior_points.csv", problem.interior_points, problem._forcing),
            ("boundary_points.csv", problem.boundary_points,
             problem._boundary_values),
            ("grid_truth.csv", problem.grid_points, problem._grid_truth),
        ]
    for name, points, values in pairs:
        path = os.path.join(out_dir, name)
        write_field_csv(path, points, values)
        written.append(path)
    return written
