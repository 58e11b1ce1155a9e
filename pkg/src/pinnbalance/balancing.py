"""Loss-weighting strategies for multi-objective training.

All strategies consume per-objective gradients over the shared parameters,
captured at the same parameter state and batch, and produce positive weights
lambda. Raw proposals lambda-hat are smoothed by a moving average; the
min-norm strategy instead returns simplex weights directly.

Available strategies:
  uniform           fixed lambda_k = 1
  inverse-dirichlet lambda-hat_k = max_t stat_t / stat_k from gradient
                    variance or mean-square statistics
  max-avg           lambda-hat_k = max|grad L_1| / (lambda_k mean|grad L_k|),
                    with objective 1 anchored at lambda_1 = 1
  mgda              min-norm point of the gradients' convex hull via
                    Frank-Wolfe on the Gram matrix
  epsilon-optimal   static weights proportional to 1 / I_k from target
                    derivative energy integrals
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Raw weight proposals are clipped to this range so one degenerate batch
# cannot produce weights that destroy the moving average.
CLIP_LO = 1e-8
CLIP_HI = 1e8

DEFAULT_ALPHA = 0.5
DEFAULT_CADENCE = 5  # epochs between weight updates

MGDA_TOL = 1e-6
MGDA_MAX_ITERS = 250


class StrategyError(RuntimeError):
    """A weighting strategy could not produce valid weights.

    Carries the index of the offending objective when one is identifiable
    (for example a dead objective with zero gradient statistic).
    """

    def __init__(self, message: str, objective: int | None = None):
        super().__init__(message)
        self.objective = objective


class ObjectiveGradients:
    """Per-objective gradient vectors over the shared parameters.

    Rows are objectives, columns follow one fixed parameter ordering. All
    rows must come from the same parameter state and batch for the weight
    formulas to be meaningful; this class only checks shape and finiteness.
    """

    def __init__(self, grads):
        arr = np.asarray(grads, dtype=np.float64)
        if arr.ndim != 2:
            arr = np.stack([np.asarray(g, dtype=np.float64).ravel() for g in grads])
        if arr.shape[0] < 1:
            raise ValueError("at least one objective gradient is required")
        if arr.shape[1] < 2:
            raise ValueError("gradient vectors need at least 2 components")
        if not np.isfinite(arr).all():
            bad = int(np.argwhere(~np.isfinite(arr).all(axis=1))[0, 0])
            raise StrategyError(
                f"objective {bad} has non-finite gradient entries", objective=bad
            )
        self.array = arr

    @property
    def k(self) -> int:
        return self.array.shape[0]

    def __len__(self) -> int:
        return self.array.shape[0]


@dataclass(frozen=True)
class EnergyIntegrals:
    """Quadrature values I_k of squared target-derivative fields.

    values[k] = integral over the domain of (scale_k * D^k target)^2,
    computed by midpoint quadrature with the stated cell measure.
    """

    values: tuple
    cell_measure: float
    domain: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size == 0:
            raise ValueError("empty objective set is invalid")
        if not np.isfinite(vals).all():
            raise ValueError("energy integrals must be finite")
        if (vals <= 0.0).any():
            bad = int(np.argwhere(vals <= 0.0)[0, 0])
            raise StrategyError(
                f"objective {bad} has zero energy integral", objective=bad
            )


@dataclass
class MinNormResult:
    """Solution of the min-norm weight problem."""

    weights: np.ndarray       # simplex weights, shape (K,)
    direction: np.ndarray     # d = sum_k weights_k g_k over parameters
    gap: float                # final duality gap
    iterations: int
    converged: bool


def uniform_weights(k: int) -> np.ndarray:
    """The constant weighting lambda_k = 1."""
    if k < 1:
        raise ValueError("empty objective set is invalid")
    return np.ones(k)


def gradient_statistics(grads: ObjectiveGradients, mode: str) -> np.ndarray:
    """Per-objective spread statistic of the gradient components.

    mode "variance" is the population variance; mode "mean-square" is the
    mean of squared components (the per-parameter Dirichlet energy, the
    natural statistic under Adam's normalization).
    """
    arr = grads.array
    if mode == "variance":
        return arr.var(axis=1)
    if mode == "mean-square":
        return np.mean(arr * arr, axis=1)
    raise ValueError(f"unknown statistic mode {mode!r}")


def inverse_dirichlet_hat(
    grads: ObjectiveGradients, mode: str = "mean-square"
) -> np.ndarray:
    """Raw inverse-Dirichlet proposal lambda-hat_k = max_t stat_t / stat_k.

    The proposal equalizes the chosen gradient statistic across objectives:
    lambda-hat_k * stat_k is the same for every k, and the arg-max objective
    gets exactly 1.
    """
    stats = gradient_statistics(grads, mode)
    if (stats <= 0.0).any():
        bad = int(np.argwhere(stats <= 0.0)[0, 0])
        raise StrategyError(
            f"objective {bad} has zero gradient {mode}; it is not training",
            objective=bad,
        )
    return stats.max() / stats


def max_avg_hat(grads: ObjectiveGradients, lam: np.ndarray) -> np.ndarray:
    """Raw max/avg proposal anchored on the first objective.

    lambda-hat_k = max|grad L_1| / (lambda_k * mean|grad L_k|) for k >= 2,
    where L_1 is the first objective (the residual term); its own weight is
    pinned at 1 and never updated.
    """
    arr = grads.array
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (arr.shape[0],):
        raise ValueError("weight vector length must match the objective count")
    if (lam <= 0.0).any():
        raise ValueError("current weights must be positive")
    mean_abs = np.mean(np.abs(arr), axis=1)
    if (mean_abs <= 0.0).any():
        bad = int(np.argwhere(mean_abs <= 0.0)[0, 0])
        raise StrategyError(
            f"objective {bad} has zero mean absolute gradient", objective=bad
        )
    hat = np.abs(arr[0]).max() / (lam * mean_abs)
    hat[0] = 1.0
    return hat


def moving_average_update(
    lam: np.ndarray, lam_hat: np.ndarray, alpha: float = DEFAULT_ALPHA
) -> np.ndarray:
    """Componentwise convex combination alpha * lam + (1 - alpha) * lam-hat."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("moving-average rate must lie in [0, 1)")
    lam = np.asarray(lam, dtype=np.float64)
    lam_hat = np.asarray(lam_hat, dtype=np.float64)
    return alpha * lam + (1.0 - alpha) * lam_hat


def clip_hat(
    lam_hat: np.ndarray, lo: float = CLIP_LO, hi: float = CLIP_HI
) -> tuple[np.ndarray, bool]:
    """Clamp a raw proposal into [lo, hi].

    Returns the clipped vector and whether any component was clipped, so
    callers can log degenerate batches.
    """
    clipped = np.clip(lam_hat, lo, hi)
    return clipped, bool((clipped != lam_hat).any())


def compute_energy_integrals(
    fields, cell_measure: float, domain: str = ""
) -> EnergyIntegrals:
    """Midpoint-quadrature energies I_k = cell_measure * sum(field_k^2).

    fields is a sequence of arrays, one per objective, holding the scaled
    target-derivative values sampled on a uniform grid.
    """
    if cell_measure <= 0.0:
        raise ValueError("cell measure must be positive")
    values = []
    for k, field in enumerate(fields):
        arr = np.asarray(field, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError(f"field {k} contains non-finite values")
        values.append(cell_measure * float(np.sum(arr * arr)))
    return EnergyIntegrals(tuple(values), cell_measure, domain)


def epsilon_optimal_weights(integrals: EnergyIntegrals) -> np.ndarray:
    """Static weights lambda*_k proportional to prod_{j != k} I_j.

    Equivalently lambda*_k proportional to 1 / I_k, which equalizes
    lambda*_k I_k across objectives and maximizes min_k lambda_k I_k over
    the simplex. Computed in log space so extreme energies cannot overflow
    the product of K terms.
    """
    ivals = np.asarray(integrals.values, dtype=np.float64)
    log_w = -np.log(ivals)
    log_w -= log_w.max()
    w = np.exp(log_w)
    return w / w.sum()


def mgda_min_norm(
    grads: ObjectiveGradients,
    tol: float = MGDA_TOL,
    max_iters: int = MGDA_MAX_ITERS,
) -> MinNormResult:
    """Min-norm point of the convex hull of the objective gradients.

    Solves min_lambda 0.5 lambda^T Q lambda over the simplex with Q the
    gradient Gram matrix, by Frank-Wolfe with away steps and exact line
    search from the uniform point. Away steps remove the zigzag that stalls
    the plain method when the solution sits on a simplex face, restoring
    linear convergence there. The result's direction d = sum_k lambda_k g_k
    satisfies d . g_k >= d . d - tol for all k, so -d is a common descent
    direction.
    """
    if grads.k < 2:
        raise ValueError("min-norm weighting needs at least two objectives")
    arr = grads.array
    q_mat = arr @ arr.T
    if not np.isfinite(q_mat).all():
        raise StrategyError("gradient Gram matrix is not finite")
    k = grads.k
    lam = np.full(k, 1.0 / k)
    best_lam = lam.copy()
    best_val = float(lam @ q_mat @ lam)
    gap = np.inf
    converged = False
    iterations = 0
    for iterations in range(max_iters + 1):
        q_lam = q_mat @ lam
        val = float(lam @ q_lam)
        if val < best_val:
            best_val = val
            best_lam = lam.copy()
        i = int(np.argmin(q_lam))
        gap = val - float(q_lam[i])
        if gap <= tol:
            converged = True
            best_lam = lam
            break
        if iterations == max_iters:
            break
        support = np.flatnonzero(lam > 0.0)
        j = int(support[np.argmax(q_lam[support])])
        if gap >= float(q_lam[j]) - val or lam[j] >= 1.0:
            # toward step: move to the best vertex e_i, step in [0, 1]
            diff = -lam
            diff[i] += 1.0
            gamma_max = 1.0
        else:
            # away step: move off the worst supported vertex e_j,
            # step capped where lambda_j reaches zero
            diff = lam.copy()
            diff[j] -= 1.0
            gamma_max = lam[j] / (1.0 - lam[j])
        num = float(-diff @ q_lam)
        den = float(diff @ q_mat @ diff)
        gamma = gamma_max if den <= 0.0 else min(gamma_max, max(0.0, num / den))
        lam = lam + gamma * diff
        np.clip(lam, 0.0, None, out=lam)
        lam /= lam.sum()
    lam = best_lam
    return MinNormResult(
        weights=lam,
        direction=lam @ arr,
        gap=float(gap),
        iterations=iterations,
        converged=converged,
    )


class WeightStrategy:
    """Interface used by the training loop.

    update(lam, grads, alpha) returns (new_lam, raw proposal or None).
    Strategies that never look at gradients set needs_gradients False so the
    loop can skip the per-objective capture entirely.
    """

    name = "base"
    needs_gradients = True
    resets_on_stage = False

    def initial_weights(self, k: int) -> np.ndarray:
        return uniform_weights(k)

    def update(self, lam, grads, alpha=DEFAULT_ALPHA):
        raise NotImplementedError


class Uniform(WeightStrategy):
    """All weights stay at 1."""

    name = "uniform"
    needs_gradients = False

    def update(self, lam, grads=None, alpha=DEFAULT_ALPHA):
        return np.asarray(lam, dtype=np.float64), None


class InverseDirichlet(WeightStrategy):
    """Moving-averaged inverse gradient-statistic weighting.

    The proposal is the square root of the raw statistic ratio, so that the
    statistic of the weighted gradients equalizes exactly: with
    lambda-hat_k = sqrt(max_t stat_t / stat_k), every weighted gradient
    satisfies stat[lambda-hat_k grad L_k] = lambda-hat_k^2 stat_k
    = max_t stat_t. Using the raw ratio itself would overshoot: the
    objective with the smallest statistic would end up dominating the
    update by the very factor it was dominated by before, a positive
    feedback that runs the weights to the clip ceiling on problems where
    one objective trains quickly (measured on the 2D Poisson setup: the
    boundary weight pegs, the interior residual grows monotonically, and
    the solution error exceeds 1).
    """

    name = "inverse-dirichlet"

    def __init__(self, mode: str = "mean-square"):
        gradient_statistics(
            ObjectiveGradients(np.ones((1, 2))), mode
        )  # reject unknown modes at construction
        self.mode = mode

    def update(self, lam, grads, alpha=DEFAULT_ALPHA):
        hat, _ = clip_hat(np.sqrt(inverse_dirichlet_hat(grads, self.mode)))
        return moving_average_update(lam, hat, alpha), hat


class MaxAvg(WeightStrategy):
    """Moving-averaged max/avg ratio weighting, first objective anchored.

    This strategy's weights are reset to 1 at stage boundaries of sequential
    training because its ratios reference the current weights themselves.
    """

    name = "max-avg"
    resets_on_stage = True

    def update(self, lam, grads, alpha=DEFAULT_ALPHA):
        hat, _ = clip_hat(max_avg_hat(grads, lam))
        new_lam = moving_average_update(lam, hat, alpha)
        new_lam[0] = 1.0
        return new_lam, hat


class MinNorm(WeightStrategy):
    """Frank-Wolfe min-norm weights, applied directly (no moving average).

    The solver returns simplex weights; averaging them with past values
    would break the Pareto-stationarity certificate, so each update replaces
    the weights outright.
    """

    name = "mgda"

    def __init__(self, tol: float = MGDA_TOL, max_iters: int = MGDA_MAX_ITERS):
        self.tol = tol
        self.max_iters = max_iters
        self.last_result: MinNormResult | None = None

    def initial_weights(self, k: int) -> np.ndarray:
        return np.full(k, 1.0 / k)

    def update(self, lam, grads, alpha=DEFAULT_ALPHA):
        result = mgda_min_norm(grads, self.tol, self.max_iters)
        self.last_result = result
        # zero weights are valid simplex points but break the positivity
        # invariant downstream; nudge onto the open simplex
        w = np.maximum(result.weights, CLIP_LO)
        return w / w.sum(), result.weights


class EpsilonOptimal(WeightStrategy):
    """Static weights from target-derivative energy integrals."""

    name = "epsilon-optimal"
    needs_gradients = False

    def __init__(self, integrals: EnergyIntegrals):
        self.weights = epsilon_optimal_weights(integrals)

    def initial_weights(self, k: int) -> np.ndarray:
        if k != self.weights.size:
            raise ValueError(
                f"strategy was built for {self.weights.size} objectives, got {k}"
            )
        return self.weights.copy()

    def update(self, lam, grads=None, alpha=DEFAULT_ALPHA):
        return self.weights.copy(), None
