"""Deterministic training loop with dynamic loss weighting.

Bias-corrected Adam, a piecewise-constant learning-rate schedule,
permutation mini-batches reshuffled every epoch, a configurable
weight-update cadence, and staged (sequential) objective introduction
for forgetting experiments. One run is strictly sequential; determinism
is bitwise for everything except wall-clock stamps.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .balancing import (
    DEFAULT_ALPHA,
    DEFAULT_CADENCE,
    ObjectiveGradients,
    StrategyError,
)
from .network import MlpParams, save_checkpoint, substream


class TrainingError(RuntimeError):
    """A run aborted; message carries epoch/batch context and diagnostics."""

    def __init__(self, message: str, epoch: int | None = None,
                 batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamState:
    """Immutable Adam moments; each step returns a fresh state."""

    m: np.ndarray
    v: np.ndarray
    t: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; raises on non-finite gradients."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match params {params.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingError(
            f"non-finite gradient in {bad.size} components "
            f"(first indices {bad[:5].tolist()})"
        )
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    t = state.t + 1
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def lr_schedule(epoch: int, lr0: float, milestones: tuple[int, ...],
                factor: float = 0.1) -> float:
    """Piecewise-constant rate: lr0 * factor^(milestones passed)."""
    passed = sum(1 for m in milestones if epoch >= m)
    return lr0 * factor ** passed


def make_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Random partition of range(n) into batches; last one may be short."""
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds {n} points")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StageSpec:
    """One stage of sequential training.

    active is a per-objective mask (None means all objectives). When
    reset_weights is set, lambda returns to the strategy's initial vector
    at the stage boundary; the max/avg strategy resets regardless.
    """

    start_epoch: int
    active: tuple[bool, ...] | None = None
    reset_weights: bool = False


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    batch_size: int
    lr: float = 1e-3
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    weight_cadence: int = DEFAULT_CADENCE
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    stages: tuple[StageSpec, ...] = ()
    reset_adam_on_stage: bool = False
    metric_stride: int = 1
    snapshot_epochs: tuple[int, ...] = ()
    checkpoint_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.decay_factor <= 0:
            raise ValueError("decay factor must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.weight_cadence < 1:
            raise ValueError("weight cadence must be at least 1")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.metric_stride < 1:
            raise ValueError("metric stride must be at least 1")
        if self.stages:
            starts = [s.start_epoch for s in self.stages]
            if starts[0] != 0:
                raise ValueError("first stage must start at epoch 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError("stage start epochs must be strictly increasing")


# ---------------------------------------------------------------------------
# trace


@dataclass
class EpochRecord:
    epoch: int
    losses: np.ndarray          # (K,) epoch-mean unweighted objective losses
    lam: np.ndarray             # (K,) weights in effect during the epoch
    lr: float
    task_params: np.ndarray
    rel_l2: float               # nan on epochs where metrics were skipped
    rel_l1_coeff: float
    wall: float                 # seconds since run start; not deterministic


@dataclass
class TrainingTrace:
    n_objectives: int
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    final_shared: np.ndarray | None = None
    final_task: np.ndarray | None = None

    def arrays(self) -> dict:
        """Column arrays for the deterministic part of the trace.

        Wall-clock stamps are excluded: they are measurement metadata, not
        part of the reproducibility contract.
        """
        recs = self.records
        return {
            "epoch": np.array([r.epoch for r in recs], dtype=np.int64),
            "losses": np.array([r.losses for r in recs]),
            "lam": np.array([r.lam for r in recs]),
            "lr": np.array([r.lr for r in recs]),
            "task_params": np.array([r.task_params for r in recs]),
            "rel_l2": np.array([r.rel_l2 for r in recs]),
            "rel_l1_coeff": np.array([r.rel_l1_coeff for r in recs]),
        }


def traces_identical(a: TrainingTrace, b: TrainingTrace) -> bool:
    """Bitwise equality of the deterministic trace columns."""
    xa, xb = a.arrays(), b.arrays()
    return all(
        np.array_equal(xa[k], xb[k], equal_nan=True) for k in xa
    ) and set(xa) == set(xb)


# ---------------------------------------------------------------------------
# stages


def stage_index(stages: tuple[StageSpec, ...], epoch: int) -> int:
    idx = 0
    for j, st in enumerate(stages):
        if epoch >= st.start_epoch:
            idx = j
    return idx


def sequential_stage_controller(
    epoch: int, stages: tuple[StageSpec, ...], k: int
) -> np.ndarray:
    """Boolean mask of the objectives active at this epoch."""
    if not stages:
        return np.ones(k, dtype=bool)
    st = stages[stage_index(stages, epoch)]
    if st.active is None:
        return np.ones(k, dtype=bool)
    mask = np.asarray(st.active, dtype=bool)
    if mask.shape != (k,):
        raise ValueError(f"stage mask has {mask.size} entries, expected {k}")
    if not mask.any():
        raise ValueError("stage mask disables every objective")
    return mask


# ---------------------------------------------------------------------------
# main loop


def train(
    problem,
    strategy,
    config: TrainingConfig,
    snapshot_hook=None,
    checkpoint_dir=None,
    row_sink=None,
) -> TrainingTrace:
    """Run one training job and return its trace.

    problem supplies batch_eval / metrics / parameter initialization;
    strategy is a balancing.WeightStrategy. snapshot_hook(epoch, shared,
    task) is called at the configured snapshot epochs and its result is
    stored in the trace. row_sink(record) is called once per epoch for
    streaming output.
    """
    k = problem.n_objectives
    n = problem.n_train
    if config.batch_size > n:
        raise ValueError(
            f"batch size {config.batch_size} exceeds the {n} training points"
        )
    for st in config.stages:
        if st.active is not None and len(st.active) != k:
            raise ValueError(
                f"stage mask has {len(st.active)} entries, expected {k}"
            )

    shared = np.asarray(problem.initial_shared_params(config.seed), dtype=np.float64)
    task = np.asarray(problem.initial_task_params(), dtype=np.float64)
    n_shared = shared.size
    theta = np.concatenate([shared, task])
    adam = AdamState.fresh(theta.size)
    lam = strategy.initial_weights(k)
    task_obj = np.asarray(problem.task_objective, dtype=np.intp)

    rng = substream(config.seed, "batching")
    trace = TrainingTrace(n_objectives=k)
    stage_last = {st.start_epoch - 1 for st in config.stages[1:]}
    snapshot_at = set(config.snapshot_epochs)
    checkpoint_at = set(config.checkpoint_epochs)
    prev_stage = 0
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        si = stage_index(config.stages, epoch)
        if si != prev_stage:
            st = config.stages[si]
            if strategy.resets_on_stage or st.reset_weights:
                lam = strategy.initial_weights(k)
            if config.reset_adam_on_stage:
                adam = AdamState.fresh(theta.size)
            prev_stage = si
        mask = sequential_stage_controller(epoch, config.stages, k)
        lr = lr_schedule(epoch, config.lr, config.milestones, config.decay_factor)
        update_epoch = epoch % config.weight_cadence == 0

        loss_accum = np.zeros(k)
        n_seen = 0
        for b, idx in enumerate(make_batches(n, config.batch_size, rng)):
            capture = (
                b == 0
                and update_epoch
                and strategy.needs_gradients
                and int(mask.sum()) >= 2
            )
            result = problem.batch_eval(
                theta[:n_shared], theta[n_shared:], idx, lam,
                active=mask, capture=capture,
            )
            if not np.all(np.isfinite(result.losses)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b}: "
                    f"losses={result.losses.tolist()}",
                    epoch, b,
                )
            grad_shared = result.grad
            task_grad = result.task_grad
            if capture:
                act = np.flatnonzero(mask)
                try:
                    sub_lam, _ = strategy.update(
                        lam[act],
                        ObjectiveGradients(result.objective_grads[act]),
                        config.alpha,
                    )
                except StrategyError as exc:
                    raise TrainingError(
                        f"weight update failed at epoch {epoch} "
                        f"(objective {exc.objective}): {exc}",
                        epoch, b,
                    ) from exc
                lam = lam.copy()
                lam[act] = sub_lam
                grad_shared = lam @ result.objective_grads
                if task_obj.size:
                    task_grad = np.where(
                        mask[task_obj],
                        lam[task_obj] * result.task_grad_raw,
                        0.0,
                    )
            try:
                theta, adam = adam_step(
                    theta, np.concatenate([grad_shared, task_grad]), adam, lr
                )
            except TrainingError as exc:
                raise TrainingError(
                    f"{exc} at epoch {epoch} batch {b}; "
                    f"objective losses={result.losses.tolist()}",
                    epoch, b,
                ) from exc
            loss_accum += result.losses * idx.size
            n_seen += idx.size

        want_metrics = (
            epoch % config.metric_stride == 0
            or epoch == config.epochs - 1
            or epoch in stage_last
        )
        if want_metrics:
            m = problem.metrics(theta[:n_shared], theta[n_shared:])
            rel_l2 = float(m["rel_l2"])
            rel_l1 = float(m["rel_l1_coeff"])
        else:
            rel_l2 = float("nan")
            rel_l1 = float("nan")
        record = EpochRecord(
            epoch=epoch,
            losses=loss_accum / n_seen,
            lam=lam.copy(),
            lr=lr,
            task_params=theta[n_shared:].copy(),
            rel_l2=rel_l2,
            rel_l1_coeff=rel_l1,
            wall=time.perf_counter() - t0,
        )
        trace.records.append(record)
        if row_sink is not None:
            row_sink(record)
        if epoch in snapshot_at and snapshot_hook is not None:
            trace.snapshots[epoch] = snapshot_hook(
                epoch, theta[:n_shared].copy(), theta[n_shared:].copy()
            )
        if epoch in checkpoint_at and checkpoint_dir is not None:
            _write_checkpoint(problem, theta[:n_shared], theta[n_shared:],
                              epoch, checkpoint_dir)

    trace.final_shared = theta[:n_shared].copy()
    trace.final_task = theta[n_shared:].copy()
    return trace


def _write_checkpoint(problem, shared, task, epoch, checkpoint_dir):
    kern = problem.kernel
    params = MlpParams.from_flat(kern.config, shared)
    path = os.path.join(checkpoint_dir, f"checkpoint_{epoch:06d}.json")
    save_checkpoint(
        path, params, kern.stats,
        extra={"epoch": epoch, "task_params": [float(v) for v in task]},
    )
