"""Batched evaluation of network values, input derivatives, and VJPs.

Two interchangeable implementations sit behind this module: a compiled
extension (BLAS matrix products + fused C loops) and a pure-numpy reference.
The compiled one is used when available; set PINNBALANCE_ENGINE=reference or
=compiled to force a choice at import time.
"""

from __future__ import annotations

import os

import numpy as np

from ._malloc_tune import tune_malloc
from ._netkernel_common import (
    ACT_IDS,
    LAP_LEVEL,
    LAPLACIAN,
    PURE,
    level_index,
    n_levels,
)
from .network import MlpConfig, NormStats

tune_malloc()

__all__ = ["NetKernel", "FieldRun", "engine_name", "available_engines", "get_impl"]


def _try_compiled():
    try:
        from . import _netkernel_cy

        return _netkernel_cy
    except ImportError:
        return None


def get_impl(name: str):
    """Implementation module by engine name ('compiled' or 'reference')."""
    if name == "reference":
        from . import _netkernel_np

        return _netkernel_np
    if name == "compiled":
        impl = _try_compiled()
        if impl is None:
            raise RuntimeError(
                "compiled kernel requested but the extension is not built"
            )
        return impl
    raise ValueError(f"unknown engine {name!r}")


def available_engines() -> list[str]:
    out = ["reference"]
    if _try_compiled() is not None:
        out.insert(0, "compiled")
    return out


_env = os.environ.get("PINNBALANCE_ENGINE", "").strip().lower()
if _env:
    _impl = get_impl(_env)
else:
    _impl = _try_compiled()
    if _impl is None:
        from . import _netkernel_np as _impl


def engine_name() -> str:
    """Name of the implementation selected at import time."""
    return _impl.ENGINE


class NetKernel:
    """Batched evaluator bound to one architecture and input normalization."""

    def __init__(
        self, config: MlpConfig, stats: NormStats, engine: str | None = None
    ):
        if config.in_dim != 2 or config.out_dim != 1:
            raise ValueError("the batched kernel supports 2-input scalar networks")
        self.config = config
        self.stats = stats
        self._impl = get_impl(engine) if engine else _impl
        self.engine = self._impl.ENGINE
        self._shapes = config.layer_shapes
        self._act_id = ACT_IDS[config.activation]
        self._mean = np.asarray(stats.mean, dtype=np.float64)
        self._inv_std = 1.0 / np.asarray(stats.std, dtype=np.float64)
        # Buffer pool shared by this kernel's passes (compiled engine only).
        # A FieldRun stays valid until a later same-shape pass reuses its
        # buffers; its vjp then raises instead of returning stale numbers.
        self._pool = self._impl.Workspace() if hasattr(self._impl, "Workspace") else None

    def evaluate(
        self,
        flat: np.ndarray,
        X: np.ndarray,
        order: int,
        mode: str = PURE,
        with_vjp: bool = True,
    ) -> "FieldRun":
        """Forward pass producing the field stack and reusable VJP state.

        fields has one row per level: [u, du/dx, du/dy, d2u/dx2, d2u/dy2, ...]
        for pure mode, or [u, du/dx, du/dy, lap(u)] for laplacian mode.
        with_vjp=False skips the reverse-pass bookkeeping (value-only passes).
        """
        flat = np.array(flat, dtype=np.float64)  # snapshot against later updates
        if flat.shape != (self.config.n_params,):
            raise ValueError(
                f"expected {self.config.n_params} parameters, got {flat.shape}"
            )
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("points must be an (n, 2) array")
        run = self._impl.Run(
            self._shapes, self._act_id, self._mean, self._inv_std,
            flat, X, order, mode, tables=with_vjp, pool=self._pool,
        )
        return FieldRun(run, n_levels(order, mode))

    def values(self, flat: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Network values only (no derivative levels, no VJP state)."""
        return self.evaluate(flat, X, order=0, with_vjp=False).fields[0]


class FieldRun:
    """Result of one forward pass; vjp may be called any number of times."""

    def __init__(self, run, nf: int):
        self._run = run
        self.nf = nf
        self.fields: np.ndarray = run.fields

    def vjp(self, seeds: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum_{level, point} seeds * fields.

        seeds may cover just a prefix of the levels (lower derivative
        orders); missing levels are treated as zero weight.
        """
        return self._run.vjp(seeds)
