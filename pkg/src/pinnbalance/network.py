"""Fully connected networks: initialization, normalization, expression building.

Parameter vectors use a fixed flat ordering (documented in `param_names`), and
all randomness is drawn from named counter-based substreams so every run is
reproducible from a single integer seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import expr
from .expr import Expr

__all__ = [
    "STREAMS",
    "substream",
    "standard_normals",
    "MlpConfig",
    "MlpParams",
    "NormStats",
    "init_params",
    "param_names",
    "fit_norm_stats",
    "build_network_expr",
    "input_derivative",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("sin", "tanh", "elu")

# Named substreams of the counter-based generator. Each (seed, stream) pair is
# an independent Philox keyed stream, so adding draws to one consumer never
# shifts the values seen by another.
STREAMS = {
    "init": 0,       # network weight initialization
    "target": 1,     # random target-function coefficients
    "split": 2,      # train/test split of grid points
    "batching": 3,   # per-epoch batch shuffling
    "sampling": 4,   # random collocation/interior points
    "probe": 5,      # probe target phases and repetitions
}


def substream(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named stream of a run seed."""
    return np.random.Generator(np.random.Philox(key=[seed, STREAMS[stream]]))


def standard_normals(gen: np.random.Generator, n: int) -> np.ndarray:
    """n standard normal draws via the Box-Muller transform.

    Uses u1 in (0, 1] so the log never sees zero; both the cosine and sine
    halves of each pair are consumed before drawing more uniforms.
    """
    pairs = (n + 1) // 2
    u1 = 1.0 - gen.random(pairs)
    u2 = gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of a fully connected network."""

    in_dim: int
    out_dim: int
    hidden_layers: int
    width: int
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        if min(self.in_dim, self.out_dim, self.hidden_layers, self.width) < 1:
            raise ValueError("all architecture dimensions must be >= 1")

    @property
    def gain(self) -> float:
        # Xavier gain: 5/3 for tanh saturation, 1 otherwise.
        return 5.0 / 3.0 if self.activation == "tanh" else 1.0

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) of each affine layer, input to output."""
        dims = [self.in_dim] + [self.width] * self.hidden_layers + [self.out_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def flat_offsets(self) -> list[tuple[int, int]]:
        """(weight_offset, bias_offset) of each layer in the flat vector."""
        out = []
        pos = 0
        for o, i in self.layer_shapes:
            out.append((pos, pos + o * i))
            pos += o * i + o
        return out


@dataclass
class MlpParams:
    """Network parameters, kept alongside their architecture."""

    config: MlpConfig
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def flat(self) -> np.ndarray:
        """Flatten as layer-major, row-major weights, then bias, per layer."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, config: MlpConfig, flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (config.n_params,):
            raise ValueError(
                f"expected {config.n_params} parameters, got {flat.shape}"
            )
        weights, biases = [], []
        pos = 0
        for o, i in config.layer_shapes:
            weights.append(flat[pos : pos + o * i].reshape(o, i).copy())
            pos += o * i
            biases.append(flat[pos : pos + o].copy())
            pos += o
        return cls(config, weights, biases)


def param_names(config: MlpConfig) -> list[str]:
    """Variable names matching MlpParams.flat() ordering.

    Layer l weight (row i, column j) is w{l}_{i}_{j}; bias entry i is b{l}_{i}.
    """
    names = []
    for l, (o, i) in enumerate(config.layer_shapes):
        for r in range(o):
            for c in range(i):
                names.append(f"w{l}_{r}_{c}")
        for r in range(o):
            names.append(f"b{l}_{r}")
    return names


def init_params(config: MlpConfig, seed: int) -> MlpParams:
    """Xavier-scaled normal initialization.

    Layer scale is gain * sqrt(2 / (fan_in + fan_out)); biases start at zero.
    """
    gen = substream(seed, "init")
    weights, biases = [], []
    for o, i in config.layer_shapes:
        scale = config.gain * np.sqrt(2.0 / (i + o))
        weights.append(scale * standard_normals(gen, o * i).reshape(o, i))
        biases.append(np.zeros(o))
    return MlpParams(config, weights, biases)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension input shift and scale, applied as (x - mean) * (1/std).

    The scale is folded in as a reciprocal multiplication so value and
    derivative graphs stay division-free.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        std = np.asarray(self.std, dtype=np.float64)
        if not np.all(np.isfinite(std)) or np.any(std <= 0.0):
            bad = int(np.argmin(std))
            raise ValueError(
                f"input dimension {bad} has non-positive scale {std[bad]!r}; "
                "each dimension needs at least two distinct values"
            )


def fit_norm_stats(points: np.ndarray) -> NormStats:
    """Population mean/std of the training inputs, one pair per dimension."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need a (n, dim) array with n >= 2 to fit normalization")
    return NormStats(mean=pts.mean(axis=0), std=pts.std(axis=0))


def _act_expr(activation: str, a: Expr) -> Expr:
    if activation == "sin":
        return expr.sin(a)
    if activation == "tanh":
        return expr.tanh(a)
    return expr.elu(a)


def build_network_expr(
    config: MlpConfig,
    stats: NormStats | None = None,
    input_names: tuple[str, ...] = ("x", "y"),
) -> tuple[list[Expr], list[Expr]]:
    """Network outputs as expression graphs over named parameter variables.

    Returns (outputs, params) where params follows param_names ordering.
    Layer sums are balanced trees so derivative graphs stay shallow.
    """
    if len(input_names) != config.in_dim:
        raise ValueError("input_names length must match in_dim")
    names = param_names(config)
    pvars = [expr.param_var(n) for n in names]
    z: list[Expr] = []
    for i, nm in enumerate(input_names):
        xi = expr.input_var(nm)
        if stats is not None:
            xi = (xi - float(stats.mean[i])) * float(1.0 / stats.std[i])
        z.append(xi)

    pos = 0
    n_layers = len(config.layer_shapes)
    for l, (o, fan_in) in enumerate(config.layer_shapes):
        w = [pvars[pos + r * fan_in : pos + (r + 1) * fan_in] for r in range(o)]
        pos += o * fan_in
        b = pvars[pos : pos + o]
        pos += o
        a = [
            expr.balanced_sum([wr[c] * z[c] for c in range(fan_in)] + [b[r]])
            for r, wr in enumerate(w)
        ]
        if l < n_layers - 1:
            z = [_act_expr(config.activation, ai) for ai in a]
        else:
            z = a
    return z, pvars


def input_derivative(
    output: Expr, orders: tuple[int, ...], input_names: tuple[str, ...] = ("x", "y")
) -> Expr:
    """Pure or mixed partial: orders[i] derivatives along input_names[i]."""
    if len(orders) != len(input_names):
        raise ValueError("orders and input_names must have the same length")
    out = output
    for name, k in zip(input_names, orders):
        for _ in range(k):
            out = expr.differentiate(out, name)
    return out


_CHECKPOINT_KIND = "mlp-checkpoint"
_ORDERING_TAG = "layer-major/row-major-weights/bias-after-weights/v1"


def save_checkpoint(
    path,
    params: MlpParams,
    stats: NormStats,
    extra: dict | None = None,
) -> None:
    """Write parameters + normalization as JSON with exact float round-trip."""
    cfg = params.config
    doc = {
        "format_version": 1,
        "kind": _CHECKPOINT_KIND,
        "config": {
            "in_dim": cfg.in_dim,
            "out_dim": cfg.out_dim,
            "hidden_layers": cfg.hidden_layers,
            "width": cfg.width,
            "activation": cfg.activation,
        },
        "ordering": _ORDERING_TAG,
        "norm_mean": [float(v) for v in stats.mean],
        "norm_std": [float(v) for v in stats.std],
        "params": [float(v) for v in params.flat()],
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> tuple[MlpParams, NormStats, dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != _CHECKPOINT_KIND or doc.get("format_version") != 1:
        raise ValueError(f"{path} is not a version-1 network checkpoint")
    if doc.get("ordering") != _ORDERING_TAG:
        raise ValueError(f"unsupported parameter ordering {doc.get('ordering')!r}")
    cfg = MlpConfig(**doc["config"])
    params = MlpParams.from_flat(cfg, np.asarray(doc["params"], dtype=np.float64))
    stats = NormStats(
        mean=np.asarray(doc["norm_mean"], dtype=np.float64),
        std=np.asarray(doc["norm_std"], dtype=np.float64),
    )
    return params, stats, doc.get("extra", {})
