"""Run configuration: presets, config-file parsing, and object builders.

Config files are YAML mappings of flat keys. A file may inherit a named
preset through `extends: <preset>`; explicit keys override inherited ones.
Unknown keys and invalid pairings (for example epsilon-optimal weighting on
the Poisson problem, which has no analytic energy integrals) are rejected at
parse time.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import yaml

from .balancing import (
    EpsilonOptimal,
    InverseDirichlet,
    MaxAvg,
    MinNorm,
    Uniform,
)
from .netkernel import NetKernel
from .network import MlpConfig
from .problems import PoissonProblem, SobolevProblem, SobolevTarget
from .training import StageSpec, TrainingConfig

PROBLEMS = ("sobolev", "poisson", "stiffness-probe", "forgetting")
STRATEGIES = ("uniform", "inverse-dirichlet", "max-avg", "mgda", "epsilon-optimal")


class ConfigError(ValueError):
    """Raised for syntax or semantic errors in run configurations."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved description of one experiment."""

    problem: str
    strategy: str | None
    seeds: tuple[int, ...]
    out: str | None
    # sobolev / forgetting target
    modes: int
    grid_n: int
    order: int
    # poisson problem
    omega: float
    n_interior: int
    n_boundary: int
    # network
    hidden_layers: int
    width: int
    activation: str
    # training
    epochs: int
    batch_size: int
    lr: float
    milestones: tuple[int, ...]
    decay_factor: float
    weight_cadence: int
    alpha: float
    metric_stride: int
    snapshot_epochs: tuple[int, ...]
    stage_epochs: int
    # stiffness probe
    probe_m: tuple[int, ...]
    probe_k0: tuple[int, ...]
    probe_grid: int


_DEFAULTS = {
    "problem": None,
    "strategy": None,
    "seeds": [0],
    "out": None,
    "modes": 5,
    "grid_n": 64,
    "order": 4,
    "omega": 6.0,
    "n_interior": 2048,
    "n_boundary": 400,
    "hidden_layers": 4,
    "width": 32,
    "activation": "sin",
    "epochs": 1000,
    "batch_size": 1024,
    "lr": 1e-3,
    "milestones": [],
    "decay_factor": 0.1,
    "weight_cadence": 5,
    "alpha": 0.5,
    "metric_stride": 1,
    "snapshot_epochs": [],
    "stage_epochs": 600,
    "probe_m": [1, 2],
    "probe_k0": [2, 4, 8],
    "probe_grid": 64,
}

PRESETS: dict[str, dict] = {
    # Full-scale runs mirroring the published experiments.
    "sobolev-paper": {
        "problem": "sobolev",
        "strategy": "inverse-dirichlet",
        "seeds": [0, 1, 2, 3, 4],
        "modes": 20,
        "grid_n": 128,
        "order": 4,
        "hidden_layers": 5,
        "width": 64,
        "activation": "sin",
        "epochs": 20000,
        "batch_size": 4096,
        "lr": 1e-3,
        "milestones": [10000, 15000],
        "metric_stride": 25,
    },
    "poisson-paper": {
        "problem": "poisson",
        "strategy": "inverse-dirichlet",
        "seeds": [0, 1, 2, 3, 4],
        "omega": 6.0,
        "n_interior": 2500,
        "n_boundary": 400,
        "hidden_layers": 5,
        "width": 50,
        "activation": "tanh",
        "epochs": 30000,
        "batch_size": 2500,
        "lr": 1e-3,
        "milestones": [10000, 20000],
        "metric_stride": 25,
    },
    # Desk-scale presets sized for a single CPU core.
    "sobolev-desk": {
        "problem": "sobolev",
        "strategy": "inverse-dirichlet",
        "seeds": [1, 2, 3],
        "modes": 5,
        "grid_n": 64,
        "order": 4,
        "hidden_layers": 4,
        "width": 32,
        "activation": "sin",
        "epochs": 3000,
        "batch_size": 1024,
        "lr": 1e-3,
        "milestones": [1500, 2250],
        "metric_stride": 5,
    },
    "poisson-desk": {
        "problem": "poisson",
        "strategy": "inverse-dirichlet",
        "seeds": [1, 2, 3],
        "omega": 6.0,
        "n_interior": 1536,
        "n_boundary": 400,
        "hidden_layers": 4,
        "width": 32,
        "activation": "tanh",
        "epochs": 8000,
        "batch_size": 1536,
        "lr": 1e-3,
        "milestones": [4000, 6000],
        "metric_stride": 25,
    },
    "forgetting-desk": {
        "problem": "forgetting",
        "strategy": "inverse-dirichlet",
        "seeds": [1, 2, 3],
        "modes": 5,
        "grid_n": 64,
        "order": 2,
        "hidden_layers": 4,
        "width": 32,
        "activation": "sin",
        "epochs": 1800,
        "stage_epochs": 600,
        "batch_size": 1024,
        "lr": 1e-3,
        "milestones": [],
        "metric_stride": 25,
    },
    "stiffness-probe": {
        "problem": "stiffness-probe",
        "seeds": [0, 1, 2, 3, 4],
        "probe_m": [1, 2],
        "probe_k0": [2, 4, 8],
        "probe_grid": 64,
    },
}

# keys that only make sense for particular problems
_PROBLEM_KEYS = {
    "sobolev": {"modes", "grid_n", "order"},
    "forgetting": {"modes", "grid_n", "order", "stage_epochs"},
    "poisson": {"omega", "n_interior", "n_boundary"},
    "stiffness-probe": {"probe_m", "probe_k0", "probe_grid"},
}
_TRAINING_KEYS = {
    "epochs", "batch_size", "lr", "milestones", "decay_factor",
    "weight_cadence", "alpha", "metric_stride", "snapshot_epochs",
    "hidden_layers", "width", "activation", "strategy",
}
_COMMON_KEYS = {"problem", "seeds", "out"}


def _as_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"field '{name}' must be an integer, got {value!r}")
    return int(value)


def _as_float(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"field '{name}' must be a number, got {value!r}")
    return float(value)


def _as_int_list(name, value):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"field '{name}' must be a list of integers")
    return tuple(_as_int(name, v) for v in value)


def _as_str(name, value):
    if not isinstance(value, str):
        raise ConfigError(f"field '{name}' must be a string, got {value!r}")
    return value


def resolve(raw: dict) -> RunConfig:
    """Merge a raw key-value mapping over its preset chain and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")

    merged = dict(_DEFAULTS)
    chain: list[dict] = []
    node = raw
    seen = set()
    while True:
        chain.append(node)
        name = node.get("extends")
        if name is None:
            break
        if not isinstance(name, str) or name not in PRESETS:
            raise ConfigError(
                f"field 'extends' names unknown preset {name!r}; "
                f"known: {', '.join(sorted(PRESETS))}"
            )
        if name in seen:
            raise ConfigError(f"preset inheritance cycle through {name!r}")
        seen.add(name)
        node = PRESETS[name]
    for node in reversed(chain):
        for key, value in node.items():
            if key == "extends":
                continue
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown key '{key}'")
            merged[key] = value

    problem = merged["problem"]
    if problem not in PROBLEMS:
        raise ConfigError(
            f"field 'problem' must be one of {', '.join(PROBLEMS)}, got {problem!r}"
        )

    allowed = _COMMON_KEYS | _PROBLEM_KEYS[problem]
    if problem != "stiffness-probe":
        allowed |= _TRAINING_KEYS
    for key in raw:
        if key == "extends":
            continue
        if key not in allowed:
            raise ConfigError(f"key '{key}' does not apply to problem '{problem}'")

    strategy = merged["strategy"]
    if problem == "stiffness-probe":
        if strategy is not None:
            raise ConfigError("field 'strategy' does not apply to stiffness-probe")
    else:
        if strategy not in STRATEGIES:
            raise ConfigError(
                f"field 'strategy' must be one of {', '.join(STRATEGIES)}, "
                f"got {strategy!r}"
            )
        if strategy == "epsilon-optimal" and problem == "poisson":
            raise ConfigError(
                "strategy 'epsilon-optimal' requires analytic energy integrals, "
                "which the poisson problem does not expose"
            )

    seeds = _as_int_list("seeds", merged["seeds"])
    if len(seeds) == 0:
        raise ConfigError("field 'seeds' must not be empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("field 'seeds' contains duplicates")

    out = merged["out"]
    if out is not None:
        out = _as_str("out", out)

    cfg = RunConfig(
        problem=problem,
        strategy=strategy,
        seeds=seeds,
        out=out,
        modes=_as_int("modes", merged["modes"]),
        grid_n=_as_int("grid_n", merged["grid_n"]),
        order=_as_int("order", merged["order"]),
        omega=_as_float("omega", merged["omega"]),
        n_interior=_as_int("n_interior", merged["n_interior"]),
        n_boundary=_as_int("n_boundary", merged["n_boundary"]),
        hidden_layers=_as_int("hidden_layers", merged["hidden_layers"]),
        width=_as_int("width", merged["width"]),
        activation=_as_str("activation", merged["activation"]),
        epochs=_as_int("epochs", merged["epochs"]),
        batch_size=_as_int("batch_size", merged["batch_size"]),
        lr=_as_float("lr", merged["lr"]),
        milestones=_as_int_list("milestones", merged["milestones"]),
        decay_factor=_as_float("decay_factor", merged["decay_factor"]),
        weight_cadence=_as_int("weight_cadence", merged["weight_cadence"]),
        alpha=_as_float("alpha", merged["alpha"]),
        metric_stride=_as_int("metric_stride", merged["metric_stride"]),
        snapshot_epochs=_as_int_list("snapshot_epochs", merged["snapshot_epochs"]),
        stage_epochs=_as_int("stage_epochs", merged["stage_epochs"]),
        probe_m=_as_int_list("probe_m", merged["probe_m"]),
        probe_k0=_as_int_list("probe_k0", merged["probe_k0"]),
        probe_grid=_as_int("probe_grid", merged["probe_grid"]),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.problem in ("sobolev", "forgetting"):
        if cfg.modes < 1:
            raise ConfigError("field 'modes' must be at least 1")
        n = cfg.grid_n
        if n < 2 or n & (n - 1):
            raise ConfigError(
                "field 'grid_n' must be a power of two (spectra use a radix-2 "
                "transform)"
            )
        if cfg.order < 1:
            raise ConfigError("field 'order' must be at least 1")
    if cfg.problem == "forgetting":
        if cfg.order != 2:
            raise ConfigError(
                "field 'order' must be 2 for the forgetting schedule "
                "(stages activate fit, then D1, then D2)"
            )
        if cfg.stage_epochs < 1:
            raise ConfigError("field 'stage_epochs' must be at least 1")
        if cfg.epochs != 3 * cfg.stage_epochs:
            raise ConfigError(
                f"field 'epochs' must equal 3 * stage_epochs "
                f"({3 * cfg.stage_epochs}), got {cfg.epochs}"
            )
    if cfg.problem == "poisson":
        if cfg.omega <= 0:
            raise ConfigError("field 'omega' must be positive")
        if cfg.n_interior < 1:
            raise ConfigError("field 'n_interior' must be at least 1")
        if cfg.n_boundary < 4 or cfg.n_boundary % 4:
            raise ConfigError("field 'n_boundary' must be a positive multiple of 4")
    if cfg.problem == "stiffness-probe":
        if any(m < 0 for m in cfg.probe_m):
            raise ConfigError("field 'probe_m' entries must be non-negative")
        if len(cfg.probe_k0) < 2 or any(
            b <= a for a, b in zip(cfg.probe_k0, cfg.probe_k0[1:])
        ):
            raise ConfigError(
                "field 'probe_k0' must list at least two strictly increasing "
                "wavenumbers"
            )
        g = cfg.probe_grid
        if g < 2 or g & (g - 1):
            raise ConfigError("field 'probe_grid' must be a power of two")
        return

    # training fields (all problems that train)
    if cfg.hidden_layers < 1:
        raise ConfigError("field 'hidden_layers' must be at least 1")
    if cfg.width < 1:
        raise ConfigError("field 'width' must be at least 1")
    if cfg.activation not in ("sin", "tanh", "elu"):
        raise ConfigError(
            f"field 'activation' must be sin, tanh, or elu, got {cfg.activation!r}"
        )
    if cfg.epochs < 1:
        raise ConfigError("field 'epochs' must be at least 1")
    if cfg.batch_size < 1:
        raise ConfigError("field 'batch_size' must be at least 1")
    if cfg.lr <= 0:
        raise ConfigError("field 'lr' must be positive")
    if any(m <= 0 for m in cfg.milestones) or any(
        b <= a for a, b in zip(cfg.milestones, cfg.milestones[1:])
    ):
        raise ConfigError("field 'milestones' must be strictly increasing positives")
    if not 0 < cfg.decay_factor <= 1:
        raise ConfigError("field 'decay_factor' must lie in (0, 1]")
    if cfg.weight_cadence < 1:
        raise ConfigError("field 'weight_cadence' must be at least 1")
    if not 0 <= cfg.alpha < 1:
        raise ConfigError("field 'alpha' must lie in [0, 1)")
    if cfg.metric_stride < 1:
        raise ConfigError("field 'metric_stride' must be at least 1")
    if any(s < 0 or s >= cfg.epochs for s in cfg.snapshot_epochs):
        raise ConfigError("field 'snapshot_epochs' entries must lie in [0, epochs)")


def parse_config(path) -> RunConfig:
    """Parse and validate a config file, resolving its preset inheritance."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigError(
                f"syntax error at line {mark.line + 1}, column {mark.column + 1}: "
                f"{getattr(exc, 'problem', exc)}"
            ) from exc
        raise ConfigError(f"syntax error: {exc}") from exc
    if raw is None:
        raise ConfigError("config file is empty")
    return resolve(raw)


def preset_config(name: str) -> RunConfig:
    """Resolve a named preset without a config file."""
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}"
        )
    return resolve({"extends": name})


def config_dict(cfg: RunConfig) -> dict:
    """JSON-ready dict of the resolved config (tuples become lists)."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


# ---------------------------------------------------------------------------
# builders


def build_problem(cfg: RunConfig, seed: int):
    if cfg.problem in ("sobolev", "forgetting"):
        target = SobolevTarget.draw(cfg.modes, seed=seed)
        problem = SobolevProblem(target, grid_n=cfg.grid_n, seed=seed, order=cfg.order)
    elif cfg.problem == "poisson":
        problem = PoissonProblem(
            omega=cfg.omega,
            n_interior=cfg.n_interior,
            n_boundary=cfg.n_boundary,
            seed=seed,
        )
    else:
        raise ConfigError(f"problem '{cfg.problem}' does not build a training problem")
    kern = NetKernel(
        MlpConfig(
            2, 1,
            hidden_layers=cfg.hidden_layers,
            width=cfg.width,
            activation=cfg.activation,
        ),
        problem.norm_stats(),
    )
    problem.bind(kern)
    return problem


def build_strategy(cfg: RunConfig, problem=None):
    if cfg.strategy == "uniform":
        return Uniform()
    if cfg.strategy == "inverse-dirichlet":
        return InverseDirichlet()
    if cfg.strategy == "max-avg":
        return MaxAvg()
    if cfg.strategy == "mgda":
        return MinNorm()
    if cfg.strategy == "epsilon-optimal":
        if problem is None or not hasattr(problem, "energy_integrals"):
            raise ConfigError(
                "strategy 'epsilon-optimal' requires a problem with analytic "
                "energy integrals"
            )
        return EpsilonOptimal(problem.energy_integrals())
    raise ConfigError(f"unknown strategy {cfg.strategy!r}")


def forgetting_stages(cfg: RunConfig) -> tuple[StageSpec, ...]:
    """Sequential schedule: data fit only, then +D1, then +D2."""
    s = cfg.stage_epochs
    return (
        StageSpec(0, (True, False, False)),
        StageSpec(s, (True, True, False)),
        StageSpec(2 * s, (True, True, True)),
    )


def build_training_config(cfg: RunConfig, seed: int) -> TrainingConfig:
    stages = forgetting_stages(cfg) if cfg.problem == "forgetting" else ()
    return TrainingConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        milestones=cfg.milestones,
        decay_factor=cfg.decay_factor,
        weight_cadence=cfg.weight_cadence,
        alpha=cfg.alpha,
        seed=seed,
        stages=stages,
        metric_stride=cfg.metric_stride,
        snapshot_epochs=cfg.snapshot_epochs,
    )
