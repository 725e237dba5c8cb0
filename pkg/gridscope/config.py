"""
Experiment configuration: a JSON file mapped onto frozen dataclasses.

Unknown keys at any level are rejected with their dotted path. Phase and
time-step indices in config files are one-based.
"""

from __future__ import annotations
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .core import CONFIG_DIR, ConfigError, FormatError, atomic_write_text
from .feeder import PROFILE_MODES
from .metrics import SCOPES


@dataclass(frozen=True)
class FeederSpec:
    file: str = "default"                 # bundled name or path
    n_buses: Optional[int] = None         # generate a feeder instead of reading ``file``
    generator_seed: int = 0


@dataclass(frozen=True)
class ProfileSpec:
    mode: str = "consecutive"
    n_steps: int = 72
    seed: int = 0
    start_minute: Optional[int] = None


@dataclass(frozen=True)
class SchemeSpec:
    kind: str = "slab"
    n_phases: int = 16                    # slab: sampled phases, slack included
    n_steps: int = 3                      # slab: sampled time steps
    n_power_rows: int = 16                # fiber: rows of the power pattern, slack included
    horizontal: Optional[Tuple[int, ...]] = None   # explicit one-based sets override the sizes
    frontal: Optional[Tuple[int, ...]] = None
    vertical: Tuple[int, ...] = ()
    levels: Tuple[Tuple[int, int], ...] = ()       # slab sweep: (n_phases, n_steps) per level
    cases: Tuple[int, ...] = ()                     # fiber sweep: n_power_rows per case


@dataclass(frozen=True)
class FitSpec:
    rank: int = 11
    max_sweeps: int = 500
    rel_tol: float = 1e-9
    restarts: int = 5
    k_max: int = 15
    column_scaling: bool = True           # fit each measurement column at unit RMS


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    feeder: FeederSpec = field(default_factory=FeederSpec)
    profile: ProfileSpec = field(default_factory=ProfileSpec)
    scheme: SchemeSpec = field(default_factory=SchemeSpec)
    fit: FitSpec = field(default_factory=FitSpec)
    noise_percent: Tuple[float, ...] = (0.0,)
    runs: int = 50
    seed: int = 0
    scope: str = "held_out"
    out: str = "gridscope_results"
    override_identifiability: bool = False
    threads: int = 1


_NESTED = {"feeder": FeederSpec, "profile": ProfileSpec, "scheme": SchemeSpec, "fit": FitSpec}


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _build(cls, data: Dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{prefix}{key}.")
        else:
            kwargs[key] = _freeze(value)
    return cls(**kwargs)


_INT_KEYS = (
    "profile.n_steps", "profile.seed", "feeder.generator_seed", "scheme.n_phases", "scheme.n_steps",
    "scheme.n_power_rows", "fit.rank", "fit.max_sweeps", "fit.restarts", "fit.k_max", "runs", "seed",
    "threads",
)
_OPTIONAL_INT_KEYS = ("feeder.n_buses", "profile.start_minute")
_STR_KEYS = ("name", "out", "scope", "feeder.file", "profile.mode", "scheme.kind")
_BOOL_KEYS = ("override_identifiability", "fit.column_scaling")


def _lookup(cfg: ExperimentConfig, key: str) -> Any:
    value: Any = cfg
    for part in key.split("."):
        value = getattr(value, part)
    return value


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_types(cfg: ExperimentConfig):
    def wrong(key: str, expected: str):
        value = _lookup(cfg, key)
        raise ConfigError(f"{key}: expected {expected}, got {type(value).__name__} {value!r}")

    for key in _INT_KEYS:
        if not _is_int(_lookup(cfg, key)):
            wrong(key, "an integer")
    for key in _OPTIONAL_INT_KEYS:
        value = _lookup(cfg, key)
        if value is not None and not _is_int(value):
            wrong(key, "an integer or null")
    for key in _STR_KEYS:
        if not isinstance(_lookup(cfg, key), str):
            wrong(key, "a string")
    for key in _BOOL_KEYS:
        if not isinstance(_lookup(cfg, key), bool):
            wrong(key, "true or false")
    if not _is_real(cfg.fit.rel_tol):
        wrong("fit.rel_tol", "a number")
    if not isinstance(cfg.noise_percent, tuple) or not all(_is_real(p) for p in cfg.noise_percent):
        wrong("noise_percent", "a list of numbers")
    for key in ("levels", "cases", "vertical"):
        if not isinstance(getattr(cfg.scheme, key), tuple):
            wrong(f"scheme.{key}", "a list")
    for level in cfg.scheme.levels:
        if not isinstance(level, tuple) or not all(_is_int(v) for v in level):
            wrong("scheme.levels", "a list of [n_phases, n_steps] integer pairs")
    if not all(_is_int(v) for v in cfg.scheme.cases):
        wrong("scheme.cases", "a list of integers")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(ok: bool, key: str, msg: str):
        if not ok:
            raise ConfigError(f"{key}: {msg}")

    _check_types(cfg)
    need(cfg.profile.mode in PROFILE_MODES, "profile.mode", f"must be one of {sorted(PROFILE_MODES)}")
    need(cfg.profile.n_steps >= 1, "profile.n_steps", "must be >= 1")
    need(cfg.feeder.n_buses is None or cfg.feeder.n_buses >= 2, "feeder.n_buses", "must be >= 2")
    need(cfg.scheme.kind in ("slab", "fiber"), "scheme.kind", "must be 'slab' or 'fiber'")
    need(cfg.scheme.n_phases >= 0 and cfg.scheme.n_steps >= 0, "scheme", "sizes must be >= 0")
    for level in cfg.scheme.levels:
        need(len(level) == 2, "scheme.levels", "each level is [n_phases, n_steps]")
    for key in ("horizontal", "frontal", "vertical"):
        values = getattr(cfg.scheme, key) or ()
        need(all(isinstance(v, int) and v >= 1 for v in values), f"scheme.{key}", "one-based indices expected")
    need(cfg.fit.rank >= 1, "fit.rank", "must be >= 1")
    need(cfg.fit.max_sweeps >= 1 and cfg.fit.restarts >= 1, "fit", "max_sweeps and restarts must be >= 1")
    need(cfg.fit.rel_tol > 0, "fit.rel_tol", "must be > 0")
    need(cfg.fit.k_max >= 1, "fit.k_max", "must be >= 1")
    need(all(p >= 0 for p in cfg.noise_percent), "noise_percent", "levels must be >= 0")
    need(len(cfg.noise_percent) >= 1, "noise_percent", "needs at least one level")
    need(cfg.runs >= 1, "runs", "must be >= 1")
    need(cfg.threads >= 1, "threads", "must be >= 1")
    need(cfg.scope in SCOPES, "scope", f"must be one of {SCOPES}")
    return cfg


def config_from_dict(data: Dict) -> ExperimentConfig:
    try:
        return validate(_build(ExperimentConfig, data))
    except TypeError as e:
        raise ConfigError(f"invalid config: {e}") from None


def resolve_config_path(name: Union[str, Path]) -> Path:
    """A path, or the name of a checked-in config (``tiny``, ``slab_consecutive`` ...)."""
    path = Path(name).expanduser()
    if path.exists():
        return path
    bundled = CONFIG_DIR / f"{name}.json"
    if bundled.exists():
        return bundled
    raise ConfigError(f"config {name!r} is neither a file nor a bundled config")


def load_config(name: Union[str, Path]) -> ExperimentConfig:
    path = resolve_config_path(name)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(path, e.lineno, e.msg) from None
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    override_identifiability: bool = False) -> ExperimentConfig:
    changes: Dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if out is not None:
        changes["out"] = str(out)
    if override_identifiability:
        changes["override_identifiability"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg


def config_to_dict(cfg: ExperimentConfig) -> Dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def write_config(cfg: ExperimentConfig, path: Union[str, Path]):
    atomic_write_text(Path(path), json.dumps(config_to_dict(cfg), indent=2) + "\n")
