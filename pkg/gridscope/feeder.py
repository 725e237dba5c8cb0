"""
Synthetic distribution-feeder data: radial feeder models, load/solar profiles,
a per-phase backward/forward sweep power flow, and the PHASE x MEASUREMENT x
TIME state tensor.

Measurement axis (J = 5, fixed order): ``re_v``, ``im_v``, ``abs_v`` in per-unit,
``p`` in kW and ``q`` in kVAr. ``p``/``q`` are net injections (solar minus load,
positive at the slack, which supplies the feeder). Angles are radians inside
the package.

Each phase is solved on its own equivalent network; mutual coupling between
phases is neglected. The slack bus holds 1/0°, 1/-120°, 1/120° on phases a, b, c.
"""

from __future__ import annotations
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .core import FormatError, PowerFlowError, atomic_write_text

MEASUREMENTS = ("re_v", "im_v", "abs_v", "p", "q")
RE_V, IM_V, ABS_V, P, Q = range(5)
UNITS = {"re_v": "pu", "im_v": "pu", "abs_v": "pu", "p": "kW", "q": "kVAr"}
PHASES = "abc"
SLACK_ANGLES = {"a": 0.0, "b": -2.0 * np.pi / 3.0, "c": 2.0 * np.pi / 3.0}

PROFILE_MODES = {
    # spacing in minutes, default start minute
    "consecutive": (1, 11 * 60),
    "nonconsecutive": (20, 0),
}
LOAD_VARIABILITY = 0.01
NONCONSECUTIVE_FACTOR = 5.0
SMOOTHNESS = 0.002


# ===== Feeder model =====
@dataclass(frozen=True)
class Bus:
    name: str
    phases: str
    slack: bool = False


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float


@dataclass(frozen=True)
class Load:
    bus: str
    phase: str
    p_kw: float
    q_kvar: float
    solar_kw: float = 0.0


@dataclass
class FeederModel:
    """Radial feeder. Impedances are per-unit on ``base_kva`` (per phase)."""
    name: str
    base_kva: float
    buses: List[Bus]
    lines: List[Line]
    loads: List[Load] = field(default_factory=list)

    def __post_init__(self):
        self._validate()

    def _validate(self):
        names = [b.name for b in self.buses]
        if len(set(names)) != len(names):
            raise ValueError("duplicate bus names")
        for b in self.buses:
            if not b.phases or any(p not in PHASES for p in b.phases) or len(set(b.phases)) != len(b.phases):
                raise ValueError(f"bus {b.name}: phases must be a subset of 'abc', got {b.phases!r}")
        slack = [b for b in self.buses if b.slack]
        if len(slack) != 1:
            raise ValueError(f"feeder needs exactly one slack bus, found {len(slack)}")
        if slack[0].phases != PHASES:
            raise ValueError("slack bus must carry all three phases")
        if not self.base_kva > 0:
            raise ValueError("base_kva must be positive")
        if len(self.lines) != len(self.buses) - 1:
            raise ValueError(f"a radial feeder with {len(self.buses)} buses needs "
                             f"{len(self.buses) - 1} lines, found {len(self.lines)}")
        by_name = {b.name: b for b in self.buses}
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in by_name:
                    raise ValueError(f"line {ln.from_bus}-{ln.to_bus} references unknown bus {end}")
            if ln.r < 0 or ln.x < 0 or (ln.r == 0 and ln.x == 0):
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} needs a positive impedance")
        parent = self.parents()
        for b in self.buses:
            if b.slack:
                continue
            up = by_name[parent[b.name][0]]
            missing = set(b.phases) - set(up.phases)
            if missing:
                raise ValueError(f"bus {b.name} phases {sorted(missing)} are not fed by bus {up.name}")
        seen = set()
        for ld in self.loads:
            if ld.bus not in by_name or ld.phase not in by_name[ld.bus].phases:
                raise ValueError(f"load on unknown phase {ld.bus}.{ld.phase}")
            if by_name[ld.bus].slack:
                raise ValueError(f"load on slack phase {ld.bus}.{ld.phase}")
            if (ld.bus, ld.phase) in seen:
                raise ValueError(f"duplicate load on {ld.bus}.{ld.phase}")
            seen.add((ld.bus, ld.phase))

    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.slack)

    def parents(self) -> Dict[str, Tuple[str, Line]]:
        """Parent bus and feeding line of every non-slack bus; rejects cycles and islands."""
        adjacency: Dict[str, List[Tuple[str, Line]]] = {b.name: [] for b in self.buses}
        for ln in self.lines:
            adjacency[ln.from_bus].append((ln.to_bus, ln))
            adjacency[ln.to_bus].append((ln.from_bus, ln))
        root = self.slack_bus().name
        parent: Dict[str, Tuple[str, Line]] = {}
        visited = {root}
        queue = [root]
        while queue:
            bus = queue.pop(0)
            for nxt, ln in adjacency[bus]:
                if nxt in visited:
                    if parent.get(bus, (None,))[0] != nxt:
                        raise ValueError(f"feeder has a cycle through bus {nxt}")
                    continue
                visited.add(nxt)
                parent[nxt] = (bus, ln)
                queue.append(nxt)
        unreachable = [b.name for b in self.buses if b.name not in visited]
        if unreachable:
            raise ValueError(f"buses not reachable from the slack bus: {unreachable}")
        return parent

    def phase_nodes(self) -> List[Tuple[str, str]]:
        """(bus, phase) pairs in bus order; this is the tensor's phase axis."""
        return [(b.name, p) for b in self.buses for p in PHASES if p in b.phases]

    def phase_labels(self) -> List[str]:
        return [f"{bus}.{p}" for bus, p in self.phase_nodes()]


def _parse_float(tok: str, path, lineno) -> float:
    try:
        return float(tok)
    except ValueError:
        raise FormatError(path, lineno, f"not a number: {tok!r}") from None


def parse_feeder(text: str, source: Union[str, Path] = "<feeder>") -> FeederModel:
    """Parse the feeder model text format (see docs/usage.md)."""
    header: Dict[str, str] = {}
    buses: List[Bus] = []
    lines: List[Line] = []
    loads: List[Load] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("buses", "lines", "loads"):
                raise FormatError(source, lineno, f"unknown section [{section}]")
            continue
        tok = line.split()
        if section is None:
            if len(tok) != 2:
                raise FormatError(source, lineno, f"expected 'key value', got {line!r}")
            header[tok[0]] = tok[1]
        elif section == "buses":
            if len(tok) not in (2, 3) or (len(tok) == 3 and tok[2] != "slack"):
                raise FormatError(source, lineno, "bus lines are 'name phases [slack]'")
            buses.append(Bus(tok[0], tok[1], len(tok) == 3))
        elif section == "lines":
            if len(tok) != 4:
                raise FormatError(source, lineno, "line entries are 'from to r_pu x_pu'")
            lines.append(Line(tok[0], tok[1], _parse_float(tok[2], source, lineno),
                              _parse_float(tok[3], source, lineno)))
        else:
            if len(tok) not in (4, 5):
                raise FormatError(source, lineno, "load entries are 'bus phase p_kw q_kvar [solar_kw]'")
            vals = [_parse_float(t, source, lineno) for t in tok[2:]]
            loads.append(Load(tok[0], tok[1], *vals))
    unknown = set(header) - {"name", "base_kva"}
    if unknown:
        raise FormatError(source, None, f"unknown header keys {sorted(unknown)}")
    try:
        return FeederModel(header.get("name", Path(str(source)).stem),
                           float(header.get("base_kva", "100")), buses, lines, loads)
    except ValueError as e:
        raise FormatError(source, None, str(e)) from None


def read_feeder(path: Union[str, Path]) -> FeederModel:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, None, "feeder file not found")
    return parse_feeder(path.read_text(), path)


def format_feeder(model: FeederModel) -> str:
    out = [f"name {model.name}", f"base_kva {model.base_kva:g}", "", "[buses]", "# name phases [slack]"]
    out += [f"{b.name} {b.phases}" + (" slack" if b.slack else "") for b in model.buses]
    out += ["", "[lines]", "# from to r_pu x_pu"]
    out += [f"{ln.from_bus} {ln.to_bus} {ln.r:.6g} {ln.x:.6g}" for ln in model.lines]
    out += ["", "[loads]", "# bus phase p_kw q_kvar solar_kw"]
    out += [f"{ld.bus} {ld.phase} {ld.p_kw:.6g} {ld.q_kvar:.6g} {ld.solar_kw:.6g}" for ld in model.loads]
    return "\n".join(out) + "\n"


def write_feeder(model: FeederModel, path: Union[str, Path]):
    atomic_write_text(Path(path), format_feeder(model))


def generate_feeder(n_buses: int = 50, seed: int = 0, base_kva: float = 100.0,
                    zero_injection_share: float = 0.15, solar_share: float = 0.3) -> FeederModel:
    """Random radial feeder: a three-phase trunk with one-, two- and three-phase laterals."""
    if n_buses < 2:
        raise ValueError("a feeder needs at least two buses")
    rng = np.random.default_rng(seed)
    trunk_len = max(1, n_buses // 3)
    buses = [Bus("1", PHASES, True)]
    lines: List[Line] = []
    for t in range(2, trunk_len + 2):
        buses.append(Bus(str(t), PHASES))
        lines.append(Line(str(t - 1), str(t), 0.003, 0.006))
    lateral_phases = ["abc", "ab", "bc", "ac", "a", "b", "c"]
    for n in range(len(buses) + 1, n_buses + 1):
        up = buses[int(rng.integers(1, len(buses)))]
        choices = [p for p in lateral_phases if set(p) <= set(up.phases)]
        phases = choices[int(rng.integers(len(choices)))]
        buses.append(Bus(str(n), phases))
        lines.append(Line(up.name, str(n), round(float(rng.uniform(0.004, 0.008)), 4),
                          round(float(rng.uniform(0.006, 0.010)), 4)))
    loads = []
    for b in buses[1:]:
        for p in b.phases:
            if rng.random() < zero_injection_share:
                continue
            p_kw = round(float(rng.uniform(1.0, 5.0)), 2)
            solar = round(0.5 * p_kw * float(rng.uniform(0.3, 0.9)), 2) if rng.random() < solar_share else 0.0
            loads.append(Load(b.name, p, p_kw, round(0.4 * p_kw, 2), solar))
    return FeederModel(f"generated_{n_buses}_{seed}", base_kva, buses, lines, loads)


# ===== Profiles =====
@dataclass
class ProfileSet:
    """Per-phase load (kW, kVAr) and solar (kW) series, shape (n_phases, K)."""
    mode: str
    timestamps: np.ndarray
    load_p_kw: np.ndarray
    load_q_kvar: np.ndarray
    solar_kw: np.ndarray
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    @property
    def spacing_min(self) -> int:
        return PROFILE_MODES[self.mode][0]


def _daily_load(hours: np.ndarray) -> np.ndarray:
    return (0.55 + 0.25 * np.exp(-((hours - 8.0) / 2.0) ** 2)
            + 0.35 * np.exp(-((hours - 19.0) / 2.5) ** 2))


def _solar_shape(hours: np.ndarray) -> np.ndarray:
    return np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None) ** 1.2


def _variation(mode: str, shape: Tuple[int, int], rng: np.random.Generator, smoothness: float) -> np.ndarray:
    """Multiplicative load variation. Consecutive mode: AR(1) with increments
    clipped to +-smoothness. Nonconsecutive mode: independent draws with five
    times the spread."""
    n, K = shape
    if mode == "nonconsecutive":
        return rng.normal(0.0, NONCONSECUTIVE_FACTOR * LOAD_VARIABILITY, shape)
    rho = 0.95
    sigma = LOAD_VARIABILITY * np.sqrt(1.0 - rho ** 2)
    out = np.empty(shape)
    out[:, 0] = rng.normal(0.0, LOAD_VARIABILITY, n)
    for k in range(1, K):
        step = (rho - 1.0) * out[:, k - 1] + rng.normal(0.0, sigma, n)
        out[:, k] = out[:, k - 1] + np.clip(step, -smoothness, smoothness)
    return out


def make_profiles(feeder: FeederModel, mode: str = "consecutive", n_steps: int = 72, seed: int = 0,
                  start_minute: Optional[int] = None, smoothness: float = SMOOTHNESS) -> ProfileSet:
    """Diversified load and solar series for every phase of ``feeder``.

    ``consecutive`` samples every minute from 11:00 (high solar output);
    ``nonconsecutive`` samples every 20 minutes over a day.
    """
    if mode not in PROFILE_MODES:
        raise ValueError(f"profile mode must be one of {sorted(PROFILE_MODES)}, got {mode!r}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    spacing, default_start = PROFILE_MODES[mode]
    start = default_start if start_minute is None else int(start_minute)
    timestamps = start + spacing * np.arange(n_steps)
    hours = (timestamps % 1440) / 60.0

    nodes = feeder.phase_nodes()
    index = {node: i for i, node in enumerate(nodes)}
    n = len(nodes)
    base_p = np.zeros(n)
    base_q = np.zeros(n)
    base_s = np.zeros(n)
    for ld in feeder.loads:
        i = index[(ld.bus, ld.phase)]
        base_p[i], base_q[i], base_s[i] = ld.p_kw, ld.q_kvar, ld.solar_kw

    rng = np.random.default_rng(seed)
    shift = rng.uniform(-1.0, 1.0, n)
    cloud = rng.uniform(0.8, 1.0, n)
    load_var = _variation(mode, (n, n_steps), rng, smoothness)
    solar_var = 0.5 * _variation(mode, (n, n_steps), rng, smoothness)

    shape = _daily_load(hours[None, :] + shift[:, None]) * (1.0 + load_var)
    sun = _solar_shape(hours)[None, :] * cloud[:, None] * (1.0 + solar_var)
    return ProfileSet(mode, timestamps.astype(int), base_p[:, None] * shape,
                      base_q[:, None] * shape, base_s[:, None] * np.clip(sun, 0.0, None), seed)


# ===== Power flow =====
@dataclass
class _PhaseNetwork:
    labels: List[str]
    slack: np.ndarray
    z: np.ndarray
    v_slack: np.ndarray
    downstream: np.ndarray
    children: np.ndarray


def _phase_network(feeder: FeederModel) -> _PhaseNetwork:
    nodes = feeder.phase_nodes()
    index = {node: i for i, node in enumerate(nodes)}
    n = len(nodes)
    parent_of = feeder.parents()
    parent = np.full(n, -1)
    z = np.zeros(n, dtype=complex)
    slack = np.zeros(n, dtype=bool)
    v_slack = np.zeros(n, dtype=complex)
    for i, (bus, p) in enumerate(nodes):
        if bus == feeder.slack_bus().name:
            slack[i] = True
        else:
            up, ln = parent_of[bus]
            parent[i] = index[(up, p)]
            z[i] = complex(ln.r, ln.x)
    root_angle = np.array([SLACK_ANGLES[p] for _, p in nodes])
    v_slack[:] = np.exp(1j * root_angle)

    children = np.zeros((n, n))
    children[parent[parent >= 0], np.flatnonzero(parent >= 0)] = 1.0
    # downstream[m, k] = 1 when node k lies in the subtree rooted at m
    downstream = np.eye(n)
    reach = children.copy()
    while reach.any():
        downstream += reach
        reach = reach @ children
    return _PhaseNetwork(feeder.phase_labels(), slack, z, v_slack, np.minimum(downstream, 1.0), children)


def _mismatch(net: _PhaseNetwork, V: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Complex power mismatch per non-slack node, shape (n, K)."""
    I_branch = np.zeros_like(V)
    live = ~net.slack
    parent_v = net.children.T @ V
    I_branch[live] = (parent_v[live] - V[live]) / net.z[live, None]
    I_node = I_branch - net.children @ I_branch
    out = V * np.conj(I_node) - S
    out[net.slack] = 0.0
    return np.abs(out)


def solve_power_flow(net: _PhaseNetwork, S: np.ndarray, tol: float = 1e-10,
                     max_iter: int = 100) -> np.ndarray:
    """Backward/forward sweep for all time steps at once.

    ``S`` holds per-unit complex consumption, shape (n, K). Returns voltages (n, K).
    """
    n, K = S.shape
    V0 = np.repeat(net.v_slack[:, None], K, axis=1)
    for _ in range(max_iter):
        V = _sweep(net, V0, S)
        if not np.all(np.isfinite(V)) or np.any(np.abs(V) < 0.5):
            bad = int(np.flatnonzero(~np.all(np.isfinite(V) & (np.abs(V) >= 0.5), axis=0))[0])
            raise PowerFlowError(bad, "infeasible loading (voltage collapse)")
        residual = _mismatch(net, V, S).max(axis=0)
        V0 = V
        if np.all(residual <= tol):
            return V
    bad = int(np.flatnonzero(residual > tol)[0])
    raise PowerFlowError(bad, f"no convergence after {max_iter} sweeps (mismatch {residual[bad]:.3e})")


def _sweep(net: _PhaseNetwork, V: np.ndarray, S: np.ndarray) -> np.ndarray:
    I_load = np.conj(S / V)
    I_branch = net.downstream @ I_load
    drop = net.z[:, None] * I_branch
    drop[net.slack] = 0.0
    root = net.downstream.T[:, net.slack] @ net.v_slack[net.slack]
    return root[:, None] - net.downstream.T @ drop


# ===== State tensor =====
@dataclass
class StateTensorMeta:
    phase_labels: List[str]
    timestamps: List[int]
    zero_injection: List[bool]
    slack: List[bool]
    spacing_min: int = 1
    measurement_axis: Tuple[str, ...] = MEASUREMENTS
    units: Dict[str, str] = field(default_factory=lambda: dict(UNITS))

    def __post_init__(self):
        n = len(self.phase_labels)
        if len(self.zero_injection) != n or len(self.slack) != n:
            raise ValueError("phase flags must match the phase labels")
        if len(set(self.phase_labels)) != n:
            raise ValueError("phase labels must be unique")
        if tuple(self.measurement_axis) != MEASUREMENTS:
            raise ValueError(f"measurement axis must be {MEASUREMENTS}")

    @property
    def n_phases(self) -> int:
        return len(self.phase_labels)

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.n_phases, len(MEASUREMENTS), self.n_steps

    def to_dict(self) -> Dict:
        return {
            "phase_labels": list(self.phase_labels),
            "timestamps_min": [int(t) for t in self.timestamps],
            "spacing_min": int(self.spacing_min),
            "zero_injection": [bool(z) for z in self.zero_injection],
            "slack": [bool(s) for s in self.slack],
            "measurement_axis": list(self.measurement_axis),
            "units": dict(self.units),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "StateTensorMeta":
        return cls(list(data["phase_labels"]), [int(t) for t in data["timestamps_min"]],
                   [bool(z) for z in data["zero_injection"]], [bool(s) for s in data["slack"]],
                   int(data.get("spacing_min", 1)), tuple(data.get("measurement_axis", MEASUREMENTS)),
                   dict(data.get("units", UNITS)))


def write_meta(meta: StateTensorMeta, path: Union[str, Path]):
    atomic_write_text(Path(path), json.dumps(meta.to_dict(), indent=2) + "\n")


def read_meta(path: Union[str, Path]) -> StateTensorMeta:
    path = Path(path)
    try:
        return StateTensorMeta.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(path, e.lineno, e.msg) from None
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(path, None, f"invalid meta: {e}") from None


def simulate(feeder: FeederModel, profiles: ProfileSet, tol: float = 1e-10,
             max_iter: int = 100) -> Tuple[np.ndarray, StateTensorMeta]:
    """Solve the feeder at every time step and fill the state tensor."""
    net = _phase_network(feeder)
    n = len(net.labels)
    for name in ("load_p_kw", "load_q_kvar", "solar_kw"):
        arr = getattr(profiles, name)
        if arr.shape != (n, profiles.n_steps):
            raise ValueError(f"profile {name} has shape {arr.shape}, feeder needs {(n, profiles.n_steps)}")
    consumption_kw = profiles.load_p_kw - profiles.solar_kw
    S = (consumption_kw + 1j * profiles.load_q_kvar) / feeder.base_kva
    S[net.slack] = 0.0
    V = solve_power_flow(net, S, tol, max_iter)

    injection = -S
    I_root = net.downstream @ np.conj(S / V)
    injection[net.slack] = V[net.slack] * np.conj(I_root[net.slack])
    zero = ~net.slack & ~np.any(np.abs(S) > 0, axis=1)
    injection[zero] = 0.0

    X = np.empty((n, len(MEASUREMENTS), profiles.n_steps))
    X[:, RE_V] = V.real
    X[:, IM_V] = V.imag
    X[:, ABS_V] = np.abs(V)
    X[:, P] = injection.real * feeder.base_kva
    X[:, Q] = injection.imag * feeder.base_kva
    meta = StateTensorMeta(net.labels, [int(t) for t in profiles.timestamps],
                           [bool(z) for z in zero], [bool(s) for s in net.slack],
                           profiles.spacing_min)
    return X, meta


def zero_injection_extras(meta: StateTensorMeta) -> np.ndarray:
    """Entries known to be zero: p and q of every zero-injection phase at all times."""
    M = np.zeros(meta.dims, dtype=bool)
    zero = np.asarray(meta.zero_injection, dtype=bool)
    M[np.ix_(zero, [P, Q], np.arange(meta.n_steps))] = True
    return M


def add_noise(X, M, percent: float, seed: int) -> np.ndarray:
    """Multiplicative Gaussian noise ``x (1 + percent/100 g)`` on observed entries only."""
    if percent < 0:
        raise ValueError("noise percent must be >= 0")
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=bool)
    if M.shape != X.shape:
        raise ValueError(f"mask dims {M.shape} do not match tensor dims {X.shape}")
    if percent == 0:
        return X.copy()
    g = np.random.default_rng(seed).standard_normal(X.shape)
    return np.where(M, X * (1.0 + percent / 100.0 * g), X)


# ===== Records (CSV) =====
def _column(name: str) -> str:
    return f"{name}[{UNITS[name]}]"


RECORD_COLUMNS = ["timestamp_min", "phase"] + [_column(m) for m in MEASUREMENTS]


def records_from_tensor(X, meta: StateTensorMeta, M=None) -> pd.DataFrame:
    """One row per (timestamp, phase); unobserved entries are left empty."""
    X = np.asarray(X, dtype=float)
    if M is not None:
        X = np.where(np.asarray(M, dtype=bool), X, np.nan)
    K, I = meta.n_steps, meta.n_phases
    data = {
        "timestamp_min": np.repeat(np.asarray(meta.timestamps, dtype=int), I),
        "phase": np.tile(np.asarray(meta.phase_labels, dtype=object), K),
    }
    for j, name in enumerate(MEASUREMENTS):
        data[_column(name)] = X[:, j, :].T.ravel()
    return pd.DataFrame(data, columns=RECORD_COLUMNS)


def _parse_unit_columns(columns: Sequence[str]) -> Dict[str, str]:
    found: Dict[str, str] = {}
    for col in columns:
        if col in ("timestamp_min", "phase"):
            continue
        if "[" not in col or not col.endswith("]"):
            raise ValueError(f"column {col!r} does not declare a unit as name[unit]")
        name, unit = col[:-1].split("[", 1)
        if name not in UNITS:
            raise ValueError(f"unknown measurement column {col!r}")
        if unit != UNITS[name]:
            raise ValueError(f"unit mismatch for {name}: got {unit!r}, expected {UNITS[name]!r}")
        found[name] = col
    return found


def build_state_tensor(records: pd.DataFrame, meta: StateTensorMeta) -> Tuple[np.ndarray, np.ndarray]:
    """Place each record's measurements at (phase, measurement, time).

    Returns the tensor and its observation mask; absent rows and empty cells are
    unobserved (stored as 0.0 in the tensor).
    """
    for col in ("timestamp_min", "phase"):
        if col not in records.columns:
            raise ValueError(f"records need a {col!r} column")
    columns = _parse_unit_columns(records.columns)
    dup = records.duplicated(subset=["timestamp_min", "phase"])
    if dup.any():
        first = records[dup].iloc[0]
        raise ValueError(f"duplicate record for phase {first['phase']} at minute {first['timestamp_min']}")

    phase_index = {label: i for i, label in enumerate(meta.phase_labels)}
    time_index = {int(t): k for k, t in enumerate(meta.timestamps)}
    phases = records["phase"].astype(str)
    unknown = sorted(set(phases) - set(phase_index))
    if unknown:
        raise ValueError(f"records name unknown phases {unknown[:5]}")
    times = records["timestamp_min"].astype(int)
    bad_times = sorted(set(times) - set(time_index))
    if bad_times:
        raise ValueError(f"records hold timestamps outside the meta axis {bad_times[:5]}")
    ii = phases.map(phase_index).to_numpy()
    kk = times.map(time_index).to_numpy()

    X = np.zeros(meta.dims)
    M = np.zeros(meta.dims, dtype=bool)
    for j, name in enumerate(MEASUREMENTS):
        if name not in columns:
            continue
        values = pd.to_numeric(records[columns[name]], errors="coerce").to_numpy(dtype=float)
        seen = np.isfinite(values)
        X[ii[seen], j, kk[seen]] = values[seen]
        M[ii[seen], j, kk[seen]] = True
    return X, M


def write_records_csv(records: pd.DataFrame, path: Union[str, Path]):
    atomic_write_text(Path(path), records.to_csv(index=False, float_format="%.17g"))


def read_records_csv(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, None, "file not found")
    try:
        return pd.read_csv(path, dtype={"phase": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(path, None, str(e)) from None
