"""
Structured sampling of the state tensor and identifiability certification.

Two schemes are supported:

* slab sampling: fully observed phases (horizontal slabs) and fully observed
  time steps (frontal slabs); vertical slabs may be added to a mask but are not
  covered by the certificate;
* fiber sampling: two (rows x measurement columns) rectangles, each observed
  at every time step.

The certificates are cardinality inequalities. Every ``floor(.)`` in them is
read as ``floor(log2(.))``: with that reading the slab condition at F = 11 on a
263 x 5 x 72 tensor needs exactly 16 phases and 3 time steps, and the fiber
condition at F = 8 needs 16 rows per pattern. A literal floor of the
cardinalities reproduces neither threshold.

Certificates never look at tensor values. They promise recovery almost surely
when the true factors follow an absolutely continuous distribution; that
assumption is stated in every report, not tested.
"""

from __future__ import annotations
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import FormatError, atomic_write_text
from .feeder import ABS_V, IM_V, P, Q, RE_V, StateTensorMeta
from .tensor import check_mask

ASSUMPTION = ("recovery holds almost surely when the true factors are drawn from an "
              "absolutely continuous distribution")
VOLTAGE_COLS = (RE_V, IM_V, ABS_V)
POWER_COLS = (P, Q)


def flog2(n: int) -> float:
    """``floor(log2(n))`` for positive integers, ``-inf`` for zero."""
    n = int(n)
    if n < 0:
        raise ValueError(f"cardinality must be >= 0, got {n}")
    return float(n.bit_length() - 1) if n > 0 else -math.inf


def _log2(x: float) -> float:
    return math.log2(x) if x > 0 else -math.inf


def _index_set(values: Iterable[int], bound: int, what: str) -> FrozenSet[int]:
    out = frozenset(int(v) for v in values)
    bad = sorted(v for v in out if not 0 <= v < bound)
    if bad:
        raise ValueError(f"{what} indices out of range [0, {bound}): {bad}")
    return out


def _dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


# ===== Schemes =====
@dataclass(frozen=True)
class SlabScheme:
    dims: Tuple[int, int, int]
    horizontal_set: FrozenSet[int] = frozenset()
    frontal_set: FrozenSet[int] = frozenset()
    vertical_set: FrozenSet[int] = frozenset()

    def __post_init__(self):
        dims = _dims(self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "horizontal_set", _index_set(self.horizontal_set, dims[0], "horizontal"))
        object.__setattr__(self, "vertical_set", _index_set(self.vertical_set, dims[1], "vertical"))
        object.__setattr__(self, "frontal_set", _index_set(self.frontal_set, dims[2], "frontal"))

    @property
    def I_h(self) -> int:
        return len(self.horizontal_set)

    @property
    def K_f(self) -> int:
        return len(self.frontal_set)


@dataclass(frozen=True)
class FiberPattern:
    rows: FrozenSet[int]
    cols: FrozenSet[int]


@dataclass(frozen=True)
class FiberScheme:
    dims: Tuple[int, int, int]
    patterns: Tuple[FiberPattern, FiberPattern]

    def __post_init__(self):
        dims = _dims(self.dims)
        object.__setattr__(self, "dims", dims)
        if len(self.patterns) != 2:
            raise ValueError(f"fiber sampling uses exactly two patterns, got {len(self.patterns)}")
        pats = tuple(
            FiberPattern(_index_set(p.rows, dims[0], f"pattern {d} row"),
                         _index_set(p.cols, dims[1], f"pattern {d} column"))
            for d, p in enumerate(self.patterns, start=1)
        )
        object.__setattr__(self, "patterns", pats)


Scheme = Union[SlabScheme, FiberScheme]


# ===== Masks =====
def build_slab_mask(s: SlabScheme) -> np.ndarray:
    I, J, K = s.dims
    h = np.zeros(I, dtype=bool)
    h[list(s.horizontal_set)] = True
    v = np.zeros(J, dtype=bool)
    v[list(s.vertical_set)] = True
    f = np.zeros(K, dtype=bool)
    f[list(s.frontal_set)] = True
    return h[:, None, None] | v[None, :, None] | f[None, None, :]


def build_fiber_mask(s: FiberScheme) -> np.ndarray:
    I, J, K = s.dims
    plane = np.zeros((I, J), dtype=bool)
    for p in s.patterns:
        rows = np.zeros(I, dtype=bool)
        rows[list(p.rows)] = True
        cols = np.zeros(J, dtype=bool)
        cols[list(p.cols)] = True
        plane |= rows[:, None] & cols[None, :]
    return np.repeat(plane[:, :, None], K, axis=2)


def build_mask(s: Scheme) -> np.ndarray:
    if isinstance(s, SlabScheme):
        return build_slab_mask(s)
    return build_fiber_mask(s)


def sampling_fraction(M, extra_known=None) -> float:
    """Percentage of entries observed by ``M`` or known through ``extra_known``."""
    M = check_mask(M)
    if extra_known is not None:
        M = M | check_mask(extra_known, M.shape)
    return 100.0 * float(M.sum()) / M.size


# ===== Reports =====
@dataclass(frozen=True)
class Clause:
    name: str
    lhs: float
    op: str
    rhs: float

    @property
    def holds(self) -> bool:
        if self.op == ">=":
            return self.lhs >= self.rhs
        if self.op == "<=":
            return self.lhs <= self.rhs
        return self.lhs == self.rhs


@dataclass
class IdentifiabilityReport:
    kind: str
    rank: int
    satisfied: bool
    which_condition: str
    clauses: List[Clause] = field(default_factory=list)
    note: str = ASSUMPTION

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "rank": self.rank,
            "satisfied": self.satisfied,
            "which_condition": self.which_condition,
            "clauses": [
                {"name": c.name, "lhs": _finite(c.lhs), "op": c.op, "rhs": _finite(c.rhs), "holds": c.holds}
                for c in self.clauses
            ],
            "note": self.note,
        }

    def to_key_value(self) -> str:
        lines = [f"kind={self.kind}", f"rank={self.rank}",
                 f"satisfied={int(self.satisfied)}", f"which_condition={self.which_condition}"]
        for c in self.clauses:
            key = c.name.replace(" ", "_")
            lines.append(f"{key}.lhs={_fmt(c.lhs)}")
            lines.append(f"{key}.rhs={_fmt(c.rhs)}")
            lines.append(f"{key}.holds={int(c.holds)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        status = "SATISFIED" if self.satisfied else "VIOLATED"
        out = [f"[Identifiability] {self.kind} scheme, F = {self.rank}: {status} ({self.which_condition})"]
        width = max((len(c.name) for c in self.clauses), default=0)
        for c in self.clauses:
            mark = "ok" if c.holds else "FAILS"
            out.append(f"  {c.name:<{width}}  {_fmt(c.lhs):>9} {c.op} {_fmt(c.rhs):<9} {mark}")
        out.append(f"  note: {self.note}")
        return "\n".join(out) + "\n"


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return f"{x:.4f}".rstrip("0").rstrip(".") if x != int(x) else str(int(x))


def _finite(x: float):
    return None if math.isinf(x) else x


# ===== Certificates =====
def generic_identifiability(I: int, J: int, K: int, F: int) -> IdentifiabilityReport:
    """Generic CPD uniqueness: F <= 2^(floor(log2 J') + floor(log2 K') - 2) with
    J', K' the two smaller dimensions."""
    _, d2, d3 = sorted(_dims((I, J, K)), reverse=True)
    bound = 2.0 ** (flog2(d2) + flog2(d3) - 2)
    clause = Clause("generic F <= 2^(floor(log2 J)+floor(log2 K)-2)", float(F), "<=", bound)
    which = "generic bound" if clause.holds else clause.name
    return IdentifiabilityReport("generic", int(F), clause.holds, which, [clause])


def _slab_clauses(I: int, J: int, K: int, I_h: int, K_f: int, F: int) -> Tuple[List[Clause], List[Clause]]:
    t = _log2(4 * F)
    c1 = [
        Clause("cond1 floor(log2 Ih)+floor(log2 J)", flog2(I_h) + flog2(J), ">=", t),
        Clause("cond1 floor(log2 J)+floor(log2 K)", flog2(J) + flog2(K), ">=", t),
        Clause("cond1 floor(log2 Ih)+floor(log2 K)", flog2(I_h) + flog2(K), ">=", t),
        Clause("cond1 log2(4 J Kf)", _log2(4 * J * K_f), ">=", t),
    ]
    c2 = [
        Clause("cond2 floor(log2 I)+floor(log2 J)", flog2(I) + flog2(J), ">=", t),
        Clause("cond2 floor(log2 J)+floor(log2 Kf)", flog2(J) + flog2(K_f), ">=", t),
        Clause("cond2 floor(log2 I)+floor(log2 Kf)", flog2(I) + flog2(K_f), ">=", t),
        Clause("cond2 log2(4 Ih J)", _log2(4 * I_h * J), ">=", t),
    ]
    return c1, c2


def _slab_passes(I, J, K, I_h, K_f, F) -> Tuple[bool, bool]:
    c1, c2 = _slab_clauses(I, J, K, I_h, K_f, F)
    return all(c.holds for c in c1), all(c.holds for c in c2)


def check_slab_conditions(s: SlabScheme, F: int) -> IdentifiabilityReport:
    if int(F) < 1:
        raise ValueError("rank must be >= 1")
    I, J, K = s.dims
    c1, c2 = _slab_clauses(I, J, K, s.I_h, s.K_f, int(F))
    ok1, ok2 = all(c.holds for c in c1), all(c.holds for c in c2)
    if ok1:
        which = "condition 1"
    elif ok2:
        which = "condition 2"
    else:
        which = next(c.name for c in c1 if not c.holds)
    return IdentifiabilityReport("slab", int(F), ok1 or ok2, which, c1 + c2)


def check_fiber_conditions(s: FiberScheme, F: int) -> IdentifiabilityReport:
    if int(F) < 1:
        raise ValueError("rank must be >= 1")
    I, J, K = s.dims
    p1, p2 = s.patterns
    t = _log2(4 * int(F))
    clauses: List[Clause] = []
    for d, p in enumerate(s.patterns, start=1):
        clauses.append(Clause(f"cond1 |Sr{d}| >= 2", float(len(p.rows)), ">=", 2.0))
        clauses.append(Clause(f"cond1 |Sc{d}| >= 2", float(len(p.cols)), ">=", 2.0))
    clauses.append(Clause("cond2 rows cover all phases", float(len(p1.rows | p2.rows)), "==", float(I)))
    clauses.append(Clause("cond3 cols cover all measurements", float(len(p1.cols | p2.cols)), "==", float(J)))
    overlap = len(p1.rows & p2.rows) + len(p1.cols & p2.cols)
    clauses.append(Clause("cond4 patterns intersect", float(overlap), ">=", 1.0))
    for d, p in enumerate(s.patterns, start=1):
        r, c = len(p.rows), len(p.cols)
        clauses.append(Clause(f"cond5 d={d} floor(log2|Sr|)+floor(log2|Sc|)", flog2(r) + flog2(c), ">=", t))
        clauses.append(Clause(f"cond5 d={d} floor(log2|Sr|)+floor(log2 K)", flog2(r) + flog2(K), ">=", t))
        clauses.append(Clause(f"cond5 d={d} floor(log2|Sc|)+floor(log2 K)", flog2(c) + flog2(K), ">=", t))
    failed = [c for c in clauses if not c.holds]
    which = "all conditions" if not failed else failed[0].name
    return IdentifiabilityReport("fiber", int(F), not failed, which, clauses)


def check_scheme(s: Scheme, F: int) -> IdentifiabilityReport:
    if isinstance(s, SlabScheme):
        return check_slab_conditions(s, F)
    return check_fiber_conditions(s, F)


# ===== Minimum sampling =====
@dataclass
class SlabRequirements:
    feasible: bool
    minimal_pairs: List[Tuple[int, int]]
    per_condition: Dict[str, List[Tuple[int, int]]]
    reason: str = ""


def _pareto(pairs: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    front: List[Tuple[int, int]] = []
    best_k = math.inf
    for ih, kf in sorted(pairs):
        if kf < best_k:
            front.append((ih, kf))
            best_k = kf
    return front


def min_slab_requirements(I: int, J: int, K: int, F: int) -> SlabRequirements:
    """Pareto-minimal (I_h, K_f) pairs passing the slab certificate, by exhaustive search."""
    generic = generic_identifiability(I, J, K, F)
    if not generic.satisfied:
        return SlabRequirements(False, [], {}, f"rank {F} exceeds the generic bound: {generic.which_condition}")

    firsts: Dict[str, List[Tuple[int, int]]] = {"condition 1": [], "condition 2": []}
    for ih in range(1, I + 1):
        found = {"condition 1": None, "condition 2": None}
        for kf in range(1, K + 1):
            ok1, ok2 = _slab_passes(I, J, K, ih, kf, F)
            if ok1 and found["condition 1"] is None:
                found["condition 1"] = kf
            if ok2 and found["condition 2"] is None:
                found["condition 2"] = kf
            if None not in found.values():
                break
        for name, kf in found.items():
            if kf is not None:
                firsts[name].append((ih, kf))

    per_condition = {name: _pareto(pairs) for name, pairs in firsts.items()}
    overall = _pareto(per_condition["condition 1"] + per_condition["condition 2"])
    if not overall:
        return SlabRequirements(False, [], per_condition, f"no pair up to ({I}, {K}) passes")
    return SlabRequirements(True, overall, per_condition)


# ===== Selection from a feeder =====
def _pool(meta: StateTensorMeta) -> Tuple[List[int], List[int]]:
    slack = [i for i, s in enumerate(meta.slack) if s]
    loaded = [i for i in range(meta.n_phases)
              if not meta.slack[i] and not meta.zero_injection[i]]
    return slack, loaded


def equally_spaced_steps(K: int, K_f: int) -> List[int]:
    """``K_f`` zero-based steps spaced evenly, the last one at ``K - 1``."""
    if not 0 <= K_f <= K:
        raise ValueError(f"cannot pick {K_f} of {K} time steps")
    return [(m * K) // K_f - 1 for m in range(1, K_f + 1)]


def select_slab_scheme(meta: StateTensorMeta, n_phases: int, n_steps: int,
                       rng: np.random.Generator) -> SlabScheme:
    """Slack phases plus random nonzero-load phases; equally spaced time steps."""
    slack, loaded = _pool(meta)
    extra = n_phases - len(slack)
    if extra < 0 or extra > len(loaded):
        raise ValueError(f"cannot sample {n_phases} phases: {len(slack)} slack and "
                         f"{len(loaded)} nonzero-load phases available")
    picked = rng.choice(loaded, size=extra, replace=False) if extra else []
    return SlabScheme(meta.dims, frozenset(slack) | frozenset(int(i) for i in picked),
                      frozenset(equally_spaced_steps(meta.n_steps, n_steps)))


def select_fiber_scheme(meta: StateTensorMeta, n_power_rows: int, rng: np.random.Generator,
                        voltage_cols: Sequence[int] = VOLTAGE_COLS,
                        power_cols: Sequence[int] = POWER_COLS) -> FiberScheme:
    """Power pattern: slack plus random nonzero-load phases. Voltage pattern:
    slack plus every phase outside the power pattern."""
    slack, loaded = _pool(meta)
    extra = n_power_rows - len(slack)
    if extra < 0 or extra > len(loaded):
        raise ValueError(f"cannot sample {n_power_rows} power rows from {len(loaded)} loaded phases")
    picked = rng.choice(loaded, size=extra, replace=False) if extra else []
    power_rows = frozenset(slack) | frozenset(int(i) for i in picked)
    voltage_rows = frozenset(slack) | (frozenset(range(meta.n_phases)) - power_rows)
    return FiberScheme(meta.dims, (FiberPattern(voltage_rows, frozenset(voltage_cols)),
                                   FiberPattern(power_rows, frozenset(power_cols))))


# ===== Scheme files =====
def _one_based(values: Iterable[int]) -> List[int]:
    return [v + 1 for v in sorted(values)]


def scheme_to_dict(s: Scheme) -> Dict:
    if isinstance(s, SlabScheme):
        return {"kind": "slab", "dims": list(s.dims),
                "horizontal": _one_based(s.horizontal_set),
                "frontal": _one_based(s.frontal_set),
                "vertical": _one_based(s.vertical_set)}
    return {"kind": "fiber", "dims": list(s.dims),
            "patterns": [{"rows": _one_based(p.rows), "cols": _one_based(p.cols)} for p in s.patterns]}


def scheme_from_dict(data: Dict, source: Union[str, Path] = "<scheme>") -> Scheme:
    def zero_based(key, values):
        if not isinstance(values, list) or not all(isinstance(v, int) and v >= 1 for v in values):
            raise FormatError(source, None, f"{key} must be a list of one-based indices")
        return [v - 1 for v in values]

    try:
        kind = data["kind"]
        dims = tuple(data["dims"])
        if kind == "slab":
            allowed = {"kind", "dims", "horizontal", "frontal", "vertical"}
            unknown = set(data) - allowed
            if unknown:
                raise FormatError(source, None, f"unknown scheme keys {sorted(unknown)}")
            return SlabScheme(dims,
                              frozenset(zero_based("horizontal", data.get("horizontal", []))),
                              frozenset(zero_based("frontal", data.get("frontal", []))),
                              frozenset(zero_based("vertical", data.get("vertical", []))))
        if kind == "fiber":
            unknown = set(data) - {"kind", "dims", "patterns"}
            if unknown:
                raise FormatError(source, None, f"unknown scheme keys {sorted(unknown)}")
            pats = tuple(FiberPattern(frozenset(zero_based("rows", p["rows"])),
                                      frozenset(zero_based("cols", p["cols"])))
                         for p in data["patterns"])
            return FiberScheme(dims, pats)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(source, None, f"invalid scheme: {e}") from None
    raise FormatError(source, None, f"unknown scheme kind {kind!r}")


def write_scheme(s: Scheme, path: Union[str, Path]):
    atomic_write_text(Path(path), json.dumps(scheme_to_dict(s), indent=2) + "\n")


def read_scheme(path: Union[str, Path]) -> Scheme:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(path, e.lineno, e.msg) from None
    return scheme_from_dict(data, path)
