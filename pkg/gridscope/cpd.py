"""
Canonical polyadic decomposition of third-order tensors.

Factors ``(A, B, C)`` with ``F`` columns model ``X[i, j, k] = sum_f A[i, f] B[j, f] C[k, f]``.
Fitting is alternating least squares (ALS); the masked variant minimises
``||M * (X - [[A, B, C]])||_F^2`` by solving one small weighted least-squares
problem per factor row, using only that row's observed entries.

Every least-squares solve adds Tikhonov damping ``1e-10 * mean(diag(G))`` to the
normal matrix ``G``. A sweep is accepted only if it does not increase the
objective, so ``FitResult.objective_trace`` is non-increasing.

Masked fits start from fully observed sub-tensors where the mask has them: a
CPD of the block fixes two factors and the third follows row by row. Sweeps
are accelerated by an extrapolating line search, and measurement columns can
be fitted at unit RMS (``FitOptions.column_scaling``); the objective trace is
then the one of the rescaled tensor.
"""

from __future__ import annotations
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from tqdm import tqdm

from .core import FormatError, SolverError, atomic_write_text, log
from .tensor import (
    check_mask, check_tensor3, format_tensor_text, frobenius_norm_sq,
    khatri_rao, parse_tensor_text, relative_error, unfold,
)

DAMPING = 1e-10
AMBIGUITY_GAP = 1e-6
MONOTONE_SLACK = 1e-10
EXACT_FIT = 1e-12           # relative residual norm treated as an exact fit
MODE_NAMES = ("A", "B", "C")
LINE_SEARCH_START = 5       # first sweep that may extrapolate
BLOCK_ORDER = (0, 2, 1)     # horizontal, frontal, then vertical blocks
BLOCK_RESTARTS = 3          # fewest restarts for a block CPD


# ===== Model =====
@dataclass(frozen=True, eq=False)
class CpdFactors:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        mats = []
        for name in MODE_NAMES:
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.ndim != 2:
                raise ValueError(f"factor {name} must be a matrix, got shape {M.shape}")
            mats.append(M)
            object.__setattr__(self, name, M)
        ranks = {M.shape[1] for M in mats}
        if len(ranks) != 1 or 0 in ranks:
            raise ValueError(f"factor column counts differ or are zero: {[M.shape for M in mats]}")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.A.shape[0], self.B.shape[0], self.C.shape[0]

    def as_tuple(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.A, self.B, self.C

    def degenerate_columns(self) -> List[int]:
        """Columns that are identically zero in at least one factor."""
        dead = np.zeros(self.rank, dtype=bool)
        for M in self.as_tuple():
            dead |= ~np.any(M != 0.0, axis=0)
        return [int(f) for f in np.flatnonzero(dead)]


@dataclass(frozen=True)
class FitOptions:
    max_sweeps: int = 500
    rel_tol: float = 1e-9
    restarts: int = 5
    seed: int = 0
    init_scale: Optional[float] = None
    line_search: bool = True
    block_init: bool = True
    column_scaling: bool = False

    def __post_init__(self):
        if int(self.max_sweeps) < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if int(self.restarts) < 1:
            raise ValueError("restarts must be >= 1")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")

    def replace(self, **changes) -> "FitOptions":
        return dataclasses.replace(self, **changes)


@dataclass
class FitResult:
    factors: CpdFactors
    objective_trace: List[float]
    converged: bool
    sweeps_used: int
    restart_index: int
    restart_objectives: List[float] = field(default_factory=list)
    undetermined: Dict[str, List[int]] = field(default_factory=dict)
    restart_starts: List[str] = field(default_factory=list)
    column_scales: Optional[List[float]] = None

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def as_factors(factors: Union[CpdFactors, Sequence[np.ndarray]]) -> CpdFactors:
    if isinstance(factors, CpdFactors):
        return factors
    if len(factors) != 3:
        raise ValueError("expected three factor matrices")
    return CpdFactors(*factors)


def reconstruct(factors: Union[CpdFactors, Sequence[np.ndarray]]) -> np.ndarray:
    A, B, C = as_factors(factors).as_tuple()
    return np.einsum("if,jf,kf->ijk", A, B, C)


def normalize_factors(factors: CpdFactors) -> CpdFactors:
    """Scale A and B columns to unit norm, moving magnitudes into C; make the
    first nonzero entry of each A column positive."""
    A, B, C = (M.copy() for M in factors.as_tuple())
    for M in (A, B):
        norms = np.linalg.norm(M, axis=0)
        live = norms > 0
        M[:, live] /= norms[live]
        C[:, live] *= norms[live]
    for f in range(A.shape[1]):
        nz = np.flatnonzero(A[:, f])
        if nz.size and A[nz[0], f] < 0:
            A[:, f] = -A[:, f]
            C[:, f] = -C[:, f]
    return CpdFactors(A, B, C)


# ===== ALS internals =====
def _other_factors(factors: Sequence[np.ndarray], n: int) -> Tuple[np.ndarray, np.ndarray]:
    A, B, C = factors
    return ((C, B), (C, A), (B, A))[n]


def _solve_rows(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(G_r + lam_r I) x_r = rhs_r`` for every row r; ``G`` is (F, F) or (n, F, F)."""
    n, F = rhs.shape
    G = np.broadcast_to(G, (n, F, F))
    lam = DAMPING * np.trace(G, axis1=1, axis2=2) / F
    Gd = G + lam[:, None, None] * np.eye(F)
    try:
        return np.linalg.solve(Gd, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(g, r, rcond=None)[0] for g, r in zip(Gd, rhs)])


def _full_update(Xn: np.ndarray, factors: Sequence[np.ndarray], n: int) -> np.ndarray:
    P, Q = _other_factors(factors, n)
    G = (P.T @ P) * (Q.T @ Q)
    return _solve_rows(G, Xn @ khatri_rao(P, Q))


def _masked_update(Xn: np.ndarray, Wn: np.ndarray, factors: Sequence[np.ndarray], n: int) -> np.ndarray:
    """Row r solves ``min ||W_r * (x_r - Z a)||`` over the observed columns of row r."""
    P, Q = _other_factors(factors, n)
    Z = khatri_rao(P, Q)
    F = Z.shape[1]
    # per-row Gram matrices as one product: G[r] = sum_c W[r, c] z_c z_c^T
    G = (Wn @ (Z[:, :, None] * Z[:, None, :]).reshape(Z.shape[0], F * F)).reshape(-1, F, F)
    rhs = Xn @ Z
    solvable = np.trace(G, axis1=1, axis2=2) > 0
    out = np.zeros((Xn.shape[0], F))
    if solvable.any():
        out[solvable] = _solve_rows(G[solvable], rhs[solvable])
    return out


def _als_sweep(Xu: List[np.ndarray], Wu: Optional[List[np.ndarray]], factors: CpdFactors) -> CpdFactors:
    new = list(factors.as_tuple())
    for n in range(3):
        if Wu is None:
            new[n] = _full_update(Xu[n], new, n)
        else:
            new[n] = _masked_update(Xu[n], Wu[n], new, n)
    return CpdFactors(*new)


def _objective(X1: np.ndarray, W1: Optional[np.ndarray], factors: CpdFactors) -> float:
    """Masked squared residual on the mode-1 unfolding."""
    A, B, C = factors.as_tuple()
    R = X1 - A @ khatri_rao(C, B).T
    if W1 is not None:
        R = R * W1
    return frobenius_norm_sq(R)


def _init_factors(dims, F: int, scale: float, rng: np.random.Generator) -> CpdFactors:
    return CpdFactors(*(rng.standard_normal((d, F)) * scale for d in dims))


def _default_init_scale(Xo: np.ndarray, n_obs: int) -> float:
    rms = np.sqrt(frobenius_norm_sq(Xo) / max(n_obs, 1))
    return 0.1 * (rms ** (1.0 / 3.0) if rms > 0 else 1.0)


def _column_scales(Xo: np.ndarray, M: Optional[np.ndarray]) -> np.ndarray:
    """RMS of the observed entries of each mode-2 column; 1 where a column has none."""
    W = np.ones(Xo.shape, dtype=bool) if M is None else M
    counts = W.sum(axis=(0, 2))
    sq = np.where(W, Xo * Xo, 0.0).sum(axis=(0, 2))
    rms = np.sqrt(sq / np.maximum(counts, 1))
    return np.where(rms > 0, rms, 1.0)


@dataclass
class _LineSearch:
    """Extrapolate to ``last + jump * (new - last)`` with ``jump = sweep ** (1 / acc_pow)``.

    A jump is kept only if it beats the plain sweep. After ``max_fail``
    failures in a row ``acc_pow`` grows by one, shortening later jumps.
    """
    acc_pow: float = 2.0
    max_fail: int = 4
    fails: int = 0

    def step(self, sweep: int, last: CpdFactors, new: CpdFactors, new_obj: float,
             objective) -> Tuple[CpdFactors, float]:
        jump = sweep ** (1.0 / self.acc_pow)
        trial = normalize_factors(CpdFactors(*(
            p + (q - p) * jump for p, q in zip(last.as_tuple(), new.as_tuple()))))
        trial_obj = objective(trial)
        if np.isfinite(trial_obj) and trial_obj < new_obj:
            self.fails = 0
            return trial, trial_obj
        self.fails += 1
        if self.fails == self.max_fail:
            self.acc_pow += 1.0
            self.fails = 0
        return new, new_obj


def _run_restart(Xu, Wu, factors: CpdFactors, opts: FitOptions, floor: float):
    W1 = None if Wu is None else Wu[0]

    def objective(f: CpdFactors) -> float:
        return _objective(Xu[0], W1, f)

    search = _LineSearch() if opts.line_search else None
    obj = objective(factors)
    trace = [obj]
    converged = False
    sweeps = 0
    for sweep in range(1, opts.max_sweeps + 1):
        candidate = normalize_factors(_als_sweep(Xu, Wu, factors))
        cand_obj = objective(candidate)
        if not np.isfinite(cand_obj):
            raise SolverError("ALS produced a non-finite objective")
        if search is not None and sweep > LINE_SEARCH_START and sweep % 2 == 0:
            candidate, cand_obj = search.step(sweep, factors, candidate, cand_obj, objective)
        if cand_obj > obj:
            # rejected sweep: a stall counts as convergence only within rel_tol or at the floor
            converged = obj <= floor or (cand_obj - obj) <= opts.rel_tol * obj
            break
        rel = (obj - cand_obj) / obj if obj > 0 else 0.0
        factors, obj = candidate, cand_obj
        trace.append(obj)
        sweeps += 1
        if obj <= floor or rel < opts.rel_tol:
            converged = True
            break
    return factors, trace, converged, sweeps


def _unfoldings(X: np.ndarray, M: Optional[np.ndarray]):
    Xu = [unfold(X, n + 1) for n in range(3)]
    Wu = None if M is None else [unfold(M.astype(float), n + 1) for n in range(3)]
    return Xu, Wu


def _block_fit(block: np.ndarray, F: int, opts: FitOptions) -> CpdFactors:
    """Best-of-restarts full-data ALS on a fully observed block."""
    Bu, _ = _unfoldings(block, None)
    floor = EXACT_FIT ** 2 * frobenius_norm_sq(block)
    scale = opts.init_scale or _default_init_scale(block, block.size)
    best, best_obj = None, np.inf
    for stream in np.random.SeedSequence(opts.seed).spawn(max(opts.restarts, BLOCK_RESTARTS)):
        start = _init_factors(block.shape, F, scale, np.random.default_rng(stream))
        factors, trace, _, _ = _run_restart(Bu, None, start, opts, floor)
        if trace[-1] < best_obj:
            best, best_obj = factors, trace[-1]
    return best


def _block_starts(Xo: np.ndarray, Xu, Wu, F: int, opts: FitOptions) -> List[Tuple[str, CpdFactors]]:
    """Starts built from fully observed horizontal, frontal or vertical blocks.

    A block qualifies when ``sum_n min(d_n, F) >= 2F + 2`` over its dims, so its
    CPD is generically unique. The block CPD gives two factors; every row of the
    third is then solved from its observed entries.
    """
    starts = []
    for n in BLOCK_ORDER:
        full = np.flatnonzero(Wu[n].all(axis=1))
        dims = list(Xo.shape)
        dims[n] = full.size
        if full.size == 0 or sum(min(d, F) for d in dims) < 2 * F + 2:
            continue
        block = np.take(Xo, full, axis=n)
        if not np.any(block):
            continue
        mats = list(_block_fit(block, F, opts).as_tuple())
        mats[n] = _masked_update(Xu[n], Wu[n], mats, n)
        start = CpdFactors(*mats)
        if start.degenerate_columns():
            continue
        starts.append((f"block_{MODE_NAMES[n]}", normalize_factors(start)))
    return starts


def _fit(Xo: np.ndarray, M: Optional[np.ndarray], F: int, opts: FitOptions,
         init: Optional[CpdFactors]) -> FitResult:
    if int(F) < 1:
        raise ValueError(f"rank must be >= 1, got {F}")
    F = int(F)
    scales = _column_scales(Xo, M) if opts.column_scaling else None
    if scales is not None:
        Xo = Xo / scales[None, :, None]
    n_obs = Xo.size if M is None else int(M.sum())
    scale = opts.init_scale or _default_init_scale(Xo, n_obs)
    floor = EXACT_FIT ** 2 * frobenius_norm_sq(Xo)
    Xu, Wu = _unfoldings(Xo, M)

    undetermined: Dict[str, List[int]] = {name: [] for name in MODE_NAMES}
    if Wu is not None:
        for n, name in enumerate(MODE_NAMES):
            undetermined[name] = [int(r) for r in np.flatnonzero(Wu[n].sum(axis=1) == 0)]

    starts: List[Tuple[str, CpdFactors]] = []
    if init is not None:
        if init.dims != Xo.shape or init.rank != F:
            raise ValueError(f"initial factors {init.dims} rank {init.rank} do not fit {Xo.shape} rank {F}")
        if scales is not None:
            init = CpdFactors(init.A, init.B / scales[:, None], init.C)
        starts.append(("init", normalize_factors(init)))
    if Wu is not None and opts.block_init:
        starts.extend(_block_starts(Xo, Xu, Wu, F, opts))

    best: Optional[FitResult] = None
    finals: List[float] = []
    kinds: List[str] = []
    for r, stream in enumerate(np.random.SeedSequence(opts.seed).spawn(opts.restarts)):
        if r < len(starts):
            kind, start = starts[r]
        else:
            kind, start = "random", _init_factors(Xo.shape, F, scale, np.random.default_rng(stream))
        factors, trace, converged, sweeps = _run_restart(Xu, Wu, start, opts, floor)
        finals.append(trace[-1])
        kinds.append(kind)
        if best is None or trace[-1] < best.objective:
            best = FitResult(factors, trace, converged, sweeps, r)
    best.restart_objectives = finals
    best.restart_starts = kinds
    best.undetermined = undetermined
    if scales is not None:
        A, B, C = best.factors.as_tuple()
        best.factors = normalize_factors(CpdFactors(A, B * scales[:, None], C))
        best.column_scales = [float(s) for s in scales]
    dead = best.factors.degenerate_columns()
    if dead:
        log(f"[Warn] rank-{F} fit has degenerate columns {dead}")
    return best


# ===== Public fitting API =====
def als_fit(X, F: int, opts: Optional[FitOptions] = None, init: Optional[CpdFactors] = None) -> FitResult:
    """Fit a rank-``F`` CPD to a fully observed tensor, best of ``opts.restarts`` starts."""
    X = check_tensor3(X)
    if not np.all(np.isfinite(X)):
        raise ValueError("tensor holds non-finite values")
    return _fit(X, None, F, opts or FitOptions(), init)


def masked_als_fit(X, M, F: int, opts: Optional[FitOptions] = None,
                   init: Optional[CpdFactors] = None) -> FitResult:
    """Fit a rank-``F`` CPD to the observed entries of ``X`` (``M`` True).

    Unobserved entries of ``X`` are never read, so they may hold anything,
    including NaN. Factor rows without a single observed entry cannot be
    estimated; they are zeroed and listed in ``FitResult.undetermined``.
    """
    X = np.asarray(X, dtype=float)
    M = check_mask(M, X.shape)
    X = check_tensor3(X)
    if not M.any():
        raise ValueError("mask observes no entries")
    if M.all():
        return als_fit(X, F, opts, init)
    if not np.all(np.isfinite(X[M])):
        raise ValueError("observed entries hold non-finite values")
    Xo = np.where(M, X, 0.0)
    return _fit(Xo, M, F, opts or FitOptions(), init)


# ===== Alignment =====
class Alignment(NamedTuple):
    permutation: np.ndarray
    scalings: np.ndarray
    match_error: float


def _unit_columns(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=0)
    return M / np.where(norms > 0, norms, 1.0)


def _greedy_match(similarity: np.ndarray) -> Tuple[np.ndarray, float]:
    work = similarity.copy()
    perm = np.full(work.shape[0], -1)
    min_gap = np.inf
    for _ in range(work.shape[0]):
        r, c = np.unravel_index(np.argmax(work), work.shape)
        rivals = np.concatenate([np.delete(work[r], c), np.delete(work[:, c], r)])
        rivals = rivals[rivals >= 0]
        if rivals.size:
            min_gap = min(min_gap, work[r, c] - rivals.max())
        perm[r] = c
        work[r, :] = -1.0
        work[:, c] = -1.0
    return perm, min_gap


def apply_alignment(est: CpdFactors, permutation, scalings) -> CpdFactors:
    """Permute columns of ``est`` and scale them per mode."""
    perm = np.asarray(permutation, dtype=int)
    lam = np.asarray(scalings, dtype=float)
    return CpdFactors(*(M[:, perm] * lam[n] for n, M in enumerate(est.as_tuple())))


def align_factors(est: CpdFactors, truth: CpdFactors) -> Alignment:
    """Match ``est`` to ``truth`` up to column permutation and per-mode scalings.

    ``permutation[f]`` is the ``est`` column matched to ``truth`` column ``f``;
    ``scalings`` is (3, F) with the product over modes equal to one per column.
    ``match_error`` is ``sum_n ||T_n - aligned_n||^2 / sum_n ||T_n||^2``.
    """
    est, truth = as_factors(est), as_factors(truth)
    if est.rank != truth.rank:
        raise ValueError(f"rank mismatch: {est.rank} != {truth.rank}")
    if est.dims != truth.dims:
        raise ValueError(f"dims mismatch: {est.dims} != {truth.dims}")

    E = [_unit_columns(M) for M in est.as_tuple()]
    T = [_unit_columns(M) for M in truth.as_tuple()]
    congruence = [np.abs(t.T @ e) for t, e in zip(T, E)]
    mode = int(np.argmax(truth.dims))
    perm, gap = _greedy_match(congruence[mode])
    if gap < AMBIGUITY_GAP:
        rows, cols = linear_sum_assignment(-np.prod(congruence, axis=0))
        perm = np.empty_like(perm)
        perm[rows] = cols

    F = truth.rank
    lam = np.ones((3, F))
    for n in range(2):
        e = est.as_tuple()[n][:, perm]
        t = truth.as_tuple()[n]
        ee = np.sum(e * e, axis=0)
        te = np.sum(t * e, axis=0)
        ok = (ee > 0) & (te != 0)
        lam[n, ok] = te[ok] / ee[ok]
    lam[2] = 1.0 / (lam[0] * lam[1])

    aligned = apply_alignment(est, perm, lam)
    num = sum(frobenius_norm_sq(t - a) for t, a in zip(truth.as_tuple(), aligned.as_tuple()))
    den = sum(frobenius_norm_sq(t) for t in truth.as_tuple())
    return Alignment(perm, lam, float(num / den) if den > 0 else float(num))


# ===== Rank sweep =====
def _extend_factors(factors: CpdFactors, F: int, rng: np.random.Generator) -> CpdFactors:
    extra = F - factors.rank
    mats = []
    for M in factors.as_tuple():
        scale = 1e-3 * (np.abs(M).max() if M.size else 1.0)
        mats.append(np.hstack([M, rng.standard_normal((M.shape[0], extra)) * scale]))
    return CpdFactors(*mats)


def rank_sweep(X, k_max: int, opts: Optional[FitOptions] = None,
               progress: bool = False) -> List[Tuple[int, float]]:
    """Relative error of the best rank-k fit for k = 1..k_max.

    A point above its predecessor is refit with twice the restarts and a warm
    start from the previous rank's factors. A failed point is NaN.
    """
    if int(k_max) < 1:
        raise ValueError("k_max must be >= 1")
    X = check_tensor3(X)
    opts = opts or FitOptions()
    if frobenius_norm_sq(X) == 0.0:
        raise ValueError("rank sweep needs a nonzero tensor")

    points: List[Tuple[int, float]] = []
    prev: Optional[FitResult] = None
    prev_err = np.inf
    rng = np.random.default_rng(opts.seed)
    for k in tqdm(range(1, int(k_max) + 1), desc="rank sweep", disable=not progress):
        try:
            res = als_fit(X, k, opts)
            err = relative_error(X, reconstruct(res.factors))
            if err > prev_err + MONOTONE_SLACK and prev is not None:
                retry = als_fit(X, k, opts.replace(restarts=2 * opts.restarts),
                                init=_extend_factors(prev.factors, k, rng))
                retry_err = relative_error(X, reconstruct(retry.factors))
                if retry_err < err:
                    res, err = retry, retry_err
            if err > prev_err + MONOTONE_SLACK:
                log(f"[Warn] rank {k}: relative error {err:.3e} above rank {k - 1} ({prev_err:.3e})")
            points.append((k, err))
            prev, prev_err = res, min(err, prev_err)
        except (ValueError, SolverError, np.linalg.LinAlgError) as e:
            log(f"[Warn] rank {k}: fit failed: {e}")
            points.append((k, float("nan")))
    return points


# ===== Fit records =====
def format_fit_record(result: FitResult) -> str:
    f = result.factors
    lines = [
        "# gridscope fit record",
        f"rank {f.rank}",
        f"dims {' '.join(str(d) for d in f.dims)}",
        f"converged {int(result.converged)}",
        f"sweeps_used {result.sweeps_used}",
        f"restart_index {result.restart_index}",
        "restart_objectives " + " ".join("%.17g" % v for v in result.restart_objectives),
        "objective_trace " + " ".join("%.17g" % v for v in result.objective_trace),
    ]
    lines.append("restart_starts " + " ".join(result.restart_starts))
    if result.column_scales is not None:
        lines.append("column_scales " + " ".join("%.17g" % v for v in result.column_scales))
    for name in MODE_NAMES:
        rows = result.undetermined.get(name, [])
        lines.append(f"undetermined_{name} " + " ".join(str(r + 1) for r in rows))
    text = "\n".join(line.rstrip() for line in lines) + "\n"
    for name, M in zip(MODE_NAMES, f.as_tuple()):
        text += f"[{name}]\n" + format_tensor_text(M[:, :, None])
    return text


def write_fit_record(result: FitResult, path: Union[str, Path]):
    atomic_write_text(Path(path), format_fit_record(result))


def read_fit_record(path: Union[str, Path]) -> FitResult:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, None, "file not found")
    header: Dict[str, List[str]] = {}
    blocks: Dict[str, List[str]] = {}
    current = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in MODE_NAMES:
                raise FormatError(path, lineno, f"unknown block {line}")
            blocks[current] = []
        elif current is not None:
            blocks[current].append(line)
        elif line and not line.startswith("#"):
            key, *vals = line.split()
            header[key] = vals
    missing = [n for n in MODE_NAMES if n not in blocks]
    if missing:
        raise FormatError(path, None, f"missing factor blocks {missing}")
    try:
        mats = [parse_tensor_text("\n".join(blocks[n]), path)[:, :, 0] for n in MODE_NAMES]
        result = FitResult(
            factors=CpdFactors(*mats),
            objective_trace=[float(v) for v in header.get("objective_trace", [])],
            converged=header["converged"] == ["1"],
            sweeps_used=int(header["sweeps_used"][0]),
            restart_index=int(header["restart_index"][0]),
            restart_objectives=[float(v) for v in header.get("restart_objectives", [])],
            undetermined={n: [int(r) - 1 for r in header.get(f"undetermined_{n}", [])] for n in MODE_NAMES},
            restart_starts=list(header.get("restart_starts", [])),
            column_scales=[float(v) for v in header["column_scales"]] if "column_scales" in header else None,
        )
    except (KeyError, IndexError, ValueError) as e:
        raise FormatError(path, None, f"malformed fit record: {e}") from None
    return result
