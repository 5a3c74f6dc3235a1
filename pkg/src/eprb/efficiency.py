"""Detector-efficiency model for coincidence statistics.

Unequal detector efficiencies at a station are summarized by
``r_i = (eta_i(+1) - eta_i(-1)) / (eta_i(+1) + eta_i(-1))``.  Given ``r1``,
``r2`` and the ideal expectations of a state, :func:`forward_E` gives the
averages an experiment would report.  The inverse problem takes three
setting pairs (nine equations, nine unknowns) and solves for ``r1``, ``r2``
and the seven state entries they involve; repeating this for the four
leave-one-out subsets shows whether one efficiency model can explain all
the data.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

SETTING_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))

# Unknown vector layout; a triple solve drops the excluded pair's correlation.
UNKNOWNS = ("r1", "r2", "E1(a)", "E1(a')", "E2(b)", "E2(b')", "E(a,b)", "E(a,b')", "E(a',b)", "E(a',b')")
_R1, _R2 = 0, 1
_E1 = (2, 3)
_E2 = (4, 5)
_EAB = {(0, 0): 6, (0, 1): 7, (1, 0): 8, (1, 1): 9}

SINGULAR_TOL = 1e-12
SOLVER_TOL = 1e-10
MAX_ITER = 200
FD_STEP = 1e-6
START_RS = (0.0, -0.2, 0.2)
ROOT_DISTINCT_TOL = 1e-7

Measured = Mapping[tuple[int, int], tuple[float, float, float]]


class SingularModelError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class EfficiencyParams:
    r1: float = 0.0
    r2: float = 0.0

    def __post_init__(self) -> None:
        if abs(self.r1) > 1 or abs(self.r2) > 1:
            raise ValueError(f"relative efficiencies must lie in [-1, 1], got ({self.r1}, {self.r2})")

    @classmethod
    def from_etas(cls, eta1: tuple[float, float], eta2: tuple[float, float]) -> EfficiencyParams:
        return cls(_relative(*eta1), _relative(*eta2))

    def etas(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Detector efficiencies ``(eta(+1), eta(-1))`` per station with the larger one equal to 1."""
        return _etas(self.r1), _etas(self.r2)


def _relative(plus: float, minus: float) -> float:
    return (plus - minus) / (plus + minus)


def _etas(r: float) -> tuple[float, float]:
    scale = 1.0 + abs(r)
    return (1.0 + r) / scale, (1.0 - r) / scale


@dataclass(frozen=True)
class StateTable:
    """Ideal expectations on the two settings of each station.

    ``e1[A1]``, ``e2[A2]`` and ``e[A1][A2]``; entries of a partial table may be NaN.
    """

    e1: tuple[float, float]
    e2: tuple[float, float]
    e: tuple[tuple[float, float], tuple[float, float]]

    def entries(self, pair: tuple[int, int]) -> tuple[float, float, float]:
        a1, a2 = pair
        return self.e1[a1], self.e2[a2], self.e[a1][a2]

    def as_vector(self) -> np.ndarray:
        return np.array([*self.e1, *self.e2, self.e[0][0], self.e[0][1], self.e[1][0], self.e[1][1]])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> StateTable:
        v = [float(x) for x in v]
        return cls((v[0], v[1]), (v[2], v[3]), ((v[4], v[5]), (v[6], v[7])))

    def probabilities(self, pair: tuple[int, int]) -> np.ndarray:
        """``P(xy|pair)`` as a 2x2 array indexed by (x, y) with +1 first."""
        e1, e2, e = self.entries(pair)
        s = np.array([1.0, -1.0])
        return (1.0 + s[:, None] * e1 + s[None, :] * e2 + np.outer(s, s) * e) / 4.0

    def is_physical(self, tol: float = 1e-12) -> bool:
        vals = [x for x in self.as_vector() if not math.isnan(x)]
        if any(abs(x) > 1 + tol for x in vals):
            return False
        for pair in SETTING_PAIRS:
            if any(math.isnan(x) for x in self.entries(pair)):
                continue
            p = self.probabilities(pair)
            if np.any(p < -tol) or np.any(p > 1 + tol):
                return False
        return True


def _forward(r1, r2, e1, e2, e):
    # the denominator pairs each r_i with its own station's average
    den = 1.0 + r1 * e1 + r2 * e2 + r1 * r2 * e
    return (
        (r1 + e1 + r1 * r2 * e2 + r2 * e) / den,
        (r2 + r1 * r2 * e1 + e2 + r1 * e) / den,
        (r1 * r2 + r2 * e1 + r1 * e2 + e) / den,
        den,
    )


def forward_E(params: EfficiencyParams, e1_hat: float, e2_hat: float, e_hat: float, pair=None) -> tuple[float, float, float]:
    """Observed ``(E1, E2, E)`` for one setting pair under detector asymmetries ``params``."""
    den = 1.0 + params.r1 * e1_hat + params.r2 * e2_hat + params.r1 * params.r2 * e_hat
    if abs(den) < SINGULAR_TOL:
        where = f" for setting pair {pair}" if pair is not None else ""
        raise SingularModelError(f"efficiency model is singular{where}: denominator {den:.3e}")
    E1, E2, E, _ = _forward(params.r1, params.r2, e1_hat, e2_hat, e_hat)
    return E1, E2, E


def forward_table(params: EfficiencyParams, state: StateTable, pairs=SETTING_PAIRS) -> dict[tuple[int, int], tuple[float, float, float]]:
    return {p: forward_E(params, *state.entries(p), pair=p) for p in pairs}


def forward_counts(
    etas: tuple[tuple[float, float], tuple[float, float]],
    entries: tuple[float, float, float],
    n_pairs: float,
    kappas: tuple[float, float] = (1.0, 1.0),
) -> np.ndarray:
    """Expected ``C_xy`` (2x2, +1 first) for one setting pair.

    ``etas`` holds ``(eta(+1), eta(-1))`` per station and ``kappas`` the
    modulator transmissions for the chosen settings.
    """
    (p1, m1), (p2, m2) = etas
    for v in (p1, m1, p2, m2, *kappas):
        if not 0 < v <= 1:
            raise ValueError(f"efficiencies must lie in (0, 1], got {v}")
    if n_pairs <= 0:
        raise ValueError("pair count must be positive")
    e1, e2, e = entries
    s = np.array([1.0, -1.0])
    prob = (1.0 + s[:, None] * e1 + s[None, :] * e2 + np.outer(s, s) * e) / 4.0
    eta1 = np.array([p1, m1])
    eta2 = np.array([p2, m2])
    return kappas[0] * kappas[1] * np.outer(eta1, eta2) * n_pairs * prob


# --- nonlinear solver -------------------------------------------------------


@dataclass
class SolveResult:
    x: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    start_index: int = 0
    roots: list[np.ndarray] = field(default_factory=list)


def _norm(f: np.ndarray) -> float:
    return float(np.max(np.abs(f))) if f.size else 0.0


def _safe(fun: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    def wrapped(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.asarray(fun(x), dtype=float)
        return np.where(np.isfinite(f), f, np.inf)

    return wrapped


def _jacobian(fun, x: np.ndarray, f0: np.ndarray, h: float) -> np.ndarray:
    J = np.empty((f0.size, x.size))
    with np.errstate(invalid="ignore"):
        for k in range(x.size):
            step = np.zeros_like(x)
            step[k] = h
            J[:, k] = (fun(x + step) - fun(x - step)) / (2 * h)
    return J


def damped_newton(
    fun: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    *,
    lower: float = -1.0,
    upper: float = 1.0,
    tol: float = SOLVER_TOL,
    max_iter: int = MAX_ITER,
    fd_step: float = FD_STEP,
) -> SolveResult:
    """Root-find (or least-squares fit, for more equations than unknowns) inside a box.

    Newton/Gauss-Newton steps come from a central-difference Jacobian and are
    projected onto ``[lower, upper]``; each step is halved until the residual
    sum of squares drops, with a projected gradient step as fallback.
    ``converged`` means the residual max-norm fell below ``tol``.
    """
    fun = _safe(fun)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f = fun(x)
    cost = float(f @ f)
    it = 0
    for it in range(1, max_iter + 1):
        if _norm(f) < tol:
            return SolveResult(x, _norm(f), True, it - 1)
        J = _jacobian(fun, x, f, fd_step)
        if not np.all(np.isfinite(J)):
            break
        moved = False
        directions = []
        try:
            directions.append(np.linalg.lstsq(J, -f, rcond=None)[0])
        except np.linalg.LinAlgError:
            pass
        grad = J.T @ f
        if np.any(grad):
            directions.append(-grad * (cost / max(float(grad @ grad), 1e-300)))
        for d in directions:
            t = 1.0
            for _ in range(40):
                trial = np.clip(x + t * d, lower, upper)
                ft = fun(trial)
                ct = float(ft @ ft)
                if ct < cost:
                    x, f, cost, moved = trial, ft, ct, True
                    break
                t *= 0.5
            if moved:
                break
        if not moved:
            break
    return SolveResult(x, _norm(f), _norm(f) < tol, it)


def multi_start(fun, starts: Sequence[Sequence[float]], **kw) -> SolveResult:
    """Run :func:`damped_newton` from every start and keep the best result.

    Converged results rank equal (residuals below tolerance are not
    compared); ties go to the lowest start index.  Every distinct converged
    point is kept in ``roots`` because the system need not have a unique
    solution.
    """
    best: SolveResult | None = None
    best_key = None
    roots: list[np.ndarray] = []
    for i, x0 in enumerate(starts):
        res = damped_newton(fun, x0, **kw)
        res.start_index = i
        if res.converged and not any(np.allclose(res.x, r, atol=ROOT_DISTINCT_TOL, rtol=0) for r in roots):
            roots.append(res.x)
        key = (0.0 if res.converged else res.residual_norm, i)
        if best_key is None or key < best_key:
            best, best_key = res, key
    assert best is not None
    best.roots = roots
    return best


# --- consistency analysis ---------------------------------------------------


def _check_measured(measured: Measured, pairs) -> None:
    missing = [p for p in pairs if p not in measured]
    if missing:
        raise ValueError(f"missing measurements for setting pair(s) {missing}")


def _residuals(full: np.ndarray, pairs, measured: Measured) -> np.ndarray:
    r1, r2 = full[_R1], full[_R2]
    out = []
    for p in pairs:
        E1, E2, E, _ = _forward(r1, r2, full[_E1[p[0]]], full[_E2[p[1]]], full[_EAB[p]])
        m1, m2, m = measured[p]
        out.extend((E1 - m1, E2 - m2, E - m))
    return np.array(out)


def _initial_state(measured: Measured, pairs) -> np.ndarray:
    x = np.zeros(len(UNKNOWNS))
    for a in (0, 1):
        vals = [measured[p][0] for p in pairs if p[0] == a]
        x[_E1[a]] = float(np.mean(vals)) if vals else 0.0
    for b in (0, 1):
        vals = [measured[p][1] for p in pairs if p[1] == b]
        x[_E2[b]] = float(np.mean(vals)) if vals else 0.0
    for p in pairs:
        x[_EAB[p]] = measured[p][2]
    return np.clip(x, -1.0, 1.0)


def _starts(base: np.ndarray) -> list[np.ndarray]:
    starts = []
    for r1, r2 in itertools.product(START_RS, START_RS):
        x = base.copy()
        x[_R1], x[_R2] = r1, r2
        starts.append(x)
    return starts


@dataclass
class ConsistencySolution:
    excluded_pair: tuple[int, int] | None
    params: EfficiencyParams
    state: StateTable
    residual_norm: float
    converged: bool
    # every distinct exact solution found, in UNKNOWNS order (NaN for the excluded entry)
    alternatives: list[list[float]] = field(default_factory=list)

    def row(self) -> list[float]:
        """Values in ``UNKNOWNS`` order; the excluded correlation is NaN."""
        return [self.params.r1, self.params.r2, *self.state.as_vector()]

    @property
    def unique(self) -> bool:
        return len(self.alternatives) <= 1


def _solution(excluded, full: np.ndarray, res: SolveResult) -> ConsistencySolution:
    v = full.copy()
    if excluded is not None:
        v[_EAB[excluded]] = math.nan
    params = EfficiencyParams(float(np.clip(v[_R1], -1, 1)), float(np.clip(v[_R2], -1, 1)))
    return ConsistencySolution(excluded, params, StateTable.from_vector(v[2:]), res.residual_norm, res.converged)


def solve_triple(
    measured: Measured,
    excluded: tuple[int, int] = (1, 1),
    *,
    extra_starts: Sequence[Sequence[float]] = (),
) -> ConsistencySolution:
    """Solve the nine equations of the three setting pairs other than ``excluded``.

    ``extra_starts`` are full vectors in ``UNKNOWNS`` order tried after the
    standard grid (NaN entries fall back to the data-derived guess); they
    only add roots and never change which result is ranked best.
    """
    pairs = [p for p in SETTING_PAIRS if p != excluded]
    _check_measured(measured, pairs)
    keep = [k for k in range(len(UNKNOWNS)) if k != _EAB[excluded]]
    base = _initial_state(measured, pairs)
    starts = [s[keep] for s in _starts(base)]
    for extra in extra_starts:
        x = np.asarray(extra, dtype=float)
        starts.append(np.where(np.isnan(x), base, x)[keep])

    def fun(y):
        full = base.copy()
        full[keep] = y
        return _residuals(full, pairs, measured)

    res = multi_start(fun, starts)
    full = base.copy()
    full[keep] = res.x
    sol = _solution(excluded, full, res)
    for root in res.roots:
        alt = base.copy()
        alt[keep] = root
        alt[_EAB[excluded]] = math.nan
        sol.alternatives.append(alt.tolist())
    return sol


# Table order: first row leaves out (a', b'), the last leaves out (a, b).
TABLE_EXCLUSIONS = ((1, 1), (1, 0), (0, 1), (0, 0))


def full_residual(params: EfficiencyParams, state: StateTable, measured: Measured) -> float:
    """Euclidean norm of all twelve equation residuals at ``(params, state)``."""
    _check_measured(measured, SETTING_PAIRS)
    full = np.array([params.r1, params.r2, *state.as_vector()])
    return float(np.linalg.norm(_residuals(full, SETTING_PAIRS, measured)))


def minimize_full_residual(measured: Measured) -> ConsistencySolution:
    """Best least-squares fit of all twelve equations (ten unknowns)."""
    _check_measured(measured, SETTING_PAIRS)
    base = _initial_state(measured, SETTING_PAIRS)

    def fun(x):
        return _residuals(x, SETTING_PAIRS, measured)

    res = multi_start(fun, _starts(base))
    sol = _solution(None, res.x, res)
    sol.residual_norm = float(np.linalg.norm(fun(res.x)))
    return sol


@dataclass
class ConsistencyTable:
    rows: list[ConsistencySolution]
    full_fit: ConsistencySolution = field(default=None)

    def spreads(self) -> dict[str, float]:
        """``max - min`` of each unknown over the rows that contain it."""
        table = np.array([r.row() for r in self.rows])
        out = {}
        for k, name in enumerate(UNKNOWNS):
            col = table[:, k]
            col = col[~np.isnan(col)]
            out[name] = float(col.max() - col.min()) if col.size else math.nan
        return out

    @property
    def max_spread(self) -> float:
        return max(self.spreads().values())

    @property
    def full_residual(self) -> float:
        return self.full_fit.residual_norm if self.full_fit is not None else math.nan

    def write_tsv(self, fh: TextIO, precision: int = 6) -> None:
        fh.write("excluded\t" + "\t".join(UNKNOWNS) + "\tresidual\tconverged\n")
        for r in self.rows:
            cells = ["--" if math.isnan(v) else f"{v:+.{precision}f}" for v in r.row()]
            fh.write(f"{_pair_label(r.excluded_pair)}\t" + "\t".join(cells) + f"\t{r.residual_norm:.3e}\t{int(r.converged)}\n")
        spreads = self.spreads()
        fh.write("spread\t\t" + "\t".join(f"{spreads[n]:.{precision}f}" for n in UNKNOWNS[1:]) + "\t\t\n")
        fh.write("\n")
        fh.write(f"# r1 spread\t{spreads['r1']:.{precision}f}\n")
        fh.write(f"# max spread\t{self.max_spread:.{precision}e}\n")
        fh.write(f"# full 12-equation best residual\t{self.full_residual:.6e}\n")

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "columns": list(UNKNOWNS),
            "rows": [
                {
                    "excluded": list(r.excluded_pair),
                    "values": [clean(v) for v in r.row()],
                    "residual_norm": r.residual_norm,
                    "converged": r.converged,
                }
                for r in self.rows
            ],
            "spreads": self.spreads(),
            "max_spread": self.max_spread,
            "full_residual": self.full_residual,
            "full_fit": [clean(v) for v in self.full_fit.row()] if self.full_fit else None,
        }


def _pair_label(pair) -> str:
    return {(0, 0): "(a,b)", (0, 1): "(a,b')", (1, 0): "(a',b)", (1, 1): "(a',b')"}[tuple(pair)]


def _spread_of(vectors: Sequence[Sequence[float]]) -> float:
    table = np.array(vectors, dtype=float)
    worst = 0.0
    for col in table.T:
        col = col[~np.isnan(col)]
        if col.size:
            worst = max(worst, float(col.max() - col.min()))
    return worst


def _pick(sol: ConsistencySolution, root: Sequence[float]) -> ConsistencySolution:
    v = np.asarray(root, dtype=float)
    params = EfficiencyParams(float(np.clip(v[_R1], -1, 1)), float(np.clip(v[_R2], -1, 1)))
    return ConsistencySolution(
        sol.excluded_pair, params, StateTable.from_vector(v[2:]), sol.residual_norm, sol.converged, sol.alternatives
    )


def consistency_table(measured: Measured, *, with_full_fit: bool = True) -> ConsistencyTable:
    """Leave-one-out solutions for the four setting pairs.

    A subset can have several exact solutions.  Each subset is re-solved
    from the other subsets' solutions so shared roots are found, and the
    combination of exact roots with the smallest spread is reported, so a
    large spread means no choice of roots agrees.
    """
    _check_measured(measured, SETTING_PAIRS)
    first = [solve_triple(measured, ex) for ex in TABLE_EXCLUSIONS]
    rows = []
    for k, ex in enumerate(TABLE_EXCLUSIONS):
        seeds = [alt for j, r in enumerate(first) if j != k for alt in (r.alternatives or [r.row()])]
        rows.append(solve_triple(measured, ex, extra_starts=seeds))
    options = [r.alternatives or [r.row()] for r in rows]
    best = min(itertools.product(*options), key=_spread_of)
    rows = [_pick(r, choice) if r.alternatives else r for r, choice in zip(rows, best)]
    full = minimize_full_residual(measured) if with_full_fit else None
    return ConsistencyTable(rows, full)


def measured_from_estimates(est: Mapping) -> dict[tuple[int, int], tuple[float, float, float]]:
    """Measured averages from ``statistics.all_estimates`` output."""
    return {p: (e.E1, e.E2, e.E) for p, e in est.items()}


def load_measurements(fh: TextIO) -> dict[tuple[int, int], tuple[float, float, float]]:
    """Read measured ``E1, E2, E`` per setting pair from JSON or TSV.

    JSON: an object with a ``settings`` list of ``{A1, A2, E1, E2, E}`` entries
    (the ``analyze`` JSON output qualifies).  TSV: columns ``A1 A2 E1 E2 E``.
    """
    text = fh.read()
    stripped = text.lstrip()
    out: dict[tuple[int, int], tuple[float, float, float]] = {}
    if stripped.startswith("{") or stripped.startswith("["):
        data = json.loads(text)
        if isinstance(data, list):
            if len(data) != 1:
                raise ValueError("measurement JSON list must hold exactly one analysis point")
            data = data[0]
        for entry in data["settings"]:
            out[(int(entry["A1"]), int(entry["A2"]))] = (float(entry["E1"]), float(entry["E2"]), float(entry["E"]))
    else:
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        header = lines[0].split("\t")
        idx = {name: header.index(name) for name in ("A1", "A2", "E1", "E2", "E")}
        for ln in lines[1:]:
            cols = ln.split("\t")
            out[(int(cols[idx["A1"]]), int(cols[idx["A2"]]))] = (
                float(cols[idx["E1"]]),
                float(cols[idx["E2"]]),
                float(cols[idx["E"]]),
            )
    _check_measured(out, SETTING_PAIRS)
    return out
