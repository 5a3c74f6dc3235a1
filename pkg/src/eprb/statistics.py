"""Correlation estimates, the CHSH function and the single-particle locality test."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence, TextIO

from .coincidence import CAUSAL_GREEDY, CoincidenceCounts, MatchConfig, find_coincidences
from .dataset import StationDataset

DEFAULT_THRESHOLD_SIGMAS = 5.0
DEFAULT_ERROR_BAR_SIGMAS = 2.5
SETTING_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))
# Sign of each setting pair in S = E(a,b) - E(a,b') + E(a',b) + E(a',b').
CHSH_SIGNS = {(0, 0): 1, (0, 1): -1, (1, 0): 1, (1, 1): 1}

COMPATIBLE = "compatible"
VIOLATED = "violated"
UNDEFINED = "undefined"


def sigma_bound(n_c: int) -> float:
    """Upper bound ``1/sqrt(N_c)`` on the standard deviation of an average over N_c pairs."""
    if n_c <= 0:
        return math.nan
    return 1.0 / math.sqrt(n_c)


@dataclass(frozen=True)
class CorrelationEstimates:
    settings: tuple[int, int]
    E1: float
    E2: float
    E: float
    n_c: int
    sigma: float

    @property
    def defined(self) -> bool:
        return self.n_c > 0


def estimates(counts: CoincidenceCounts, setting_pair: tuple[int, int]) -> CorrelationEstimates:
    a1, a2 = setting_pair
    (cpp, cpm), (cmp_, cmm) = counts.table[a1, a2].tolist()
    n_c = cpp + cpm + cmp_ + cmm
    if n_c == 0:
        nan = math.nan
        return CorrelationEstimates((a1, a2), nan, nan, nan, 0, nan)
    return CorrelationEstimates(
        settings=(a1, a2),
        E1=(cpp - cmm + cpm - cmp_) / n_c,
        E2=(cpp - cmm - cpm + cmp_) / n_c,
        E=(cpp + cmm - cpm - cmp_) / n_c,
        n_c=n_c,
        sigma=sigma_bound(n_c),
    )


def all_estimates(counts: CoincidenceCounts) -> dict[tuple[int, int], CorrelationEstimates]:
    return {sp: estimates(counts, sp) for sp in SETTING_PAIRS}


@dataclass(frozen=True)
class BellResult:
    S: float
    components: dict[tuple[int, int], float]
    window: int | None = None
    delta_g: int | None = None

    @property
    def defined(self) -> bool:
        return not math.isnan(self.S)


def bell_S(counts: CoincidenceCounts, window: int | None = None, delta_g: int | None = None) -> BellResult:
    comps = {sp: estimates(counts, sp).E for sp in SETTING_PAIRS}
    S = sum(CHSH_SIGNS[sp] * comps[sp] for sp in SETTING_PAIRS)
    return BellResult(S=S, components=comps, window=window, delta_g=delta_g)


@dataclass(frozen=True)
class LocalityComparison:
    """Dependence of one station's average on the remote setting."""

    station: int
    local_setting: int
    values: tuple[float, float]
    n_c: tuple[int, int]
    difference: float
    threshold: float
    verdict: str


@dataclass(frozen=True)
class LocalityTestReport:
    comparisons: tuple[LocalityComparison, ...]
    threshold_sigmas: float

    @property
    def verdict(self) -> str:
        verdicts = {c.verdict for c in self.comparisons}
        if VIOLATED in verdicts:
            return VIOLATED
        if UNDEFINED in verdicts:
            return UNDEFINED
        return COMPATIBLE


def _compare(station, local, est_pair, threshold_sigmas) -> LocalityComparison:
    e0, e1 = est_pair
    attr = "E1" if station == 1 else "E2"
    v0, v1 = getattr(e0, attr), getattr(e1, attr)
    if not (e0.defined and e1.defined):
        return LocalityComparison(station, local, (v0, v1), (e0.n_c, e1.n_c), math.nan, math.nan, UNDEFINED)
    diff = abs(v0 - v1)
    # conservative: the looser of the two 1/sqrt(N_c) bounds
    threshold = threshold_sigmas * max(e0.sigma, e1.sigma)
    verdict = VIOLATED if diff > threshold else COMPATIBLE
    return LocalityComparison(station, local, (v0, v1), (e0.n_c, e1.n_c), diff, threshold, verdict)


def locality_test(counts: CoincidenceCounts, threshold_sigmas: float = DEFAULT_THRESHOLD_SIGMAS) -> LocalityTestReport:
    """Check that E1 does not depend on the station-2 setting and E2 not on the station-1 setting."""
    est = all_estimates(counts)
    comps = []
    for a in (0, 1):
        comps.append(_compare(1, a, (est[(a, 0)], est[(a, 1)]), threshold_sigmas))
    for b in (0, 1):
        comps.append(_compare(2, b, (est[(0, b)], est[(1, b)]), threshold_sigmas))
    return LocalityTestReport(tuple(comps), threshold_sigmas)


@dataclass(frozen=True)
class SweepPoint:
    window: int
    delta_g: int
    counts: CoincidenceCounts
    estimates: dict[tuple[int, int], CorrelationEstimates]
    bell: BellResult
    locality: LocalityTestReport
    error_bar_sigmas: float

    @property
    def n_c_total(self) -> int:
        return self.counts.total

    def error_bar(self, setting_pair: tuple[int, int]) -> float:
        return self.error_bar_sigmas * self.estimates[setting_pair].sigma


def analyze_counts(
    counts: CoincidenceCounts,
    window: int,
    delta_g: int,
    threshold_sigmas: float = DEFAULT_THRESHOLD_SIGMAS,
    error_bar_sigmas: float = DEFAULT_ERROR_BAR_SIGMAS,
) -> SweepPoint:
    return SweepPoint(
        window=window,
        delta_g=delta_g,
        counts=counts,
        estimates=all_estimates(counts),
        bell=bell_S(counts, window, delta_g),
        locality=locality_test(counts, threshold_sigmas),
        error_bar_sigmas=error_bar_sigmas,
    )


def _sweep_one(args) -> SweepPoint:
    ds1, ds2, w, delta_g, mode, threshold_sigmas, error_bar_sigmas = args
    _, counts = find_coincidences(ds1, ds2, MatchConfig(window=w, delta_g=delta_g, mode=mode))
    return analyze_counts(counts, w, delta_g, threshold_sigmas, error_bar_sigmas)


def window_sweep(
    ds1: StationDataset,
    ds2: StationDataset,
    windows: Sequence[int],
    delta_g: int = 0,
    *,
    mode: str = CAUSAL_GREEDY,
    threshold_sigmas: float = DEFAULT_THRESHOLD_SIGMAS,
    error_bar_sigmas: float = DEFAULT_ERROR_BAR_SIGMAS,
    workers: int = 1,
) -> list[SweepPoint]:
    """Re-run matching and statistics for each window (in ticks), in the given order."""
    windows = [int(w) for w in windows]
    if not windows:
        raise ValueError("window list is empty")
    if any(b < a for a, b in zip(windows, windows[1:])):
        raise ValueError("window list must be ascending")
    jobs = [(ds1, ds2, w, delta_g, mode, threshold_sigmas, error_bar_sigmas) for w in windows]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(job) for job in jobs]


SWEEP_COLUMNS = ("W_ticks", "S", "E_ab", "E_ab'", "E_a'b", "E_a'b'", "Nc_total", "verdict")


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def write_sweep_tsv(fh: TextIO, points: Sequence[SweepPoint]) -> None:
    fh.write("\t".join(SWEEP_COLUMNS) + "\n")
    for p in points:
        row = [str(p.window), _fmt(p.bell.S)]
        row += [_fmt(p.bell.components[sp]) for sp in SETTING_PAIRS]
        row += [str(p.n_c_total), p.locality.verdict]
        fh.write("\t".join(row) + "\n")


def _json_float(v: float):
    return None if isinstance(v, float) and math.isnan(v) else v


def point_to_dict(p: SweepPoint, tau_ns: float | None = None) -> dict:
    out = {
        "window_ticks": p.window,
        "delta_g_ticks": p.delta_g,
        "S": _json_float(p.bell.S),
        "abs_S": _json_float(abs(p.bell.S)),
        "nc_total": p.n_c_total,
        "matched": list(p.counts.matched),
        "unmatched": list(p.counts.unmatched),
        "angles1": list(p.counts.angles1),
        "angles2": list(p.counts.angles2),
        "settings": [],
        "locality": {
            "threshold_sigmas": p.locality.threshold_sigmas,
            "verdict": p.locality.verdict,
            "comparisons": [
                {k: (_json_float(v) if isinstance(v, float) else v) for k, v in asdict(c).items()}
                for c in p.locality.comparisons
            ],
        },
    }
    if tau_ns is not None:
        out["window_ns"] = p.window * tau_ns
        out["delta_g_ns"] = p.delta_g * tau_ns
    for sp in SETTING_PAIRS:
        e = p.estimates[sp]
        out["settings"].append(
            {
                "A1": sp[0],
                "A2": sp[1],
                "C": {
                    "++": p.counts.c(sp[0], sp[1], 1, 1),
                    "+-": p.counts.c(sp[0], sp[1], 1, -1),
                    "-+": p.counts.c(sp[0], sp[1], -1, 1),
                    "--": p.counts.c(sp[0], sp[1], -1, -1),
                },
                "E1": _json_float(e.E1),
                "E2": _json_float(e.E2),
                "E": _json_float(e.E),
                "Nc": e.n_c,
                "sigma_bound": _json_float(e.sigma),
                "error_bar": _json_float(p.error_bar(sp)),
            }
        )
    return out


def write_sweep_json(fh: TextIO, points: Sequence[SweepPoint], tau_ns: float | None = None) -> None:
    json.dump([point_to_dict(p, tau_ns) for p in points], fh, indent=2)
    fh.write("\n")
