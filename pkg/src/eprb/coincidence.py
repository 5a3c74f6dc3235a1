"""Coincidence identification between the two station event streams.

The pipeline is: histogram the cross-station time-tag differences, locate the
peak to obtain the global offset, shift station 1 by that offset, pair events
within the window ``W`` (each event used at most once) and tally the sixteen
counters ``C_xy(A1, A2)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .dataset import StationDataset

CAUSAL_GREEDY = "causal_greedy"
MAX_CARDINALITY = "max_cardinality"
MATCH_MODES = (CAUSAL_GREEDY, MAX_CARDINALITY)

DEFAULT_BIN_WIDTH = 1
DEFAULT_MAX_LAG = 200_000

# Outcome +1 is stored at index 0 and -1 at index 1 of the counter axes.
OUTCOMES = (1, -1)


class NoCoincidencesError(ValueError):
    """The lag histogram holds no cross-station pairs."""


@dataclass(frozen=True)
class LagHistogram:
    bin_width: int
    max_lag: int
    lags: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_tsv(self, fh: TextIO) -> None:
        fh.write("lag_ticks\tcount\n")
        for lag, c in zip(self.lags.tolist(), self.counts.tolist()):
            fh.write(f"{lag}\t{c}\n")


@dataclass(frozen=True)
class MatchConfig:
    window: int
    delta_g: int = 0
    mode: str = CAUSAL_GREEDY

    def __post_init__(self) -> None:
        if int(self.window) != self.window or self.window <= 0:
            raise ValueError(f"coincidence window must be a positive tick count, got {self.window}")
        if self.mode not in MATCH_MODES:
            raise ValueError(f"unknown match mode {self.mode!r}; expected one of {MATCH_MODES}")


@dataclass
class CoincidenceCounts:
    """The counters ``C_xy(A1, A2)`` plus per-station matched/unmatched tallies.

    ``table[A1, A2, i, j]`` counts pairs with station-1 outcome ``OUTCOMES[i]``
    and station-2 outcome ``OUTCOMES[j]``.
    """

    table: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 2, 2), dtype=np.int64))
    matched: tuple[int, int] = (0, 0)
    unmatched: tuple[int, int] = (0, 0)
    angles1: tuple[float, float] = (0.0, 0.0)
    angles2: tuple[float, float] = (0.0, 0.0)

    def c(self, a1: int, a2: int, x: int, y: int) -> int:
        return int(self.table[a1, a2, OUTCOMES.index(x), OUTCOMES.index(y)])

    def n_c(self, a1: int, a2: int) -> int:
        return int(self.table[a1, a2].sum())

    @property
    def total(self) -> int:
        return int(self.table.sum())

    def __add__(self, other: CoincidenceCounts) -> CoincidenceCounts:
        return CoincidenceCounts(
            table=self.table + other.table,
            matched=(self.matched[0] + other.matched[0], self.matched[1] + other.matched[1]),
            unmatched=(self.unmatched[0] + other.unmatched[0], self.unmatched[1] + other.unmatched[1]),
            angles1=self.angles1,
            angles2=self.angles2,
        )


def _bin_layout(bin_width: int, max_lag: int) -> tuple[int, int, int]:
    half = bin_width // 2
    k_min = (-max_lag + half) // bin_width
    k_max = (max_lag + half) // bin_width
    return half, k_min, k_max


def lag_histogram(
    ds1: StationDataset,
    ds2: StationDataset,
    bin_width: int = DEFAULT_BIN_WIDTH,
    max_lag: int = DEFAULT_MAX_LAG,
    *,
    chunk: int = 1 << 16,
) -> LagHistogram:
    """Histogram of ``t1 - t2`` over all cross-station pairs with ``|t1 - t2| <= max_lag``.

    Bin ``k`` is centred on lag ``k * bin_width`` and holds lags in
    ``[k*bw - bw//2, k*bw - bw//2 + bw)``.  Only pairs inside the lag range are
    ever enumerated (sorted-merge bounds per station-1 event), so the cost
    scales with the number of in-range pairs rather than ``N1 * N2``.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    if max_lag < bin_width:
        raise ValueError("max_lag must be >= bin_width")
    half, k_min, k_max = _bin_layout(bin_width, max_lag)
    counts = np.zeros(k_max - k_min + 1, dtype=np.int64)
    t1 = ds1.time_tags
    t2 = ds2.time_tags
    for start in range(0, len(t1), chunk):
        seg = t1[start : start + chunk]
        lo = np.searchsorted(t2, seg - max_lag, side="left")
        hi = np.searchsorted(t2, seg + max_lag, side="right")
        n_in = hi - lo
        total = int(n_in.sum())
        if total == 0:
            continue
        first = np.cumsum(n_in) - n_in
        within = np.arange(total, dtype=np.int64) - np.repeat(first, n_in)
        m = np.repeat(lo, n_in) + within
        lags = np.repeat(seg, n_in) - t2[m]
        k = (lags + half) // bin_width
        counts += np.bincount(k - k_min, minlength=counts.size)
    lags_axis = np.arange(k_min, k_max + 1, dtype=np.int64) * bin_width
    return LagHistogram(bin_width=bin_width, max_lag=max_lag, lags=lags_axis, counts=counts)


def estimate_global_offset(h: LagHistogram) -> int:
    """Offset to add to station-1 tags so the histogram peak moves to lag 0.

    Equal maxima resolve to the smallest ``|offset|``, then the positive one.
    """
    if h.counts.size == 0 or h.counts.max() <= 0:
        raise NoCoincidencesError("no coincidences in range")
    peaks = h.lags[h.counts == h.counts.max()]
    offsets = sorted((-int(lag) for lag in peaks), key=lambda d: (abs(d), d < 0))
    return offsets[0]


def apply_offset(ds: StationDataset, delta_g: int) -> StationDataset:
    if delta_g == 0:
        return ds
    return ds.replace(time_tags=ds.time_tags + np.int64(delta_g))


def _candidates(t_self: np.ndarray, t_other: np.ndarray, window: int) -> np.ndarray:
    lo = np.searchsorted(t_other, t_self - window, side="left")
    hi = np.searchsorted(t_other, t_self + window, side="right")
    return np.flatnonzero(hi > lo)


def _match_causal(t1: np.ndarray, t2: np.ndarray, window: int) -> list[tuple[int, int]]:
    # Events with no opposite-station partner in reach can neither pair nor
    # block a pairing, so the sweep only visits the remaining candidates.
    i1 = _candidates(t1, t2, window)
    i2 = _candidates(t2, t1, window)
    times = np.concatenate([t1[i1], t2[i2]])
    station = np.concatenate([np.zeros(i1.size, np.int8), np.ones(i2.size, np.int8)])
    index = np.concatenate([i1, i2])
    order = np.lexsort((index, station, times))

    pending = (deque(), deque())
    pairs: list[tuple[int, int]] = []
    for t, s, n in zip(times[order].tolist(), station[order].tolist(), index[order].tolist()):
        other = pending[1 - s]
        while other and t - other[0][0] > window:
            other.popleft()
        if other:
            _, m = other.popleft()
            pairs.append((n, m) if s == 0 else (m, n))
        else:
            pending[s].append((t, n))
    pairs.sort()
    return pairs


def _match_max(t1: np.ndarray, t2: np.ndarray, window: int) -> list[tuple[int, int]]:
    # Each station-1 event spans [t1 - W, t1 + W]; all spans share one width,
    # so serving station-2 events in time order with the earliest-ending open
    # span yields a maximum matching of the interval graph.
    t1l = t1.tolist()
    n1 = len(t1l)
    i = 0
    pairs: list[tuple[int, int]] = []
    for m, t in enumerate(t2.tolist()):
        while i < n1 and t1l[i] < t - window:
            i += 1
        if i < n1 and t1l[i] <= t + window:
            pairs.append((i, m))
            i += 1
    return pairs


def match_pairs(ds1: StationDataset, ds2: StationDataset, cfg: MatchConfig) -> np.ndarray:
    """Disjoint ``(n, m)`` index pairs with ``|t1[n] - t2[m]| <= W``.

    Time tags are used as given; apply ``cfg.delta_g`` beforehand (see
    :func:`find_coincidences`).  ``causal_greedy`` sweeps the merged stream in
    time order and pairs each arriving event with the earliest unpaired
    opposite-station event still inside the window, so no decision depends
    on later events.  ``max_cardinality`` maximizes the number of pairs, which
    makes every decision depend on the whole record.
    """
    if cfg.mode == CAUSAL_GREEDY:
        pairs = _match_causal(ds1.time_tags, ds2.time_tags, int(cfg.window))
    else:
        pairs = _match_max(ds1.time_tags, ds2.time_tags, int(cfg.window))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def count_coincidences(ds1: StationDataset, ds2: StationDataset, pairs: np.ndarray) -> CoincidenceCounts:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n, m = pairs[:, 0], pairs[:, 1]
    if np.unique(n).size != n.size or np.unique(m).size != m.size:
        raise ValueError("pairs must be disjoint")
    a1 = ds1.settings[n].astype(np.int64)
    a2 = ds2.settings[m].astype(np.int64)
    xi = (ds1.outcomes[n] < 0).astype(np.int64)
    yi = (ds2.outcomes[m] < 0).astype(np.int64)
    flat = ((a1 * 2 + a2) * 2 + xi) * 2 + yi
    table = np.bincount(flat, minlength=16).reshape(2, 2, 2, 2)
    k = len(pairs)
    return CoincidenceCounts(
        table=table,
        matched=(k, k),
        unmatched=(len(ds1) - k, len(ds2) - k),
        angles1=ds1.angles,
        angles2=ds2.angles,
    )


def infinite_window_counts(ds1: StationDataset, ds2: StationDataset) -> CoincidenceCounts:
    """Counters obtained by pairing the n-th events of both stations, ignoring time."""
    n = min(len(ds1), len(ds2))
    idx = np.arange(n, dtype=np.int64)
    return count_coincidences(ds1, ds2, np.stack([idx, idx], axis=1))


def find_coincidences(
    ds1: StationDataset, ds2: StationDataset, cfg: MatchConfig
) -> tuple[np.ndarray, CoincidenceCounts]:
    """Shift station 1 by ``cfg.delta_g``, match and count."""
    shifted = apply_offset(ds1, cfg.delta_g)
    pairs = match_pairs(shifted, ds2, cfg)
    return pairs, count_coincidences(shifted, ds2, pairs)


def write_pairs_tsv(fh: TextIO, ds1: StationDataset, ds2: StationDataset, pairs: np.ndarray) -> None:
    fh.write("n\tm\tt1\tt2\n")
    t1 = ds1.time_tags
    t2 = ds2.time_tags
    for n, m in np.asarray(pairs).reshape(-1, 2).tolist():
        fh.write(f"{n}\t{m}\t{t1[n]}\t{t2[m]}\n")
