import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eprb.coincidence import MAX_CARDINALITY, CoincidenceCounts, MatchConfig, find_coincidences
from eprb.quantum import singlet_E
from eprb.simulator import BELL_ANGLES
from eprb.statistics import (
    COMPATIBLE,
    SETTING_PAIRS,
    UNDEFINED,
    VIOLATED,
    bell_S,
    estimates,
    locality_test,
    sigma_bound,
    window_sweep,
    write_sweep_tsv,
)


def counts_with(cells: dict) -> CoincidenceCounts:
    """``cells`` maps (A1, A2) to (C++, C+-, C-+, C--)."""
    c = CoincidenceCounts()
    for (a1, a2), (pp, pm, mp, mm) in cells.items():
        c.table[a1, a2] = [[pp, pm], [mp, mm]]
    return c


def test_perfect_correlation():
    e = estimates(counts_with({(0, 0): (50, 0, 0, 50)}), (0, 0))
    assert (e.E, e.E1, e.E2) == (1.0, 0.0, 0.0)


def test_arithmetic_example():
    # C++=30, C--=10, C+-=20, C-+=40
    e = estimates(counts_with({(0, 0): (30, 20, 40, 10)}), (0, 0))
    assert e.E1 == pytest.approx(0.0)
    assert e.E2 == pytest.approx(0.4)
    assert e.E == pytest.approx(-0.2)
    assert e.n_c == 100


def test_symmetric_counts():
    e = estimates(counts_with({(0, 0): (25, 25, 25, 25)}), (0, 0))
    assert (e.E1, e.E2, e.E) == (0.0, 0.0, 0.0)


def test_empty_pair_is_undefined():
    e = estimates(CoincidenceCounts(), (1, 1))
    assert not e.defined
    assert math.isnan(e.E) and math.isnan(e.sigma)


@pytest.mark.parametrize("n, expected", [(10_000, 0.01), (1, 1.0), (250_000, 0.002)])
def test_sigma_bound(n, expected):
    assert sigma_bound(n) == pytest.approx(expected)


def test_sigma_bound_zero():
    assert math.isnan(sigma_bound(0))


def _counts_for_E(Es: dict, n=1000):
    cells = {}
    for sp, E in Es.items():
        same = round(n * (1 + E) / 4)
        diff = round(n * (1 - E) / 4)
        cells[sp] = (same, diff, diff, same)
    return counts_with(cells)


def test_S_singlet_value():
    a, a2, b, b2 = BELL_ANGLES
    ang1, ang2 = (a, a2), (b, b2)
    E = {sp: singlet_E(ang1[sp[0]], ang2[sp[1]]) for sp in SETTING_PAIRS}
    S = sum(s * E[sp] for sp, s in zip(SETTING_PAIRS, (1, -1, 1, 1)))
    assert abs(S) == pytest.approx(2 * math.sqrt(2))
    # the same through counts, limited only by integer rounding
    res = bell_S(_counts_for_E(E, n=4_000_000))
    assert abs(res.S) == pytest.approx(2 * math.sqrt(2), abs=1e-5)


def test_S_zero_and_maximum():
    assert bell_S(_counts_for_E({sp: 0.0 for sp in SETTING_PAIRS})).S == 0.0
    extreme = {(0, 0): 1.0, (0, 1): -1.0, (1, 0): 1.0, (1, 1): 1.0}
    assert bell_S(_counts_for_E(extreme)).S == 4.0


def test_locality_identical_is_compatible():
    c = counts_with({sp: (30, 20, 40, 10) for sp in SETTING_PAIRS})
    rep = locality_test(c)
    assert rep.verdict == COMPATIBLE
    assert all(comp.difference == 0 for comp in rep.comparisons)


def test_locality_violation():
    # E1 = +0.15 vs -0.15 at N_c = 10^4 each: difference 0.30 > 5 * 0.01
    c = counts_with(
        {
            (0, 0): (2875, 2875, 2125, 2125),
            (0, 1): (2125, 2125, 2875, 2875),
            (1, 0): (2500,) * 4,
            (1, 1): (2500,) * 4,
        }
    )
    rep = locality_test(c)
    first = rep.comparisons[0]
    assert first.difference == pytest.approx(0.30)
    assert first.threshold == pytest.approx(0.05)
    assert first.verdict == VIOLATED
    assert rep.verdict == VIOLATED


def test_locality_threshold_parameter():
    c = counts_with({(0, 0): (26, 25, 24, 25), (0, 1): (25,) * 4, (1, 0): (25,) * 4, (1, 1): (25,) * 4})
    assert locality_test(c).verdict == COMPATIBLE
    assert locality_test(c, threshold_sigmas=0.1).verdict == VIOLATED


def test_locality_undefined_when_a_pair_is_empty():
    c = counts_with({(0, 0): (25,) * 4, (0, 1): (25,) * 4, (1, 0): (25,) * 4})
    assert locality_test(c).verdict == UNDEFINED


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=16, max_size=16))
def test_bounds_hold_for_any_counts(cells):
    c = CoincidenceCounts(table=np.asarray(cells, dtype=np.int64).reshape(2, 2, 2, 2))
    for sp in SETTING_PAIRS:
        e = estimates(c, sp)
        if e.defined:
            assert max(abs(e.E1), abs(e.E2), abs(e.E)) <= 1
    S = bell_S(c).S
    assert math.isnan(S) or abs(S) <= 4


def test_E_equals_mean_product_over_pairs(small_sim):
    ds1, ds2 = small_sim
    pairs, counts = find_coincidences(ds1, ds2, MatchConfig(window=40))
    x = ds1.outcomes[pairs[:, 0]].astype(float)
    y = ds2.outcomes[pairs[:, 1]].astype(float)
    s1, s2 = ds1.settings[pairs[:, 0]], ds2.settings[pairs[:, 1]]
    for sp in SETTING_PAIRS:
        sel = (s1 == sp[0]) & (s2 == sp[1])
        e = estimates(counts, sp)
        assert e.E == pytest.approx(np.mean(x[sel] * y[sel]), abs=1e-12)
        assert e.E1 == pytest.approx(np.mean(x[sel]), abs=1e-12)
        assert e.E2 == pytest.approx(np.mean(y[sel]), abs=1e-12)


def test_sweep_small_window_beats_two(small_sim):
    pts = window_sweep(*small_sim, [4, 40])
    assert abs(pts[0].bell.S) > 2
    assert [p.window for p in pts] == [4, 40]


def test_sweep_nc_monotone_in_max_mode(small_sim):
    ws = [1, 2, 5, 10, 50, 200, 1000, 10**5, 10**9]
    pts = window_sweep(*small_sim, ws, mode=MAX_CARDINALITY)
    nc = [p.n_c_total for p in pts]
    assert nc == sorted(nc)
    greedy = window_sweep(*small_sim, ws[-1:])
    assert greedy[0].n_c_total <= nc[-1]


def test_sweep_rejects_bad_lists(small_sim):
    with pytest.raises(ValueError):
        window_sweep(*small_sim, [])
    with pytest.raises(ValueError):
        window_sweep(*small_sim, [10, 4])


def test_sweep_parallel_matches_serial(small_sim):
    ws = [4, 20, 100]
    serial = window_sweep(*small_sim, ws)
    parallel = window_sweep(*small_sim, ws, workers=2)
    assert [p.bell.S for p in serial] == [p.bell.S for p in parallel]


def test_sweep_tsv_columns(small_sim):
    import io

    buf = io.StringIO()
    write_sweep_tsv(buf, window_sweep(*small_sim, [4]))
    header, row = buf.getvalue().splitlines()
    assert header.split("\t") == ["W_ticks", "S", "E_ab", "E_ab'", "E_a'b", "E_a'b'", "Nc_total", "verdict"]
    assert row.split("\t")[0] == "4"
