import math
import warnings

import numpy as np
import pytest
from scipy import stats

from eprb.coincidence import MatchConfig, find_coincidences
from eprb.dataset import to_bytes
from eprb.simulator import (
    EXPONENTIAL,
    ConfigError,
    ParticlePair,
    SimulationConfig,
    Streams,
    beam_splitter,
    correlation_curve,
    delay_exponential,
    emit_pair,
    emit_pairs,
    eom_rotate,
    lambda_of,
    quantize,
    run_simulation,
    split,
    time_tag_exponential,
    time_tag_uniform,
    window_ticks,
)
from eprb.statistics import COMPATIBLE, locality_test

T0 = 2000.0


def rng(seed=0):
    return np.random.default_rng(seed)


def test_xi_uniform_chi_square():
    xi, _ = emit_pairs(100_000, 1e6, Streams(4))
    assert xi.min() >= 0 and xi.max() < 2 * math.pi
    observed, _ = np.histogram(xi, bins=50, range=(0, 2 * math.pi))
    assert stats.chisquare(observed).pvalue > 0.001


def test_interarrival_exponential_with_configured_mean():
    _, t = emit_pairs(100_000, 30_000.0, Streams(5))
    gaps = np.diff(np.concatenate([[0.0], t]))
    assert gaps.mean() == pytest.approx(30_000.0, rel=0.02)
    assert stats.kstest(gaps, "expon", args=(0, 30_000.0)).pvalue > 0.001


def test_emit_pair_single_draw():
    p = emit_pair(rng(1), previous_ns=10.0, mean_interarrival_ns=5.0)
    assert 0 <= p.xi < 2 * math.pi
    assert p.emission_ns > 10.0
    assert p.polarization(2) - p.polarization(1) == math.pi / 2


def test_pair_polarizations_orthogonal():
    p = ParticlePair(xi=1.234, emission_ns=0.0)
    assert p.polarization(2) - p.polarization(1) == pytest.approx(math.pi / 2, abs=0)


def test_eom_examples():
    assert eom_rotate(0.3, 1, 0, 0.3, math.pi / 4) == pytest.approx(0)
    assert eom_rotate(0.0, 2, 1, math.pi / 8, math.pi / 4) == pytest.approx(math.pi / 8)
    assert eom_rotate(0.7, 1, 0, 0.2, 0.0) == eom_rotate(0.7, 1, 1, 0.2, 0.0)


def test_beam_splitter_extremes():
    g = rng(2)
    assert np.all(beam_splitter(np.zeros(1000), g) == 1)
    assert np.all(beam_splitter(np.full(1000, math.pi / 2), g) == -1)
    assert beam_splitter(0.0, g) == 1


def test_malus_pi_over_six():
    out = beam_splitter(np.full(1_000_000, math.pi / 6), rng(3))
    assert np.mean((out + 1) / 2) == pytest.approx(0.75, abs=0.002)


def test_split_threshold_inclusive():
    assert split(math.pi / 4, 0.5) == 1
    assert split(math.pi / 4, 0.5000001) == -1


@pytest.mark.parametrize("alpha, expected", [(0, 0), (math.pi / 4, T0), (math.pi / 8, T0 / 4)])
def test_lambda_examples(alpha, expected):
    assert lambda_of(alpha, T0) == pytest.approx(expected, abs=1e-9)


def test_uniform_delay_properties():
    assert np.all(time_tag_uniform(np.zeros(100), T0, rng()) == 0)
    alpha = np.full(100_000, math.pi / 4)
    d = time_tag_uniform(alpha, T0, rng(4))
    assert d.mean() == pytest.approx(T0 / 2, rel=0.01)
    assert d.max() <= T0 and d.min() >= 0
    a = rng(5).uniform(0, 2 * math.pi, 10_000)
    assert np.all(time_tag_uniform(a, T0, rng(6)) <= lambda_of(a, T0))


def test_exponential_delay_properties():
    assert np.all(time_tag_exponential(np.zeros(100), T0, rng()) == 0)
    alpha = np.full(100_000, math.pi / 4)
    d = time_tag_exponential(alpha, T0, rng(7))
    assert d.mean() == pytest.approx(T0, rel=0.02)
    assert stats.kstest(d, "expon", args=(0, T0)).pvalue > 0.001
    alpha = np.full(100_000, math.pi / 8)
    d = time_tag_exponential(alpha, T0, rng(8))
    assert stats.kstest(d, "expon", args=(0, T0 / 4)).pvalue > 0.001


def test_delay_exponential_formula():
    assert delay_exponential(math.pi / 4, T0, math.exp(-1)) == pytest.approx(T0)


def test_quantize_half_up():
    assert quantize([0.0, 0.24, 0.25, 0.26, 0.75], 0.5).tolist() == [0, 0, 1, 1, 2]


def test_single_pair_reproducible():
    cfg = SimulationConfig(pairs=1, seed=9)
    a = run_simulation(cfg)
    b = run_simulation(cfg)
    assert len(a[0]) == len(a[1]) == 1
    assert to_bytes(a[0]) == to_bytes(b[0]) and to_bytes(a[1]) == to_bytes(b[1])


def test_seed_changes_output():
    a = run_simulation(SimulationConfig(pairs=100, seed=1))
    b = run_simulation(SimulationConfig(pairs=100, seed=2))
    assert to_bytes(a[0]) != to_bytes(b[0])


def test_station1_ignores_station2_settings():
    cfg = SimulationConfig(pairs=5_000, seed=12)
    n = cfg.pairs
    s1 = rng(1).integers(0, 2, n)
    a1, _ = run_simulation(cfg, settings1=s1, settings2=np.zeros(n))
    b1, b2 = run_simulation(cfg, settings1=s1, settings2=rng(2).integers(0, 2, n))
    assert to_bytes(a1) == to_bytes(b1)
    assert set(b2.settings.tolist()) == {0, 1}


def test_settings_override_shape_checked():
    with pytest.raises(ConfigError):
        run_simulation(SimulationConfig(pairs=10), settings1=np.zeros(3))


def test_settings_balanced():
    ds1, ds2 = run_simulation(SimulationConfig(pairs=100_000, seed=3))
    for ds in (ds1, ds2):
        assert ds.settings.mean() == pytest.approx(0.5, abs=0.005)


def test_tags_sorted_and_stations_labelled():
    ds1, ds2 = run_simulation(SimulationConfig(pairs=10_000, seed=3, time_tag_model=EXPONENTIAL))
    assert ds1.station_id == 1 and ds2.station_id == 2
    assert np.all(np.diff(ds1.time_tags) >= 0)
    assert ds2.base_angle == pytest.approx(math.pi / 8)
    ds1.validate()
    ds2.validate()


def test_single_particle_averages_local(small_sim):
    _, counts = find_coincidences(*small_sim, MatchConfig(window=4))
    assert locality_test(counts).verdict == COMPATIBLE


def test_config_validation():
    with pytest.raises(ConfigError, match="pairs"):
        SimulationConfig(pairs=0)
    with pytest.raises(ConfigError, match="time_tag_model"):
        SimulationConfig(time_tag_model="gaussian")
    with pytest.raises(ConfigError, match="unknown config field"):
        SimulationConfig.from_dict({"pairz": 3})
    with pytest.raises(ConfigError, match="seed"):
        SimulationConfig.from_dict({"seed": 1.5})


def test_config_dict_round_trip():
    cfg = SimulationConfig(pairs=10, seed=4, base_angles=(0.1, 0.2))
    assert SimulationConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == SimulationConfig.from_dict(cfg.to_dict()).digest()


def test_dense_arrivals_warn():
    with pytest.warns(UserWarning, match="accidental"):
        SimulationConfig(mean_interarrival_ns=30_000.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        SimulationConfig()


def test_window_ticks():
    assert window_ticks(2.0, 0.5) == 4
    with pytest.raises(ValueError):
        window_ticks(0.1, 0.5)


def test_curve_examples():
    cfg = SimulationConfig(pairs=100_000, seed=2)
    b = math.pi / 8
    thetas = [b, b + math.pi / 4]
    rows = {(round(r.theta, 9), round(r.b, 9)): r for r in correlation_curve(cfg, thetas, 2.0, b)}
    same = rows[(round(b, 9), round(b, 9))]
    quarter = rows[(round(b + math.pi / 4, 9), round(b, 9))]
    assert same.E == pytest.approx(-1, abs=5 / math.sqrt(same.n_c))
    assert quarter.E == pytest.approx(0, abs=5 / math.sqrt(quarter.n_c))
    assert same.quantum == pytest.approx(-1)
