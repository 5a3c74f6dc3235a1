"""Locally causal discrete-event model of a two-station photon polarization experiment.

Each emitted pair carries polarizations ``xi`` and ``xi + pi/2``.  At station
``i`` an electro-optic modulator rotates the polarization by the selected
analyzer angle, a polarizing beam splitter sends the photon to detector +1
with probability ``cos^2(alpha)``, and the detection is delayed by a random
time whose scale ``T0 sin^4(2 alpha)`` depends on the local angle only.

Randomness comes from independent counter-based (Philox) substreams, one per
purpose.  Station 1 reads only the source streams and its own streams, so
nothing station 2 draws or decides can change station 1's output.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .coincidence import CAUSAL_GREEDY, CoincidenceCounts, MatchConfig, find_coincidences
from .dataset import DEFAULT_TAU_NS, StationDataset, reduce_angle
from .quantum import singlet_E
from .statistics import estimates

UNIFORM = "uniform"
EXPONENTIAL = "exponential"
TIME_TAG_MODELS = (UNIFORM, EXPONENTIAL)

# Below this spacing/T0 ratio accidental coincidences between neighbouring
# pairs visibly dilute the correlations (about 2% of coincidences at 15x).
ACCIDENTAL_SPACING_FACTOR = 100

BELL_ANGLES = (0.0, math.pi / 4, math.pi / 8, 3 * math.pi / 8)
DEFAULT_SEED = 1

# Substream keys; appending new purposes must never renumber existing ones.
STREAMS = {
    "xi": 0,
    "arrivals": 1,
    "setting1": 2,
    "setting2": 3,
    "splitter1": 4,
    "splitter2": 5,
    "delay1": 6,
    "delay2": 7,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    pairs: int = 1_000_000
    t0_ns: float = 2000.0
    time_tag_model: str = UNIFORM
    base_angles: tuple[float, float] = (BELL_ANGLES[0], BELL_ANGLES[2])
    angle_increment: float = math.pi / 4
    mean_interarrival_ns: float = 1_000_000.0
    tau_ns: float = DEFAULT_TAU_NS
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_angles", tuple(float(x) for x in self.base_angles))
        self.validate()

    def validate(self) -> None:
        if int(self.pairs) != self.pairs or self.pairs < 1:
            raise ConfigError(f"pairs: must be a positive integer, got {self.pairs!r}")
        if not self.t0_ns > 0:
            raise ConfigError(f"t0_ns: must be positive, got {self.t0_ns!r}")
        if self.time_tag_model not in TIME_TAG_MODELS:
            raise ConfigError(f"time_tag_model: expected one of {TIME_TAG_MODELS}, got {self.time_tag_model!r}")
        if len(self.base_angles) != 2:
            raise ConfigError("base_angles: expected two angles (station 1, station 2)")
        if not self.mean_interarrival_ns > 0:
            raise ConfigError(f"mean_interarrival_ns: must be positive, got {self.mean_interarrival_ns!r}")
        if not self.tau_ns > 0:
            raise ConfigError(f"tau_ns: must be positive, got {self.tau_ns!r}")
        if not 0 <= int(self.seed) < 2**64 or int(self.seed) != self.seed:
            raise ConfigError(f"seed: must be an integer in [0, 2**64), got {self.seed!r}")
        if self.mean_interarrival_ns < ACCIDENTAL_SPACING_FACTOR * self.t0_ns:
            warnings.warn(
                "mean pair spacing is not much larger than T0; detections of neighbouring "
                "pairs will produce accidental coincidences",
                stacklevel=3,
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_angles"] = list(self.base_angles)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> SimulationConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kwargs = dict(data)
        try:
            if "pairs" in kwargs:
                kwargs["pairs"] = _as_int(kwargs["pairs"], "pairs")
            if "seed" in kwargs:
                kwargs["seed"] = _as_int(kwargs["seed"], "seed")
            for name in ("t0_ns", "angle_increment", "mean_interarrival_ns", "tau_ns"):
                if name in kwargs:
                    kwargs[name] = float(kwargs[name])
            if "base_angles" in kwargs:
                kwargs["base_angles"] = tuple(float(x) for x in kwargs["base_angles"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def _as_int(v, name: str) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected an integer, got {v!r}") from None


class Streams:
    """Per-purpose Philox substreams of one seed.

    Draw ``n`` of a purpose is a pure function of ``(seed, purpose, n)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, purpose: str) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(STREAMS[purpose],))
        return np.random.Generator(np.random.Philox(ss))

    def uniform(self, purpose: str, n: int) -> np.ndarray:
        return self.generator(purpose).random(n)


def derive_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(1000 + int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ParticlePair:
    xi: float
    emission_ns: float

    def polarization(self, station: int) -> float:
        return self.xi + (station - 1) * math.pi / 2


def emit_pair(rng: np.random.Generator, previous_ns: float = 0.0, mean_interarrival_ns: float = 1_000_000.0) -> ParticlePair:
    xi = 2.0 * math.pi * rng.random()
    gap = -mean_interarrival_ns * math.log1p(-rng.random())
    return ParticlePair(xi=xi, emission_ns=previous_ns + gap)


def emit_pairs(n: int, mean_interarrival_ns: float, streams: Streams) -> tuple[np.ndarray, np.ndarray]:
    """Polarization angles ``xi`` in [0, 2pi) and Poisson emission times (ns)."""
    xi = 2.0 * math.pi * streams.uniform("xi", n)
    gaps = -mean_interarrival_ns * np.log1p(-streams.uniform("arrivals", n))
    return xi, np.cumsum(gaps)


def eom_rotate(xi, station: int, setting, base_angle: float, increment: float):
    zeta = base_angle + np.asarray(setting) * increment
    return xi + (station - 1) * math.pi / 2 - zeta


def split(alpha, r):
    """Detector +1 if ``r <= cos^2(alpha)``, else -1."""
    return np.where(np.asarray(r) <= np.cos(alpha) ** 2, 1, -1).astype(np.int8)


def beam_splitter(alpha, rng: np.random.Generator):
    alpha = np.asarray(alpha, dtype=float)
    out = split(alpha, rng.random(alpha.shape))
    return int(out) if out.ndim == 0 else out


def lambda_of(alpha, t0_ns: float):
    return t0_ns * np.sin(2.0 * np.asarray(alpha)) ** 4


def delay_uniform(alpha, t0_ns: float, r):
    return lambda_of(alpha, t0_ns) * r


def delay_exponential(alpha, t0_ns: float, r):
    # r must lie in (0, 1]; lambda acts as a time scale here
    return -lambda_of(alpha, t0_ns) * np.log(r)


def time_tag_uniform(alpha, t0_ns: float, rng: np.random.Generator):
    alpha = np.asarray(alpha, dtype=float)
    return delay_uniform(alpha, t0_ns, rng.random(alpha.shape))


def time_tag_exponential(alpha, t0_ns: float, rng: np.random.Generator):
    alpha = np.asarray(alpha, dtype=float)
    return delay_exponential(alpha, t0_ns, 1.0 - rng.random(alpha.shape))


def quantize(t_ns, tau_ns: float) -> np.ndarray:
    """Round half up to integer ticks of ``tau_ns``."""
    return np.floor(np.asarray(t_ns) / tau_ns + 0.5).astype(np.int64)


def simulate_station(
    station: int,
    xi: np.ndarray,
    emission_ns: np.ndarray,
    settings: np.ndarray,
    cfg: SimulationConfig,
    streams: Streams,
) -> StationDataset:
    """Detection events of one station from its particles and its own settings.

    Only station-local substreams are drawn here.
    """
    n = xi.shape[0]
    base = cfg.base_angles[station - 1]
    alpha = eom_rotate(xi, station, settings, base, cfg.angle_increment)
    outcomes = split(alpha, streams.uniform(f"splitter{station}", n))
    u = streams.uniform(f"delay{station}", n)
    if cfg.time_tag_model == UNIFORM:
        delay = delay_uniform(alpha, cfg.t0_ns, u)
    else:
        delay = delay_exponential(alpha, cfg.t0_ns, 1.0 - u)
    tags = quantize(emission_ns + delay, cfg.tau_ns)
    order = np.argsort(tags, kind="stable")
    return StationDataset(
        station_id=station,
        time_tags=tags[order],
        settings=np.asarray(settings, dtype=np.uint8)[order],
        outcomes=outcomes[order],
        tau_ns=cfg.tau_ns,
        base_angle=base,
        angle_increment=cfg.angle_increment,
        provenance=f"simulation model={cfg.time_tag_model} seed={cfg.seed} config={cfg.digest()}",
    )


def draw_settings(station: int, n: int, streams: Streams) -> np.ndarray:
    return (streams.uniform(f"setting{station}", n) >= 0.5).astype(np.uint8)


def run_simulation(
    cfg: SimulationConfig,
    *,
    settings1: np.ndarray | None = None,
    settings2: np.ndarray | None = None,
) -> tuple[StationDataset, StationDataset]:
    """Generate the two station datasets for ``cfg.pairs`` emitted pairs.

    ``settings1``/``settings2`` override the random setting sequences, which is
    how tests exercise the locality of the model.
    """
    streams = Streams(cfg.seed)
    n = int(cfg.pairs)
    xi, emission = emit_pairs(n, cfg.mean_interarrival_ns, streams)
    s1 = draw_settings(1, n, streams) if settings1 is None else np.asarray(settings1, dtype=np.uint8)
    s2 = draw_settings(2, n, streams) if settings2 is None else np.asarray(settings2, dtype=np.uint8)
    if s1.shape != (n,) or s2.shape != (n,):
        raise ConfigError("setting overrides must have one entry per pair")
    ds1 = simulate_station(1, xi, emission, s1, cfg, streams)
    ds2 = simulate_station(2, xi, emission, s2, cfg, streams)
    return ds1, ds2


def window_ticks(window_ns: float, tau_ns: float) -> int:
    w = int(round(window_ns / tau_ns))
    if w <= 0:
        raise ValueError(f"window {window_ns} ns is below one tick of {tau_ns} ns")
    return w


@dataclass(frozen=True)
class CurvePoint:
    theta: float
    b: float
    E: float
    n_c: int
    quantum: float

    @property
    def deviation(self) -> float:
        return self.E - self.quantum


def _angle_key(theta: float) -> float:
    return round(reduce_angle(theta), 12) % round(math.pi, 12)


def correlation_curve(
    cfg: SimulationConfig,
    thetas: Sequence[float],
    window_ns: float,
    b: float | None = None,
    *,
    mode: str = CAUSAL_GREEDY,
) -> list[CurvePoint]:
    """``E(theta, b)`` from one simulation per grid angle.

    Every run with station-1 base angle ``theta`` also measures
    ``theta + increment`` and both station-2 angles; coincidence counts are
    pooled by the physical angle pair over all runs.  Rows are returned for
    every grid angle and both station-2 angles, in grid order.
    """
    b = cfg.base_angles[1] if b is None else b
    w = window_ticks(window_ns, cfg.tau_ns)
    pooled: dict[tuple[float, float], np.ndarray] = {}
    for k, theta in enumerate(thetas):
        run_cfg = replace(cfg, base_angles=(theta, b), seed=derive_seed(cfg.seed, k))
        ds1, ds2 = run_simulation(run_cfg)
        _, counts = find_coincidences(ds1, ds2, MatchConfig(window=w, mode=mode))
        for a1 in (0, 1):
            for a2 in (0, 1):
                key = (_angle_key(counts.angles1[a1]), _angle_key(counts.angles2[a2]))
                pooled[key] = pooled.get(key, 0) + counts.table[a1, a2]
    b_angles = (reduce_angle(b), reduce_angle(b + cfg.angle_increment))
    rows = []
    for theta in thetas:
        for bb in b_angles:
            table = pooled.get((_angle_key(theta), _angle_key(bb)))
            if table is None:
                continue
            counts = CoincidenceCounts(table=np.zeros((2, 2, 2, 2), dtype=np.int64))
            counts.table[0, 0] = table
            est = estimates(counts, (0, 0))
            rows.append(CurvePoint(reduce_angle(theta), bb, est.E, est.n_c, singlet_E(theta, bb)))
    return rows


def write_curve_tsv(fh, rows: Sequence[CurvePoint]) -> None:
    fh.write("theta_rad\tb_rad\tE\tNc\tE_singlet\n")
    for r in rows:
        fh.write(f"{r.theta!r}\t{r.b!r}\t{r.E!r}\t{r.n_c}\t{r.quantum!r}\n")
