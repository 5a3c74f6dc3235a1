import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eprb import dataset as dsm
from eprb.dataset import (
    DatasetFormatError,
    EventRecord,
    StationDataset,
    angle_of,
    from_bytes,
    read_station_data,
    to_bytes,
    write_station_data,
)
from eprb.simulator import SimulationConfig, run_simulation


def _ds(tags, settings=None, outcomes=None, **kw):
    n = len(tags)
    return StationDataset(
        station_id=kw.pop("station_id", 1),
        time_tags=np.asarray(tags, dtype=np.int64),
        settings=np.zeros(n, np.uint8) if settings is None else np.asarray(settings, np.uint8),
        outcomes=np.ones(n, np.int8) if outcomes is None else np.asarray(outcomes, np.int8),
        **kw,
    )


def _header_end(raw: bytes) -> int:
    return raw.index(b"\n\n") + 2


def test_empty_dataset_has_zero_records():
    raw = to_bytes(_ds([]))
    assert b"events=0\n" in raw
    assert len(raw) == _header_end(raw)
    assert from_bytes(raw) == _ds([])


def test_single_record_layout():
    raw = to_bytes(_ds([0]))
    payload = raw[_header_end(raw):]
    assert len(payload) == dsm.RECORD_SIZE
    assert payload == bytes(8) + b"\x00\x01" + bytes(6)


def test_minus_one_outcome_byte():
    raw = to_bytes(_ds([7], settings=[1], outcomes=[-1]))
    payload = raw[_header_end(raw):]
    assert payload == (7).to_bytes(8, "little") + b"\x01\xff" + bytes(6)


def test_header_lines_in_order():
    raw = to_bytes(_ds([1, 2], station_id=2, base_angle=math.pi / 8, provenance="unit"))
    lines = raw[: _header_end(raw)].decode().split("\n")
    keys = [line.split("=")[0] for line in lines[1:7]]
    assert lines[0] == "EPRB1"
    assert keys == ["station", "tau_ns", "base_angle_rad", "angle_increment_rad", "events", "provenance"]


def test_write_read_write_simulated_bytes_identical():
    ds1, _ = run_simulation(SimulationConfig(pairs=10_000, seed=3))
    first = to_bytes(ds1)
    again = to_bytes(from_bytes(first))
    assert first == again
    assert from_bytes(first) == ds1


def test_text_variant_round_trip():
    ds1, _ = run_simulation(SimulationConfig(pairs=2_000, seed=3))
    raw = to_bytes(ds1, text=True)
    assert b"time_tag\tsetting\toutcome" in raw
    assert from_bytes(raw, text=True) == ds1
    assert to_bytes(from_bytes(raw, text=True), text=True) == raw


def test_truncated_payload_count_mismatch():
    raw = to_bytes(_ds([1, 2, 3]))
    with pytest.raises(DatasetFormatError, match="count mismatch"):
        from_bytes(raw[:-5])


def test_non_monotone_rejected():
    raw = bytearray(to_bytes(_ds([3, 5])))
    start = _header_end(bytes(raw))
    raw[start : start + 8] = (5).to_bytes(8, "little")
    raw[start + 16 : start + 24] = (3).to_bytes(8, "little")
    with pytest.raises(DatasetFormatError, match="non-monotone"):
        from_bytes(bytes(raw))


def test_bad_outcome_byte_rejected():
    raw = bytearray(to_bytes(_ds([3])))
    raw[_header_end(bytes(raw)) + 9] = 0x02
    with pytest.raises(DatasetFormatError, match="outcome"):
        from_bytes(bytes(raw))


def test_bad_magic_rejected():
    raw = to_bytes(_ds([3]))
    with pytest.raises(DatasetFormatError):
        from_bytes(b"XXXX" + raw[4:])


def test_ties_preserved_in_input_order():
    ds = _ds([4, 4, 4], settings=[1, 0, 1], outcomes=[-1, 1, 1])
    back = from_bytes(to_bytes(ds))
    assert back.settings.tolist() == [1, 0, 1]
    assert back.outcomes.tolist() == [-1, 1, 1]


def test_negative_tags_cannot_be_written():
    with pytest.raises(DatasetFormatError):
        to_bytes(_ds([-1, 2]))


@pytest.mark.parametrize(
    "setting, base, expected",
    [(0, 0.0, 0.0), (1, 0.0, math.pi / 4), (1, math.pi / 8, 3 * math.pi / 8)],
)
def test_angle_of(setting, base, expected):
    ds = _ds([0], base_angle=base)
    assert angle_of(EventRecord(0, setting, 1), ds) == pytest.approx(expected)


def test_angle_of_bijective():
    ds = _ds([0], base_angle=0.3, angle_increment=0.7)
    angles = {angle_of(EventRecord(0, a, 1), ds) for a in (0, 1)}
    assert angles == {ds.base_angle, ds.base_angle + ds.angle_increment}


sorted_tags = st.lists(st.integers(0, 2**62), max_size=60).map(sorted)


@st.composite
def datasets(draw):
    tags = draw(sorted_tags)
    n = len(tags)
    settings_ = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    outcomes = draw(st.lists(st.sampled_from([1, -1]), min_size=n, max_size=n))
    fl = st.floats(-10, 10, allow_nan=False)
    return _ds(
        tags,
        settings_,
        outcomes,
        station_id=draw(st.sampled_from([1, 2])),
        tau_ns=draw(st.floats(1e-3, 10)),
        base_angle=draw(fl),
        angle_increment=draw(fl),
        provenance=draw(st.text(st.characters(blacklist_categories=("Cc", "Cs", "Zl", "Zp")), max_size=20)),
    )


@settings(max_examples=150, deadline=None)
@given(datasets(), st.booleans())
def test_round_trip_property(ds, text):
    buf = io.BytesIO()
    write_station_data(ds, buf, text=text)
    buf.seek(0)
    assert read_station_data(buf, text=text) == ds


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=30, unique=True), st.randoms())
def test_unsorted_permutations_rejected(tags, rnd):
    tags = sorted(tags)
    perm = tags[:]
    while perm == tags:
        rnd.shuffle(perm)
    raw = to_bytes(_ds(tags))
    start = _header_end(raw)
    body = bytearray(raw)
    for k, t in enumerate(perm):
        body[start + 16 * k : start + 16 * k + 8] = t.to_bytes(8, "little")
    with pytest.raises(DatasetFormatError, match="non-monotone"):
        from_bytes(bytes(body))
