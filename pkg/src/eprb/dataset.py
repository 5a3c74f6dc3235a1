"""Per-station time-tagged event data and the canonical station file format.

A station file is a short UTF-8 header followed by fixed-size binary records::

    EPRB1
    station=1
    tau_ns=0.5
    base_angle_rad=0.0
    angle_increment_rad=0.7853981633974483
    events=2
    provenance=simulation seed=1

    <2 x 16-byte records>

Each record is ``time_tag`` (u64 little-endian), ``setting`` (u8, 0/1),
``outcome`` (u8, 0x01 for +1 and 0xFF for -1) and six zero bytes.  The text
variant keeps the same header and replaces the binary payload by TSV rows
``time_tag<TAB>setting<TAB>outcome``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

FORMAT_MAGIC = "EPRB1"
FORMAT_VERSION = 1
DEFAULT_TAU_NS = 0.5
RECORD_SIZE = 16
TEXT_COLUMNS = ("time_tag", "setting", "outcome")

RECORD_DTYPE = np.dtype(
    [("time_tag", "<u8"), ("setting", "u1"), ("outcome", "u1"), ("reserved", "V6")]
)


class DatasetFormatError(ValueError):
    """Raised for malformed station files or invalid station datasets."""


@dataclass(frozen=True)
class EventRecord:
    time_tag: int
    setting: int
    outcome: int


@dataclass(frozen=True)
class DatasetHeader:
    station_id: int
    tau_ns: float
    base_angle: float
    angle_increment: float
    event_count: int
    provenance: str = "external"
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True, eq=False)
class StationDataset:
    """Event list of one observation station.

    Events are stored column-wise: ``time_tags`` (int64 ticks of ``tau_ns``),
    ``settings`` (uint8, 0/1) and ``outcomes`` (int8, +1/-1).  Time tags may
    become negative in memory after a clock offset has been applied; only the
    on-disk format requires them to be nonnegative.
    """

    station_id: int
    time_tags: np.ndarray
    settings: np.ndarray
    outcomes: np.ndarray
    tau_ns: float = DEFAULT_TAU_NS
    base_angle: float = 0.0
    angle_increment: float = math.pi / 4
    provenance: str = "external"

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(self.time_tags, dtype=np.int64)
        s = np.ascontiguousarray(self.settings, dtype=np.uint8)
        x = np.ascontiguousarray(self.outcomes, dtype=np.int8)
        for arr in (t, s, x):
            arr.setflags(write=False)
        object.__setattr__(self, "time_tags", t)
        object.__setattr__(self, "settings", s)
        object.__setattr__(self, "outcomes", x)
        object.__setattr__(self, "tau_ns", float(self.tau_ns))
        object.__setattr__(self, "base_angle", float(self.base_angle))
        object.__setattr__(self, "angle_increment", float(self.angle_increment))
        self.validate()

    def validate(self) -> None:
        if self.station_id not in (1, 2):
            raise DatasetFormatError(f"station id must be 1 or 2, got {self.station_id}")
        if not (self.tau_ns > 0 and math.isfinite(self.tau_ns)):
            raise DatasetFormatError(f"tau_ns must be positive, got {self.tau_ns}")
        n = self.time_tags.shape[0]
        if self.time_tags.ndim != 1 or self.settings.shape != (n,) or self.outcomes.shape != (n,):
            raise DatasetFormatError("time_tags, settings and outcomes must be 1-d of equal length")
        if n and np.any(np.diff(self.time_tags) < 0):
            raise DatasetFormatError("non-monotone time tags")
        if n and np.any(self.settings > 1):
            raise DatasetFormatError("setting outside {0, 1}")
        if n and np.any(np.abs(self.outcomes) != 1):
            raise DatasetFormatError("outcome outside {+1, -1}")

    def __len__(self) -> int:
        return int(self.time_tags.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StationDataset):
            return NotImplemented
        return (
            self.header() == other.header()
            and np.array_equal(self.time_tags, other.time_tags)
            and np.array_equal(self.settings, other.settings)
            and np.array_equal(self.outcomes, other.outcomes)
        )

    def __getitem__(self, n: int) -> EventRecord:
        return EventRecord(int(self.time_tags[n]), int(self.settings[n]), int(self.outcomes[n]))

    @property
    def angles(self) -> tuple[float, float]:
        """The two analyzer angles selectable by setting 0 and setting 1."""
        return (
            reduce_angle(self.base_angle),
            reduce_angle(self.base_angle + self.angle_increment),
        )

    def header(self) -> DatasetHeader:
        return DatasetHeader(
            station_id=self.station_id,
            tau_ns=self.tau_ns,
            base_angle=self.base_angle,
            angle_increment=self.angle_increment,
            event_count=len(self),
            provenance=self.provenance,
        )

    def records(self):
        for n in range(len(self)):
            yield self[n]

    def replace(self, **changes) -> StationDataset:
        fields = dict(
            station_id=self.station_id,
            time_tags=self.time_tags,
            settings=self.settings,
            outcomes=self.outcomes,
            tau_ns=self.tau_ns,
            base_angle=self.base_angle,
            angle_increment=self.angle_increment,
            provenance=self.provenance,
        )
        fields.update(changes)
        return StationDataset(**fields)

    @classmethod
    def from_records(cls, station_id: int, records, **meta) -> StationDataset:
        records = list(records)
        return cls(
            station_id=station_id,
            time_tags=np.array([r.time_tag for r in records], dtype=np.int64),
            settings=np.array([r.setting for r in records], dtype=np.uint8),
            outcomes=np.array([r.outcome for r in records], dtype=np.int8),
            **meta,
        )


def reduce_angle(theta: float) -> float:
    """Reduce an analyzer angle to [0, pi); polarizer angles are pi-periodic."""
    r = math.fmod(theta, math.pi)
    if r < 0:
        r += math.pi
    # fmod of a value just below a multiple of pi can round up to pi itself
    return 0.0 if r >= math.pi else r


def angle_of(record: EventRecord, ds: StationDataset) -> float:
    return reduce_angle(ds.base_angle + record.setting * ds.angle_increment)


def _format_header(header: DatasetHeader) -> bytes:
    provenance = header.provenance.replace("\n", " ").replace("\r", " ")
    lines = [
        FORMAT_MAGIC,
        f"station={header.station_id}",
        f"tau_ns={header.tau_ns!r}",
        f"base_angle_rad={header.base_angle!r}",
        f"angle_increment_rad={header.angle_increment!r}",
        f"events={header.event_count}",
        f"provenance={provenance}",
        "",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_station_data(ds: StationDataset, sink: BinaryIO, *, text: bool = False) -> None:
    """Serialize ``ds`` to ``sink`` in the canonical (or TSV) format.

    Everything is validated and encoded before the first byte is written.
    """
    ds.validate()
    if len(ds) and ds.time_tags[0] < 0:
        raise DatasetFormatError("negative time tags cannot be stored; re-base the dataset first")
    head = _format_header(ds.header())
    if text:
        buf = io.StringIO()
        buf.write("\t".join(TEXT_COLUMNS) + "\n")
        for t, s, x in zip(ds.time_tags.tolist(), ds.settings.tolist(), ds.outcomes.tolist()):
            buf.write(f"{t}\t{s}\t{x:+d}\n")
        payload = buf.getvalue().encode("utf-8")
    else:
        rec = np.zeros(len(ds), dtype=RECORD_DTYPE)
        rec["time_tag"] = ds.time_tags.astype(np.uint64)
        rec["setting"] = ds.settings
        rec["outcome"] = np.where(ds.outcomes > 0, 0x01, 0xFF).astype(np.uint8)
        payload = rec.tobytes()
    sink.write(head + payload)


def _parse_header(source: BinaryIO) -> DatasetHeader:
    def line() -> str:
        raw = source.readline()
        if not raw.endswith(b"\n"):
            raise DatasetFormatError("malformed header: unexpected end of file")
        try:
            return raw.decode("utf-8").rstrip("\n").rstrip("\r")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError("malformed header: not UTF-8") from exc

    magic = line()
    if magic != FORMAT_MAGIC:
        raise DatasetFormatError(f"malformed header: bad magic {magic!r}")
    values: dict[str, str] = {}
    for key in ("station", "tau_ns", "base_angle_rad", "angle_increment_rad", "events", "provenance"):
        text = line()
        name, sep, value = text.partition("=")
        if not sep or name != key:
            raise DatasetFormatError(f"malformed header: expected {key}=..., got {text!r}")
        values[key] = value
    if line() != "":
        raise DatasetFormatError("malformed header: missing blank line after header")
    try:
        header = DatasetHeader(
            station_id=int(values["station"]),
            tau_ns=float(values["tau_ns"]),
            base_angle=float(values["base_angle_rad"]),
            angle_increment=float(values["angle_increment_rad"]),
            event_count=int(values["events"]),
            provenance=values["provenance"],
        )
    except ValueError as exc:
        raise DatasetFormatError(f"malformed header: {exc}") from exc
    if header.event_count < 0:
        raise DatasetFormatError("malformed header: negative event count")
    return header


def _parse_text_payload(payload: bytes, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lines = payload.decode("utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != TEXT_COLUMNS:
        raise DatasetFormatError("malformed text payload: missing column header")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise DatasetFormatError(f"count mismatch: header declares {count}, found {len(rows)} rows")
    t = np.empty(count, dtype=np.int64)
    s = np.empty(count, dtype=np.uint8)
    x = np.empty(count, dtype=np.int8)
    for i, row in enumerate(rows):
        cols = row.split("\t")
        if len(cols) != 3:
            raise DatasetFormatError(f"malformed text row {i}: {row!r}")
        try:
            t[i], s[i], outcome = int(cols[0]), int(cols[1]), int(cols[2])
        except (ValueError, OverflowError) as exc:
            raise DatasetFormatError(f"malformed text row {i}: {row!r}") from exc
        if outcome not in (1, -1):
            raise DatasetFormatError(f"outcome outside {{+1, -1}} in row {i}")
        x[i] = outcome
    return t, s, x


def read_station_data(source: BinaryIO, *, text: bool = False) -> StationDataset:
    header = _parse_header(source)
    payload = source.read()
    n = header.event_count
    if text:
        t, s, x = _parse_text_payload(payload, n)
    else:
        if len(payload) != n * RECORD_SIZE:
            raise DatasetFormatError(
                f"count mismatch: header declares {n} records, payload holds {len(payload) / RECORD_SIZE:g}"
            )
        rec = np.frombuffer(payload, dtype=RECORD_DTYPE)
        if np.any(rec["time_tag"] > np.iinfo(np.int64).max):
            raise DatasetFormatError("time tag exceeds the supported range")
        t = rec["time_tag"].astype(np.int64)
        s = rec["setting"].copy()
        ob = rec["outcome"]
        if np.any((ob != 0x01) & (ob != 0xFF)):
            raise DatasetFormatError("outcome byte outside {0x01, 0xFF}")
        x = np.where(ob == 0x01, 1, -1).astype(np.int8)
    return StationDataset(
        station_id=header.station_id,
        time_tags=t,
        settings=s,
        outcomes=x,
        tau_ns=header.tau_ns,
        base_angle=header.base_angle,
        angle_increment=header.angle_increment,
        provenance=header.provenance,
    )


def save(ds: StationDataset, path, *, text: bool = False) -> None:
    with open(path, "wb") as fh:
        write_station_data(ds, fh, text=text)


def load(path, *, text: bool = False) -> StationDataset:
    with open(path, "rb") as fh:
        return read_station_data(fh, text=text)


def to_bytes(ds: StationDataset, *, text: bool = False) -> bytes:
    buf = io.BytesIO()
    write_station_data(ds, buf, text=text)
    return buf.getvalue()


def from_bytes(data: bytes, *, text: bool = False) -> StationDataset:
    return read_station_data(io.BytesIO(data), text=text)
