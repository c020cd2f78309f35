"""Decoded trip logs: in-memory representation and the on-disk trip format.

A trip file is newline-delimited text: a header row binding columns to schema
features, then one decoded frame per line. Continuous cells hold numbers,
enumerated cells hold state names, ``!ERR`` marks a device-reported invalid
reading and an empty cell marks a missing value.

In memory a trip is stored column-wise for speed; ``frames()`` exposes the
row-oriented view used by frame-level APIs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from canlm.errors import SchemaError, StructureError
from canlm.schema import CONTINUOUS, ENUMERATED, SYMBOLIC, SignalSchema

ERROR_MARKER_TEXT = "!ERR"

# per-cell validity codes
VALID = 0
ERRVAL = 1
MISSING = 2


class Marker:
    """Singleton tag for non-numeric cell contents."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return f"<{self.name}>"


ERROR = Marker("ERROR")
MISSING_VALUE = Marker("MISSING")
OUTLIER = Marker("OUTLIER")  # produced by detokenization only


@dataclass
class DecodedFrame:
    """One decoded time step. ``values`` covers every non-identifier feature."""

    timestamp: float
    vehicle_id: str
    trip_id: str
    values: dict[str, object]


@dataclass
class TripLog:
    """Column-oriented decoded trip at the schema frame rate.

    ``cont`` maps continuous feature name -> float64 array (undefined where the
    flag is not VALID); ``enum`` maps enumerated feature name -> int16 state
    index array; ``flags`` maps every non-identifier feature -> uint8 validity
    codes. Timestamps are ``start_time + k / frame_rate_hz``.
    """

    vehicle_id: str
    trip_id: str
    start_time: float
    frame_rate_hz: float
    n_frames: int
    cont: dict[str, np.ndarray] = field(default_factory=dict)
    enum: dict[str, np.ndarray] = field(default_factory=dict)
    flags: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str]:
        return (self.vehicle_id, self.trip_id)

    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_frames) / self.frame_rate_hz

    def valid_values(self, feature: str) -> np.ndarray:
        """Time-ordered valid numeric values of a continuous feature."""
        return self.cont[feature][self.flags[feature] == VALID]

    def frames(self, schema: SignalSchema, start: int = 0, count: int | None = None):
        """Row view: a list of DecodedFrames for ``[start, start+count)``."""
        stop = self.n_frames if count is None else start + count
        if not 0 <= start <= stop <= self.n_frames:
            raise StructureError(f"frame range [{start}, {stop}) outside trip of {self.n_frames} frames")
        ts = self.timestamps()
        out = []
        for i in range(start, stop):
            values: dict[str, object] = {}
            for spec in schema.features:
                if spec.kind == SYMBOLIC:
                    continue
                flag = self.flags[spec.name][i]
                if flag == ERRVAL:
                    values[spec.name] = ERROR
                elif flag == MISSING:
                    values[spec.name] = MISSING_VALUE
                elif spec.kind == CONTINUOUS:
                    values[spec.name] = float(self.cont[spec.name][i])
                else:
                    values[spec.name] = spec.states[self.enum[spec.name][i]]
            out.append(DecodedFrame(float(ts[i]), self.vehicle_id, self.trip_id, values))
        return out


def empty_trip(schema: SignalSchema, vehicle_id: str, trip_id: str, start_time: float, n_frames: int) -> TripLog:
    trip = TripLog(
        vehicle_id=vehicle_id,
        trip_id=trip_id,
        start_time=start_time,
        frame_rate_hz=schema.frame_rate_hz,
        n_frames=n_frames,
    )
    for spec in schema.features:
        if spec.kind == CONTINUOUS:
            trip.cont[spec.name] = np.zeros(n_frames)
            trip.flags[spec.name] = np.zeros(n_frames, dtype=np.uint8)
        elif spec.kind == ENUMERATED:
            trip.enum[spec.name] = np.zeros(n_frames, dtype=np.int16)
            trip.flags[spec.name] = np.zeros(n_frames, dtype=np.uint8)
    return trip


def frames_to_trip(frames: list[DecodedFrame], schema: SignalSchema) -> TripLog:
    """Columnarize a list of frames (all from one vehicle/trip, time-ordered)."""
    if not frames:
        raise StructureError("cannot columnarize an empty frame list")
    first = frames[0]
    trip = empty_trip(schema, first.vehicle_id, first.trip_id, first.timestamp, len(frames))
    step = 1.0 / schema.frame_rate_hz
    for i, fr in enumerate(frames):
        if fr.vehicle_id != first.vehicle_id or fr.trip_id != first.trip_id:
            raise StructureError(f"frame {i}: mixed vehicle/trip identifiers within one window")
        expected_ts = first.timestamp + i * step
        if abs(fr.timestamp - expected_ts) > 1e-6:
            raise StructureError(
                f"frame {i}: timestamp {fr.timestamp} not at the schema frame rate "
                f"(expected {expected_ts})"
            )
        for spec in schema.features:
            if spec.kind == SYMBOLIC:
                continue
            if spec.name not in fr.values:
                raise StructureError(f"frame {i}: missing value for feature {spec.name!r}")
            v = fr.values[spec.name]
            if v is ERROR:
                trip.flags[spec.name][i] = ERRVAL
            elif v is MISSING_VALUE or v is None:
                trip.flags[spec.name][i] = MISSING
            elif spec.kind == CONTINUOUS:
                trip.cont[spec.name][i] = float(v)
            else:
                try:
                    trip.enum[spec.name][i] = spec.states.index(v)
                except ValueError:
                    # unknown state names survive columnarization as error cells
                    trip.flags[spec.name][i] = ERRVAL
    return trip


# ---------------------------------------------------------------------------
# Trip file format
# ---------------------------------------------------------------------------


def trip_filename(vehicle_id: str, trip_id: str) -> str:
    return f"{vehicle_id}__{trip_id}.csv"


def identifier_features(schema: SignalSchema):
    """The (vehicle, trip) identifier pair; trip files require exactly two."""
    symbolic = schema.symbolic_features()
    if len(symbolic) != 2:
        raise SchemaError(
            "trip files require a schema with exactly two identifier features "
            f"(vehicle, trip); this schema has {len(symbolic)}"
        )
    return symbolic


def write_trip(trip: TripLog, schema: SignalSchema, path) -> None:
    vehicle_feat, _ = identifier_features(schema)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        header = ["timestamp"] + [spec.name for spec in schema.features]
        w.writerow(header)
        ts = trip.timestamps()
        columns = []
        for spec in schema.features:
            if spec.kind == SYMBOLIC:
                columns.append(None)
                continue
            flags = trip.flags[spec.name]
            if spec.kind == CONTINUOUS:
                vals = trip.cont[spec.name]
                col = [repr(float(v)) for v in vals]
            else:
                idx = trip.enum[spec.name]
                col = [spec.states[j] for j in idx]
            col = [
                ERROR_MARKER_TEXT if flag == ERRVAL else ("" if flag == MISSING else c)
                for c, flag in zip(col, flags)
            ]
            columns.append(col)
        for i in range(trip.n_frames):
            row = [repr(float(ts[i]))]
            for spec, col in zip(schema.features, columns):
                if col is None:
                    row.append(trip.vehicle_id if spec.name == vehicle_feat.name else trip.trip_id)
                else:
                    row.append(col[i])
            w.writerow(row)


def read_trip(path, schema: SignalSchema) -> TripLog:
    with open(path, encoding="utf-8", newline="") as f:
        return _read_trip_stream(f, schema, str(path))


def loads_trip(text: str, schema: SignalSchema, name: str = "<string>") -> TripLog:
    return _read_trip_stream(io.StringIO(text), schema, name)


def _read_trip_stream(stream, schema: SignalSchema, name: str) -> TripLog:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise StructureError(f"{name}: empty trip file") from None
    want = ["timestamp"] + [spec.name for spec in schema.features]
    if header != want:
        raise SchemaError(f"{name}: header does not bind columns to the schema feature order")
    rows = list(reader)
    if len(rows) < 2:
        raise StructureError(f"{name}: a trip needs at least 2 frames")

    vehicle_feat, trip_feat = identifier_features(schema)
    col_of = {spec.name: 1 + i for i, spec in enumerate(schema.features)}
    vehicle_id = rows[0][col_of[vehicle_feat.name]]
    trip_id = rows[0][col_of[trip_feat.name]]
    start_time = float(rows[0][0])
    trip = empty_trip(schema, vehicle_id, trip_id, start_time, len(rows))

    step = 1.0 / schema.frame_rate_hz
    for i, row in enumerate(rows):
        if len(row) != len(want):
            raise StructureError(f"{name}: line {i + 2}: expected {len(want)} cells, got {len(row)}")
        ts = float(row[0])
        if abs(ts - (start_time + i * step)) > 1e-6:
            raise StructureError(f"{name}: line {i + 2}: timestamps must increase by 1/frame_rate_hz")
    for spec in schema.features:
        c = col_of[spec.name]
        if spec.kind == SYMBOLIC:
            continue
        cells = [row[c] for row in rows]
        flags = trip.flags[spec.name]
        for i, cell in enumerate(cells):
            if cell == ERROR_MARKER_TEXT:
                flags[i] = ERRVAL
            elif cell == "":
                flags[i] = MISSING
            elif spec.kind == CONTINUOUS:
                trip.cont[spec.name][i] = float(cell)
            else:
                try:
                    trip.enum[spec.name][i] = spec.states.index(cell)
                except ValueError:
                    raise SchemaError(
                        f"{name}: line {i + 2}: unknown state {cell!r} for feature {spec.name!r}"
                    ) from None
    return trip


def write_corpus(trips, schema: SignalSchema, directory) -> list[str]:
    """Write one trip file per trip; returns the file names written."""
    import os

    os.makedirs(directory, exist_ok=True)
    names = []
    for trip in trips:
        fname = trip_filename(trip.vehicle_id, trip.trip_id)
        write_trip(trip, schema, os.path.join(directory, fname))
        names.append(fname)
    return names


def read_corpus(directory, schema: SignalSchema) -> list[TripLog]:
    """Read every ``*.csv`` trip file in a directory, sorted by file name."""
    import os

    names = sorted(n for n in os.listdir(directory) if n.endswith(".csv"))
    if not names:
        raise StructureError(f"no trip files found in {directory}")
    return [read_trip(os.path.join(directory, n), schema) for n in names]
