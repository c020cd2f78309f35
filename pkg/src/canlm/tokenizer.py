"""Bidirectional conversion between decoded frames and token-id sequences.

Every time step serializes to a block: the ``<TS>`` marker followed by one
token per feature in schema order. Identifier slots carry ``<NEW_CAR>`` /
``<NEW_TRIP>`` on the first block where the vehicle or trip id differs from
the preceding context and ``<PAD>`` afterwards. A window of W frames therefore
serializes to W x (1 + feature_count) ids.

The hot encoding loop runs through ``canlm.kernels`` (compiled when
available); everything here is pure and safe to run concurrently across
windows.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from canlm import kernels
from canlm.calibration import CalibrationTable
from canlm.errors import HashMismatchError, SchemaError, StructureError
from canlm.schema import CONTINUOUS, ENUMERATED, SYMBOLIC, FeatureSpec, SignalSchema
from canlm.trips import (
    ERROR,
    ERRVAL,
    MISSING,
    MISSING_VALUE,
    OUTLIER,
    DecodedFrame,
    TripLog,
    frames_to_trip,
)
from canlm.vocab import NEW_CAR_ID, NEW_TRIP_ID, PAD_ID, TS_ID, Vocabulary

TOKEN_FILE_MAGIC = b"CLTK1\n"
TOKEN_FILE_VERSION = 1


@dataclass
class TokenSequence:
    """One serialized window with provenance."""

    ids: np.ndarray  # uint32, length = frames x block_length
    schema_hash: str
    vocab_hash: str
    vehicle_id: str
    trip_id: str
    start_time: float


@dataclass
class TokenizedTrip:
    """All full windows of one trip, row per window."""

    vehicle_id: str
    trip_id: str
    start_time: float
    frame_rate_hz: float
    schema_hash: str
    vocab_hash: str
    window_length: int
    window_starts: np.ndarray  # frame index of each window start
    ids: np.ndarray  # uint32 [n_windows, window_length]

    @property
    def n_windows(self) -> int:
        return self.ids.shape[0]

    def sequence(self, w: int) -> TokenSequence:
        return TokenSequence(
            ids=self.ids[w],
            schema_hash=self.schema_hash,
            vocab_hash=self.vocab_hash,
            vehicle_id=self.vehicle_id,
            trip_id=self.trip_id,
            start_time=self.start_time + float(self.window_starts[w]) / self.frame_rate_hz,
        )

    def sequences(self) -> list[TokenSequence]:
        return [self.sequence(w) for w in range(self.n_windows)]


@dataclass
class EncodingPlan:
    """Schema + calibration + vocabulary bound into flat kernel inputs."""

    schema: SignalSchema
    vocab: Vocabulary
    calib: CalibrationTable
    cont_names: list[str]
    cont_col: np.ndarray
    cont_static: np.ndarray
    cont_emp: np.ndarray
    cont_bins: np.ndarray
    cont_base: np.ndarray
    cont_sent: np.ndarray
    enum_names: list[str]
    enum_col: np.ndarray
    enum_nstates: np.ndarray
    enum_base: np.ndarray
    enum_sent: np.ndarray
    sym_cols: list[tuple[int, int]]  # (block column, identifier slot: 0 vehicle, 1 trip)

    @property
    def block_length(self) -> int:
        return self.schema.block_length


def build_plan(schema: SignalSchema, vocab: Vocabulary, calib: CalibrationTable) -> EncodingPlan:
    if vocab.schema_hash != schema.schema_hash:
        raise HashMismatchError("vocabulary was built for a different schema")
    if vocab.calibration_hash != calib.calibration_hash:
        raise HashMismatchError("vocabulary was built for a different calibration table")
    calib.check_schema(schema)

    cont_names, cont_col, cont_static, cont_emp, cont_bins, cont_base, cont_sent = [], [], [], [], [], [], []
    enum_names, enum_col, enum_nstates, enum_base, enum_sent = [], [], [], [], []
    sym_cols = []
    sym_slot = 0
    for spec in schema.features:
        col = 1 + spec.position
        if spec.kind == CONTINUOUS:
            fc = calib.per_feature[spec.name]
            ids = vocab.feature_ids[spec.name]
            cont_names.append(spec.name)
            cont_col.append(col)
            cont_static.append((spec.static_min, spec.static_max))
            cont_emp.append((fc.emp_min, fc.emp_max))
            cont_bins.append(fc.bin_count)
            cont_base.append(ids.base)
            cont_sent.append((ids.outlier, ids.error, ids.null))
        elif spec.kind == ENUMERATED:
            ids = vocab.feature_ids[spec.name]
            enum_names.append(spec.name)
            enum_col.append(col)
            enum_nstates.append(len(spec.states))
            enum_base.append(ids.base)
            enum_sent.append((ids.error, ids.null))
        else:
            sym_cols.append((col, sym_slot))
            sym_slot += 1
    return EncodingPlan(
        schema=schema,
        vocab=vocab,
        calib=calib,
        cont_names=cont_names,
        cont_col=np.asarray(cont_col, dtype=np.int32),
        cont_static=np.asarray(cont_static, dtype=np.float64).reshape(-1, 2),
        cont_emp=np.asarray(cont_emp, dtype=np.float64).reshape(-1, 2),
        cont_bins=np.asarray(cont_bins, dtype=np.int64),
        cont_base=np.asarray(cont_base, dtype=np.uint32),
        cont_sent=np.asarray(cont_sent, dtype=np.uint32).reshape(-1, 3),
        enum_names=enum_names,
        enum_col=np.asarray(enum_col, dtype=np.int32),
        enum_nstates=np.asarray(enum_nstates, dtype=np.int64),
        enum_base=np.asarray(enum_base, dtype=np.uint32),
        enum_sent=np.asarray(enum_sent, dtype=np.uint32).reshape(-1, 2),
        sym_cols=sym_cols,
    )


def encode_blocks(trip: TripLog, plan: EncodingPlan) -> np.ndarray:
    """Token-id block matrix [n_frames, block_length] for a whole trip.

    Symbolic identifier columns come out as ``<PAD>``; window assembly
    overlays the context meta-tokens.
    """
    n = trip.n_frames
    out = np.full((n, plan.block_length), PAD_ID, dtype=np.uint32)
    n_cont, n_enum = len(plan.cont_names), len(plan.enum_names)
    cont_vals = np.empty((n, n_cont), dtype=np.float64)
    cont_flags = np.empty((n, n_cont), dtype=np.uint8)
    for j, name in enumerate(plan.cont_names):
        cont_vals[:, j] = trip.cont[name]
        cont_flags[:, j] = trip.flags[name]
    enum_idx = np.empty((n, n_enum), dtype=np.int16)
    enum_flags = np.empty((n, n_enum), dtype=np.uint8)
    for j, name in enumerate(plan.enum_names):
        enum_idx[:, j] = trip.enum[name]
        enum_flags[:, j] = trip.flags[name]
    kernels.fill_token_ids(
        out,
        TS_ID,
        cont_vals,
        cont_flags,
        plan.cont_col,
        plan.cont_static,
        plan.cont_emp,
        plan.cont_bins,
        plan.cont_base,
        plan.cont_sent,
        enum_idx,
        enum_flags,
        plan.enum_col,
        plan.enum_nstates,
        plan.enum_base,
        plan.enum_sent,
    )
    return out


def _apply_context(blocks: np.ndarray, plan: EncodingPlan, trip: TripLog, prev_context) -> tuple:
    """Set identifier-slot meta-tokens on the first block of a context change."""
    meta = (NEW_CAR_ID, NEW_TRIP_ID)
    ids = (trip.vehicle_id, trip.trip_id)
    prev = (None, None) if prev_context is None else tuple(prev_context)
    for col, slot in plan.sym_cols:
        if prev[slot] != ids[slot]:
            blocks[0, col] = meta[slot]
    return ids


def tokenize_value(spec: FeatureSpec, raw, fc, vocab: Vocabulary) -> str:
    """Map one raw tagged value to its token (total via sentinels).

    ``raw`` is a number, a state name, the ``ERROR`` marker, or
    ``MISSING_VALUE``/``None``. Continuous features need their
    FeatureCalibration ``fc``.
    """
    ids = vocab.feature_ids.get(spec.name)
    if ids is None:
        raise SchemaError(f"feature {spec.name!r} has no value tokens (symbolic identifiers use meta-tokens)")
    if raw is ERROR:
        return vocab.token_of(ids.error)
    if raw is MISSING_VALUE or raw is None:
        return vocab.token_of(ids.null)
    if spec.kind == CONTINUOUS:
        x = float(raw)
        if np.isnan(x):
            return vocab.token_of(ids.null)
        if x < spec.static_min or x > spec.static_max:
            return vocab.token_of(ids.outlier)
        if fc.emp_max > fc.emp_min:
            u = min(max((x - fc.emp_min) / (fc.emp_max - fc.emp_min), 0.0), 1.0)
            b = min(int(u * fc.bin_count), fc.bin_count - 1)
        else:
            b = 0
        return vocab.token_of(ids.base + b)
    if spec.kind == ENUMERATED:
        if raw in spec.states:
            return vocab.token_of(ids.base + spec.states.index(raw))
        return vocab.token_of(ids.error)
    raise SchemaError(f"cannot tokenize value for feature kind {spec.kind!r}")


def tokenize_window(
    frames: list[DecodedFrame],
    prev_context,
    schema: SignalSchema,
    vocab: Vocabulary,
    calib: CalibrationTable,
) -> TokenSequence:
    """Serialize one window of decoded frames into token ids.

    ``prev_context`` is the (vehicle_id, trip_id) pair preceding this window,
    or None at the start of a stream.
    """
    expected = schema.frames_per_window
    if len(frames) != expected:
        raise StructureError(f"window needs exactly {expected} frames, got {len(frames)}")
    plan = build_plan(schema, vocab, calib)
    trip = frames_to_trip(frames, schema)  # validates ordering and spacing
    blocks = encode_blocks(trip, plan)
    _apply_context(blocks, plan, trip, prev_context)
    return TokenSequence(
        ids=blocks.reshape(-1),
        schema_hash=schema.schema_hash,
        vocab_hash=vocab.vocab_hash,
        vehicle_id=trip.vehicle_id,
        trip_id=trip.trip_id,
        start_time=trip.start_time,
    )


def tokenize_trip(
    trip: TripLog,
    schema: SignalSchema,
    vocab: Vocabulary,
    calib: CalibrationTable,
    prev_context=None,
    plan: EncodingPlan | None = None,
) -> TokenizedTrip:
    """Serialize every full window of a trip (trailing partial window dropped)."""
    if plan is None:
        plan = build_plan(schema, vocab, calib)
    w = schema.frames_per_window
    n_windows = trip.n_frames // w
    blocks = encode_blocks(trip, plan)
    _apply_context(blocks, plan, trip, prev_context)
    ids = blocks[: n_windows * w].reshape(n_windows, w * plan.block_length)
    return TokenizedTrip(
        vehicle_id=trip.vehicle_id,
        trip_id=trip.trip_id,
        start_time=trip.start_time,
        frame_rate_hz=trip.frame_rate_hz,
        schema_hash=schema.schema_hash,
        vocab_hash=vocab.vocab_hash,
        window_length=w * plan.block_length,
        window_starts=np.arange(n_windows, dtype=np.int64) * w,
        ids=np.ascontiguousarray(ids),
    )


def tokenize_corpus(trips, schema, vocab, calib) -> list[TokenizedTrip]:
    """Tokenize a trip collection, chaining identifier context per vehicle.

    Trips are ordered by (vehicle_id, trip_id); the first trip of each vehicle
    opens with ``<NEW_CAR>`` + ``<NEW_TRIP>``, later trips of the same vehicle
    with ``<NEW_TRIP>`` only.
    """
    plan = build_plan(schema, vocab, calib)
    out = []
    context = None
    for trip in sorted(trips, key=lambda t: t.key):
        out.append(tokenize_trip(trip, schema, vocab, calib, prev_context=context, plan=plan))
        context = trip.key
    return out


def bin_midpoint(fc, bin_index: int) -> float:
    """Representative value of a bin: emp_min + (bin + 0.5) * width."""
    width = (fc.emp_max - fc.emp_min) / fc.bin_count
    return fc.emp_min + (bin_index + 0.5) * width


def detokenize(
    seq: TokenSequence, schema: SignalSchema, vocab: Vocabulary, calib: CalibrationTable
) -> list[DecodedFrame]:
    """Approximate inverse of tokenization.

    Bins map to their midpoints, states map back exactly, sentinels map to
    their markers. Raises StructureError (with the offending flat position)
    on malformed sequences.
    """
    plan = build_plan(schema, vocab, calib)
    block = plan.block_length
    if seq.ids.ndim != 1 or seq.ids.size == 0 or seq.ids.size % block:
        raise StructureError(f"sequence length {seq.ids.size} is not a multiple of block length {block}")
    if seq.schema_hash != schema.schema_hash or seq.vocab_hash != vocab.vocab_hash:
        raise HashMismatchError("token sequence was produced under different artifacts")
    n_frames = seq.ids.size // block
    blocks = seq.ids.reshape(n_frames, block)
    step = 1.0 / schema.frame_rate_hz

    frames = []
    for i in range(n_frames):
        row = blocks[i]
        if row[0] != TS_ID:
            raise StructureError(f"position {i * block}: expected the timestamp marker at block start")
        values: dict[str, object] = {}
        for spec in schema.features:
            col = 1 + spec.position
            tok = int(row[col])
            pos = i * block + col
            if spec.kind == SYMBOLIC:
                if tok not in (PAD_ID, NEW_CAR_ID, NEW_TRIP_ID):
                    raise StructureError(f"position {pos}: invalid token in identifier slot")
                continue
            ids = vocab.feature_ids[spec.name]
            if ids.base <= tok < ids.base + ids.count:
                if spec.kind == CONTINUOUS:
                    values[spec.name] = bin_midpoint(calib.per_feature[spec.name], tok - ids.base)
                else:
                    values[spec.name] = spec.states[tok - ids.base]
            elif tok == ids.outlier:
                values[spec.name] = OUTLIER
            elif tok == ids.error:
                values[spec.name] = ERROR
            elif tok == ids.null:
                values[spec.name] = MISSING_VALUE
            else:
                raise StructureError(
                    f"position {pos}: token id {tok} does not belong to feature {spec.name!r}"
                )
        frames.append(
            DecodedFrame(
                timestamp=seq.start_time + i * step,
                vehicle_id=seq.vehicle_id,
                trip_id=seq.trip_id,
                values=values,
            )
        )
    return frames


# ---------------------------------------------------------------------------
# Token file format: magic, u32le header length, JSON header, u32le id payload.
# ---------------------------------------------------------------------------


def write_token_file(tt: TokenizedTrip, path) -> None:
    header = {
        "format_version": TOKEN_FILE_VERSION,
        "schema_hash": tt.schema_hash,
        "vocab_hash": tt.vocab_hash,
        "vehicle_id": tt.vehicle_id,
        "trip_id": tt.trip_id,
        "start_time": tt.start_time,
        "frame_rate_hz": tt.frame_rate_hz,
        "window_length": tt.window_length,
        "n_windows": int(tt.n_windows),
        "window_starts": [int(s) for s in tt.window_starts],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(TOKEN_FILE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(tt.ids, dtype="<u4").tobytes())


def read_token_file(path) -> TokenizedTrip:
    with open(path, "rb") as f:
        magic = f.read(len(TOKEN_FILE_MAGIC))
        if magic != TOKEN_FILE_MAGIC:
            raise StructureError(f"{path}: not a token file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != TOKEN_FILE_VERSION:
            raise StructureError(f"{path}: unsupported token file version")
        n, length = header["n_windows"], header["window_length"]
        payload = f.read(4 * n * length)
        if len(payload) != 4 * n * length:
            raise StructureError(f"{path}: truncated token payload")
        ids = np.frombuffer(payload, dtype="<u4").reshape(n, length).astype(np.uint32)
    return TokenizedTrip(
        vehicle_id=header["vehicle_id"],
        trip_id=header["trip_id"],
        start_time=float(header["start_time"]),
        frame_rate_hz=float(header["frame_rate_hz"]),
        schema_hash=header["schema_hash"],
        vocab_hash=header["vocab_hash"],
        window_length=length,
        window_starts=np.asarray(header["window_starts"], dtype=np.int64),
        ids=ids,
    )


def token_filename(vehicle_id: str, trip_id: str) -> str:
    return f"{vehicle_id}__{trip_id}.tok"


def dump_tokens_text(tt: TokenizedTrip, vocab: Vocabulary, path, block_length: int) -> None:
    """Human-readable dump: one block per line, blank line between windows."""
    with open(path, "w", encoding="utf-8") as f:
        for w in range(tt.n_windows):
            f.write(f"# window {w} start_frame {int(tt.window_starts[w])}\n")
            row = tt.ids[w].reshape(-1, block_length)
            for blk in row:
                f.write(" ".join(vocab.token_of(int(t)) for t in blk))
                f.write("\n")
            f.write("\n")
