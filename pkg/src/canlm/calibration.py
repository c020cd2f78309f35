"""Per-feature quantization calibration.

For every continuous feature we estimate empirical min/max bounds (used for
[0,1] scaling), the trimmed mean absolute one-step difference ``delta``, and
the normalized temporal variation ``r = delta / (emp_max - emp_min)``. A
preset threshold ladder then maps ``r`` to a bin count: slowly varying
signals get fine bins, dynamic ones get coarse bins.

All quantiles are nearest-rank on the sorted sample, which reproduces exactly
across implementations (no interpolation ambiguity).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from canlm.errors import CalibrationError, InsufficientDataError, SchemaError
from canlm.hashing import digest
from canlm.schema import SignalSchema

CALIBRATION_FORMAT_VERSION = "1"

# (upper r bound, bin count); the final entry is the catch-all coarsest rung.
DEFAULT_LADDER: tuple[tuple[float, int], ...] = (
    (0.01, 256),
    (0.05, 128),
    (0.15, 64),
    (0.35, 32),
    (math.inf, 16),
)

DEFAULT_TRIM_FRACTION = 0.005


@dataclass(frozen=True)
class FeatureCalibration:
    feature: str
    emp_min: float
    emp_max: float
    delta: float
    r: float
    bin_count: int

    def __post_init__(self):
        if self.emp_min > self.emp_max:
            raise CalibrationError(f"{self.feature}: emp_min > emp_max")
        if self.delta < 0 or self.r < 0 or self.bin_count < 1:
            raise CalibrationError(f"{self.feature}: negative delta/r or bin_count < 1")


@dataclass(frozen=True)
class CalibrationTable:
    schema_hash: str
    thresholds: tuple[tuple[float, int], ...]
    trim_fraction: float
    per_feature: dict[str, FeatureCalibration]

    def __post_init__(self):
        validate_ladder(self.thresholds)
        if not 0 <= self.trim_fraction < 0.5:
            raise CalibrationError("trim_fraction must lie in [0, 0.5)")

    @property
    def calibration_hash(self) -> str:
        return digest(_table_dict(self))

    def check_schema(self, schema: SignalSchema) -> None:
        from canlm.errors import HashMismatchError

        if schema.schema_hash != self.schema_hash:
            raise HashMismatchError(
                f"calibration was built for schema {self.schema_hash[:12]}..., "
                f"got schema {schema.schema_hash[:12]}..."
            )


def validate_ladder(thresholds) -> None:
    if not thresholds:
        raise CalibrationError("threshold ladder must be non-empty")
    bounds = [b for b, _ in thresholds]
    bins = [c for _, c in thresholds]
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise CalibrationError("ladder r bounds must be strictly increasing")
    if any(c2 >= c1 for c1, c2 in zip(bins, bins[1:])):
        raise CalibrationError("ladder bin counts must be strictly decreasing")
    if any(c < 1 for c in bins):
        raise CalibrationError("ladder bin counts must be positive")


def nearest_rank_quantile(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile of an ascending-sorted array."""
    n = len(sorted_values)
    idx = max(0, math.ceil(q * n) - 1)
    return float(sorted_values[min(idx, n - 1)])


def estimate_empirical_bounds(
    samples: np.ndarray,
    quantile_clip: float = 0.0,
    static_min: float = -math.inf,
    static_max: float = math.inf,
    feature: str = "?",
) -> tuple[float, float]:
    """Empirical [min, max] scaling bounds from a valid-value stream.

    ``quantile_clip = 0`` yields the exact extremes; a positive clip returns
    the (clip, 1-clip) nearest-rank quantiles instead, excluding rare extreme
    values from the scaling range. The result is clamped into the feature's
    static sensor range.
    """
    if not 0 <= quantile_clip < 0.5:
        raise CalibrationError("quantile_clip must lie in [0, 0.5)")
    values = np.asarray(samples, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise InsufficientDataError(f"feature {feature!r}: no valid samples to estimate bounds")
    values.sort()
    lo = nearest_rank_quantile(values, quantile_clip)
    hi = nearest_rank_quantile(values, 1.0 - quantile_clip)
    lo = min(max(lo, static_min), static_max)
    hi = min(max(hi, static_min), static_max)
    return lo, hi


def temporal_variation(
    series: np.ndarray,
    trim_fraction: float = DEFAULT_TRIM_FRACTION,
    value_range: float | None = None,
) -> tuple[float, float]:
    """Trimmed mean absolute one-step difference and its range-normalized form.

    Sorts the absolute one-step differences, discards ``floor(trim * M)``
    values from each tail (M = number of differences) to suppress transient
    spikes, and averages the rest. ``value_range`` defaults to the series'
    own max - min; pass the empirical calibration range when the series was
    clipped to it. A constant series yields (0, 0).
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size < 2:
        raise InsufficientDataError("temporal variation needs at least 2 values")
    diffs = np.abs(np.diff(x))
    delta = trimmed_mean(diffs, trim_fraction)
    rng = float(np.max(x) - np.min(x)) if value_range is None else float(value_range)
    r = delta / rng if rng > 0 else 0.0
    return delta, r


def trimmed_mean(diffs: np.ndarray, trim_fraction: float) -> float:
    if not 0 <= trim_fraction < 0.5:
        raise CalibrationError("trim_fraction must lie in [0, 0.5)")
    m = diffs.size
    k = math.floor(trim_fraction * m)
    kept = np.sort(diffs)[k : m - k] if k else diffs
    return float(np.mean(kept))


def assign_bin_count(r: float, thresholds=DEFAULT_LADDER) -> int:
    """First ladder rung whose r bound covers ``r``; last rung is the catch-all."""
    validate_ladder(thresholds)
    for bound, bins in thresholds:
        if r <= bound:
            return bins
    return thresholds[-1][1]


def calibrate(
    trips,
    schema: SignalSchema,
    n_vehicles: int = 100,
    trips_per_vehicle: int = 15,
    seed: int = 0,
    quantile_clip: float = 0.0,
    trim_fraction: float = DEFAULT_TRIM_FRACTION,
    thresholds=DEFAULT_LADDER,
) -> CalibrationTable:
    """Build a CalibrationTable from a trip corpus.

    Samples ``n_vehicles`` vehicles and ``trips_per_vehicle`` trips per
    vehicle (all of them, with a warning, when fewer are available), orders
    each series by timestamp, and estimates bounds / temporal variation per
    continuous feature. Deterministic given the seed. One-step differences
    are taken within trips only, on valid values clipped to the empirical
    bounds, then pooled before trimming.
    """
    trips = list(trips)
    if not trips:
        raise CalibrationError("cannot calibrate from an empty trip collection")
    validate_ladder(thresholds)

    by_vehicle: dict[str, list] = {}
    for t in trips:
        by_vehicle.setdefault(t.vehicle_id, []).append(t)

    rng = np.random.default_rng(seed)
    vehicles = sorted(by_vehicle)
    if n_vehicles < len(vehicles):
        pick = rng.choice(len(vehicles), size=n_vehicles, replace=False)
        vehicles = [vehicles[i] for i in np.sort(pick)]
    elif n_vehicles > len(vehicles):
        warnings.warn(
            f"requested {n_vehicles} vehicles but corpus has {len(vehicles)}; using all",
            stacklevel=2,
        )

    sampled = []
    for v in vehicles:
        vtrips = sorted(by_vehicle[v], key=lambda t: t.trip_id)
        if trips_per_vehicle < len(vtrips):
            pick = rng.choice(len(vtrips), size=trips_per_vehicle, replace=False)
            vtrips = [vtrips[i] for i in np.sort(pick)]
        sampled.extend(vtrips)

    per_feature: dict[str, FeatureCalibration] = {}
    problems: list[str] = []
    for spec in schema.continuous_features():
        pooled = [t.valid_values(spec.name) for t in sampled]
        values = np.concatenate(pooled) if pooled else np.empty(0)
        try:
            emp_min, emp_max = estimate_empirical_bounds(
                values, quantile_clip, spec.static_min, spec.static_max, feature=spec.name
            )
        except InsufficientDataError as exc:
            problems.append(str(exc))
            continue
        diff_chunks = []
        for chunk in pooled:
            if chunk.size >= 2:
                clipped = np.clip(chunk, emp_min, emp_max)
                diff_chunks.append(np.abs(np.diff(clipped)))
        if not diff_chunks:
            problems.append(f"feature {spec.name!r}: no trip with 2+ valid values")
            continue
        diffs = np.concatenate(diff_chunks)
        delta = trimmed_mean(diffs, trim_fraction)
        if emp_max > emp_min:
            r = delta / (emp_max - emp_min)
            bins = assign_bin_count(r, thresholds)
        else:
            r, bins = 0.0, 1
        per_feature[spec.name] = FeatureCalibration(
            feature=spec.name, emp_min=emp_min, emp_max=emp_max, delta=delta, r=r, bin_count=bins
        )
    if problems:
        raise InsufficientDataError("calibration failed:\n  " + "\n  ".join(problems))

    return CalibrationTable(
        schema_hash=schema.schema_hash,
        thresholds=tuple((float(b), int(c)) for b, c in thresholds),
        trim_fraction=trim_fraction,
        per_feature=per_feature,
    )


# ---------------------------------------------------------------------------
# Serialization (canonical; byte-exact round trip)
# ---------------------------------------------------------------------------


def _table_dict(table: CalibrationTable) -> dict:
    return {
        "calibration_version": CALIBRATION_FORMAT_VERSION,
        "schema_hash": table.schema_hash,
        "trim_fraction": table.trim_fraction,
        "thresholds": [[None if math.isinf(b) else b, c] for b, c in table.thresholds],
        "features": [
            {
                "feature": fc.feature,
                "emp_min": fc.emp_min,
                "emp_max": fc.emp_max,
                "delta": fc.delta,
                "r": fc.r,
                "bin_count": fc.bin_count,
            }
            for fc in table.per_feature.values()
        ],
    }


def dumps_calibration(table: CalibrationTable) -> str:
    return json.dumps(_table_dict(table), indent=2, ensure_ascii=False) + "\n"


def loads_calibration(text: str) -> CalibrationTable:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"malformed calibration document: {exc}") from None
    if doc.get("calibration_version") != CALIBRATION_FORMAT_VERSION:
        raise CalibrationError("unsupported or missing calibration_version")
    thresholds = tuple((math.inf if b is None else float(b), int(c)) for b, c in doc["thresholds"])
    per_feature = {}
    for rec in doc["features"]:
        fc = FeatureCalibration(
            feature=rec["feature"],
            emp_min=float(rec["emp_min"]),
            emp_max=float(rec["emp_max"]),
            delta=float(rec["delta"]),
            r=float(rec["r"]),
            bin_count=int(rec["bin_count"]),
        )
        per_feature[fc.feature] = fc
    return CalibrationTable(
        schema_hash=doc["schema_hash"],
        thresholds=thresholds,
        trim_fraction=float(doc["trim_fraction"]),
        per_feature=per_feature,
    )


def load_calibration(path) -> CalibrationTable:
    with open(path, encoding="utf-8") as f:
        return loads_calibration(f.read())


def save_calibration(table: CalibrationTable, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_calibration(table))


def check_covers_schema(table: CalibrationTable, schema: SignalSchema) -> None:
    """Ensure the table covers every continuous feature, and nothing else."""
    want = {f.name for f in schema.continuous_features()}
    have = set(table.per_feature)
    if want != have:
        missing, extra = sorted(want - have), sorted(have - want)
        raise SchemaError(f"calibration coverage mismatch: missing={missing} extra={extra}")
