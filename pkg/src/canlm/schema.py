"""Signal schema: the ordered declaration of decoded CAN features.

Everything downstream (calibration, vocabulary, tokenization, generation) is
driven by this declaration. A schema is immutable after construction and safe
to share across threads.

Serialization is canonical: ``dumps_schema(loads_schema(text)) == text`` for
any text produced by ``dumps_schema``, so schema files round-trip byte-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

from canlm.errors import SchemaError
from canlm.hashing import digest

SCHEMA_FORMAT_VERSION = "1"

CONTINUOUS = "continuous"
ENUMERATED = "enumerated"
SYMBOLIC = "symbolic"

_KINDS = (CONTINUOUS, ENUMERATED, SYMBOLIC)


@dataclass(frozen=True)
class FeatureSpec:
    """One decoded CAN feature.

    ``static_min``/``static_max`` are the sensor's hard range limits and apply
    to continuous features only; values outside them tokenize to the outlier
    sentinel. ``states`` is the enumeration for enumerated features. Symbolic
    identifier features carry no value vocabulary of their own; their slots are
    filled with context meta-tokens.
    """

    name: str
    kind: str
    position: int
    unit: str = ""
    static_min: float | None = None
    static_max: float | None = None
    states: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind tag {self.kind!r}")
        if self.kind == CONTINUOUS:
            if self.static_min is None or self.static_max is None:
                raise SchemaError(f"feature {self.name!r}: continuous features need static_min/static_max")
            if not self.static_min < self.static_max:
                raise SchemaError(
                    f"feature {self.name!r}: static_min ({self.static_min}) must be < "
                    f"static_max ({self.static_max})"
                )
        if self.kind == ENUMERATED:
            if not self.states:
                raise SchemaError(f"feature {self.name!r}: enumerated features need a non-empty state list")
            if len(set(self.states)) != len(self.states):
                raise SchemaError(f"feature {self.name!r}: duplicate enumeration states")
        if self.kind != CONTINUOUS and (self.static_min is not None or self.static_max is not None):
            raise SchemaError(f"feature {self.name!r}: static range only applies to continuous features")
        if self.kind != ENUMERATED and self.states:
            raise SchemaError(f"feature {self.name!r}: states only apply to enumerated features")


@dataclass(frozen=True)
class SignalSchema:
    """Ordered feature declaration plus framing parameters."""

    features: tuple[FeatureSpec, ...]
    frame_rate_hz: float
    window_seconds: int
    schema_version: str = SCHEMA_FORMAT_VERSION

    def __post_init__(self):
        if self.frame_rate_hz <= 0:
            raise SchemaError("frame_rate_hz must be positive")
        if self.window_seconds <= 0 or int(self.window_seconds) != self.window_seconds:
            raise SchemaError("window_seconds must be a positive integer")
        names = [f.name for f in self.features]
        seen = set()
        for i, n in enumerate(names):
            if n in seen:
                raise SchemaError(f"duplicate feature name {n!r} (feature #{i})")
            seen.add(n)
        positions = sorted(f.position for f in self.features)
        if positions != list(range(len(self.features))):
            raise SchemaError("feature positions must form a contiguous 0-based permutation")
        ordered = sorted(self.features, key=lambda f: f.position)
        object.__setattr__(self, "features", tuple(ordered))

    @property
    def feature_count(self) -> int:
        return len(self.features)

    @property
    def block_length(self) -> int:
        """Tokens per time step: the leading timestamp marker plus one per feature."""
        return 1 + len(self.features)

    @property
    def frames_per_window(self) -> int:
        n = self.window_seconds * self.frame_rate_hz
        if abs(n - round(n)) > 1e-9:
            raise SchemaError("window_seconds x frame_rate_hz must be an integer frame count")
        return int(round(n))

    @property
    def window_token_length(self) -> int:
        return self.frames_per_window * self.block_length

    @cached_property
    def by_name(self) -> dict[str, FeatureSpec]:
        return {f.name: f for f in self.features}

    def continuous_features(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == CONTINUOUS)

    def enumerated_features(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == ENUMERATED)

    def symbolic_features(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == SYMBOLIC)

    @cached_property
    def schema_hash(self) -> str:
        return digest(_schema_dict(self))


def _feature_dict(f: FeatureSpec) -> dict:
    d = {"name": f.name, "kind": f.kind, "unit": f.unit}
    if f.kind == CONTINUOUS:
        d["static_min"] = f.static_min
        d["static_max"] = f.static_max
    if f.kind == ENUMERATED:
        d["states"] = list(f.states)
    return d


def _schema_dict(schema: SignalSchema) -> dict:
    return {
        "schema_version": schema.schema_version,
        "frame_rate_hz": schema.frame_rate_hz,
        "window_seconds": schema.window_seconds,
        "features": [_feature_dict(f) for f in schema.features],
    }


def dumps_schema(schema: SignalSchema) -> str:
    """Canonical schema file text (feature order = declaration order)."""
    return json.dumps(_schema_dict(schema), indent=2, ensure_ascii=False) + "\n"


def loads_schema(text: str) -> SignalSchema:
    """Parse and validate a schema document. See ``load_schema`` for errors."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed schema document: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("schema document must be a JSON object")
    if "schema_version" not in doc:
        raise SchemaError("schema document missing schema_version")
    version = str(doc["schema_version"])
    if version != SCHEMA_FORMAT_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}")
    try:
        raw_features = doc["features"]
        rate = doc["frame_rate_hz"]
        window = doc["window_seconds"]
    except KeyError as exc:
        raise SchemaError(f"schema document missing field {exc}") from None
    features = []
    for i, rf in enumerate(raw_features):
        name = rf.get("name", f"<feature #{i}>")
        kind = rf.get("kind", "")
        try:
            features.append(
                FeatureSpec(
                    name=name,
                    kind=kind,
                    position=i,
                    unit=rf.get("unit", ""),
                    static_min=rf.get("static_min"),
                    static_max=rf.get("static_max"),
                    states=tuple(rf.get("states", ())),
                )
            )
        except SchemaError as exc:
            raise SchemaError(f"feature #{i}: {exc}") from None
    return SignalSchema(features=tuple(features), frame_rate_hz=rate, window_seconds=window, schema_version=version)


def load_schema(path) -> SignalSchema:
    """Load a schema file (UTF-8 JSON; see repository docs for the format)."""
    with open(path, encoding="utf-8") as f:
        return loads_schema(f.read())


def save_schema(schema: SignalSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_schema(schema))


# ---------------------------------------------------------------------------
# Reference schema: 44 features over four signal groups (vehicle dynamics,
# driver behavior, safety indicators, vehicle state & context). The two
# symbolic identifier slots count among the 44, so a 10 s window at 1 Hz
# serializes to 10 x (1 + 44) = 450 tokens.
# ---------------------------------------------------------------------------

_C = CONTINUOUS
_E = ENUMERATED

_REFERENCE_FEATURES = (
    # identifiers / context boundaries
    ("vehicle_id", SYMBOLIC, "", None, None, ()),
    ("trip_id", SYMBOLIC, "", None, None, ()),
    # vehicle dynamics
    ("speed_kmh", _C, "km/h", 0.0, 250.0, ()),
    ("wheel_speed_front_kmh", _C, "km/h", 0.0, 250.0, ()),
    ("wheel_speed_rear_kmh", _C, "km/h", 0.0, 250.0, ()),
    ("engine_rpm", _C, "rpm", 0.0, 8000.0, ()),
    ("engine_load_pct", _C, "%", 0.0, 100.0, ()),
    ("fuel_rate_lph", _C, "L/h", 0.0, 60.0, ()),
    ("longitudinal_accel_ms2", _C, "m/s^2", -20.0, 20.0, ()),
    ("lateral_accel_ms2", _C, "m/s^2", -20.0, 20.0, ()),
    ("vertical_accel_ms2", _C, "m/s^2", -20.0, 20.0, ()),
    ("yaw_rate_dps", _C, "deg/s", -120.0, 120.0, ()),
    ("pitch_rate_dps", _C, "deg/s", -60.0, 60.0, ()),
    ("roll_rate_dps", _C, "deg/s", -60.0, 60.0, ()),
    # driver behavior
    ("throttle_pct", _C, "%", 0.0, 100.0, ()),
    ("brake_pressure_bar", _C, "bar", 0.0, 200.0, ()),
    ("steering_angle_deg", _C, "deg", -540.0, 540.0, ()),
    ("steering_rate_dps", _C, "deg/s", -720.0, 720.0, ()),
    ("gear", _E, "", None, None, ("P", "R", "N", "D")),
    ("turn_signal", _E, "", None, None, ("off", "left", "right")),
    ("cruise_control", _E, "", None, None, ("off", "standby", "active")),
    ("wiper_state", _E, "", None, None, ("off", "intermittent", "low", "high")),
    ("headlight_state", _E, "", None, None, ("off", "drl", "low_beam", "high_beam")),
    ("horn_active", _E, "", None, None, ("off", "on")),
    ("accel_pedal_switch", _E, "", None, None, ("released", "pressed")),
    ("brake_pedal_switch", _E, "", None, None, ("released", "pressed")),
    # safety indicators
    ("following_distance_m", _C, "m", 0.0, 200.0, ()),
    ("time_to_collision_s", _C, "s", 0.0, 60.0, ()),
    ("impact_severity_g", _C, "g", 0.0, 50.0, ()),
    ("collision_warning", _E, "", None, None, ("none", "warning", "critical")),
    ("abs_active", _E, "", None, None, ("inactive", "active")),
    ("traction_control_active", _E, "", None, None, ("inactive", "active")),
    ("stability_control_active", _E, "", None, None, ("inactive", "active")),
    ("airbag_deployed", _E, "", None, None, ("no", "yes")),
    ("seatbelt_driver", _E, "", None, None, ("unbuckled", "buckled")),
    ("seatbelt_passenger", _E, "", None, None, ("unbuckled", "buckled")),
    # vehicle state & context
    ("battery_voltage_v", _C, "V", 8.0, 16.0, ()),
    ("coolant_temp_c", _C, "degC", -40.0, 150.0, ()),
    ("ambient_temp_c", _C, "degC", -40.0, 60.0, ()),
    ("fuel_level_pct", _C, "%", 0.0, 100.0, ()),
    ("door_driver", _E, "", None, None, ("closed", "open")),
    ("door_passenger", _E, "", None, None, ("closed", "open")),
    ("occupancy_count", _E, "", None, None, ("0", "1", "2", "3", "4", "5")),
    ("parking_brake", _E, "", None, None, ("released", "engaged")),
)


def reference_schema(frame_rate_hz: float = 1.0, window_seconds: int = 10) -> SignalSchema:
    """The bundled 44-feature schema used by the synthetic generator.

    Contains 23 continuous, 19 enumerated and 2 symbolic identifier features;
    at the default 1 Hz / 10 s framing a window serializes to 450 tokens.
    """
    features = tuple(
        FeatureSpec(name=n, kind=k, position=i, unit=u, static_min=lo, static_max=hi, states=st)
        for i, (n, k, u, lo, hi, st) in enumerate(_REFERENCE_FEATURES)
    )
    return SignalSchema(features=features, frame_rate_hz=frame_rate_hz, window_seconds=window_seconds)
