"""Unified token vocabulary built from a schema and its calibration table.

Id assignment is deterministic: special and meta tokens first, then features
in schema order (bins ascending / states in declared order, sentinels last
per feature). Symbolic identifier features contribute no tokens of their own;
their slots are filled with ``<NEW_CAR>`` / ``<NEW_TRIP>`` / ``<PAD>``.

Sentinels are per-feature by default (``speed_kmh:<OUTLIER>`` is a different
token from ``gear:<OUTLIER>``) so the model can separate failure modes per
signal; ``shared_sentinels=True`` collapses them into three global tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from canlm.calibration import CalibrationTable, check_covers_schema
from canlm.errors import SchemaError
from canlm.hashing import digest
from canlm.schema import CONTINUOUS, ENUMERATED, SignalSchema

PAD, MASK, CLS, TS = "<PAD>", "<MASK>", "<CLS>", "<TS>"
NEW_CAR, NEW_TRIP = "<NEW_CAR>", "<NEW_TRIP>"

SPECIAL_TOKENS = (PAD, MASK, CLS, TS)
META_TOKENS = (NEW_CAR, NEW_TRIP)

PAD_ID, MASK_ID, CLS_ID, TS_ID, NEW_CAR_ID, NEW_TRIP_ID = range(6)

SENTINEL_NAMES = ("<OUTLIER>", "<ERROR>", "<NULL>")


def bin_token(feature: str, index: int) -> str:
    return f"{feature}:bin:{index}"


def state_token(feature: str, state: str) -> str:
    return f"{feature}:st:{state}"


def sentinel_token(feature: str, sentinel: str) -> str:
    return f"{feature}:{sentinel}"


@dataclass(frozen=True)
class FeatureIds:
    """Id layout of one feature's tokens inside the vocabulary."""

    base: int  # first bin / first state id
    count: int  # bin_count or state count
    outlier: int
    error: int
    null: int


@dataclass
class Vocabulary:
    tokens: tuple[str, ...]
    schema_hash: str
    calibration_hash: str
    feature_ids: dict[str, FeatureIds]
    shared_sentinels: bool = False
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise SchemaError("vocabulary tokens are not unique")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def vocab_hash(self) -> str:
        return digest(
            {
                "schema_hash": self.schema_hash,
                "calibration_hash": self.calibration_hash,
                "tokens": list(self.tokens),
            }
        )

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def feature_of(self, token_id: int) -> str | None:
        """Owning feature name for bin/state/per-feature-sentinel ids, else None."""
        t = self.tokens[token_id]
        if t.startswith("<"):
            return None
        return t.split(":", 1)[0]

    def is_bin(self, token_id: int) -> bool:
        return ":bin:" in self.tokens[token_id]

    def special_ids(self) -> tuple[int, ...]:
        return (PAD_ID, MASK_ID, CLS_ID, TS_ID)

    def bin_ids_by_feature(self) -> dict[str, np.ndarray]:
        out = {}
        for name, ids in self.feature_ids.items():
            if self.is_bin(ids.base):
                out[name] = np.arange(ids.base, ids.base + ids.count)
        return out


def build_vocabulary(
    schema: SignalSchema, calib: CalibrationTable, shared_sentinels: bool = False
) -> Vocabulary:
    """Deterministically assign token ids for a schema + calibration pair."""
    calib.check_schema(schema)
    check_covers_schema(calib, schema)

    tokens: list[str] = list(SPECIAL_TOKENS) + list(META_TOKENS)
    shared_ids: tuple[int, int, int] | None = None
    if shared_sentinels:
        base = len(tokens)
        tokens.extend(SENTINEL_NAMES)
        shared_ids = (base, base + 1, base + 2)

    feature_ids: dict[str, FeatureIds] = {}
    for spec in schema.features:
        if spec.kind == CONTINUOUS:
            count = calib.per_feature[spec.name].bin_count
            base = len(tokens)
            tokens.extend(bin_token(spec.name, i) for i in range(count))
        elif spec.kind == ENUMERATED:
            count = len(spec.states)
            base = len(tokens)
            tokens.extend(state_token(spec.name, s) for s in spec.states)
        else:
            continue
        if shared_sentinels:
            out_id, err_id, null_id = shared_ids
        else:
            out_id = len(tokens)
            tokens.extend(sentinel_token(spec.name, s) for s in SENTINEL_NAMES)
            err_id, null_id = out_id + 1, out_id + 2
        feature_ids[spec.name] = FeatureIds(base=base, count=count, outlier=out_id, error=err_id, null=null_id)

    return Vocabulary(
        tokens=tuple(tokens),
        schema_hash=schema.schema_hash,
        calibration_hash=calib.calibration_hash,
        feature_ids=feature_ids,
        shared_sentinels=shared_sentinels,
    )


def expected_size(schema: SignalSchema, calib: CalibrationTable, shared_sentinels: bool = False) -> int:
    """Closed-form vocabulary size; cross-checked against the built vocabulary."""
    n = len(SPECIAL_TOKENS) + len(META_TOKENS)
    if shared_sentinels:
        n += 3
    for spec in schema.continuous_features():
        n += calib.per_feature[spec.name].bin_count + (0 if shared_sentinels else 3)
    for spec in schema.enumerated_features():
        n += len(spec.states) + (0 if shared_sentinels else 3)
    return n
