import numpy as np
import pytest

from canlm.calibration import calibrate
from canlm.datagen import generate_corpus, inject_collisions
from canlm.schema import reference_schema
from canlm.vocab import build_vocabulary


@pytest.fixture(scope="session")
def ref_schema():
    return reference_schema()


@pytest.fixture(scope="session")
def small_assets(ref_schema):
    """A small but fully realistic corpus with calibration and vocabulary.

    Shared session-wide; treat as read-only.
    """
    corpus = generate_corpus(ref_schema, 12, 3, 200, seed=1234)
    corpus, labels = inject_collisions(corpus, ref_schema, 0.04, seed=1234)
    table = calibrate(corpus, ref_schema, n_vehicles=12, trips_per_vehicle=3, seed=5, quantile_clip=0.001)
    vocab = build_vocabulary(ref_schema, table)
    return {"schema": ref_schema, "corpus": corpus, "labels": labels, "calib": table, "vocab": vocab}
