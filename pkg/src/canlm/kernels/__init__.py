"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled Cython extension is selected at import when available; set
``CANLM_PURE=1`` to force the numpy fallback. ``benchmarks/bench_tokenize.py``
compares the two backends on the reference schema.
"""

import os

from canlm.kernels import _numpy_ref

BACKEND = "python"
fill_token_ids = _numpy_ref.fill_token_ids

if os.environ.get("CANLM_PURE", "") != "1":
    try:
        from canlm.kernels import _ctokens

        fill_token_ids = _ctokens.fill_token_ids
        BACKEND = "compiled"
    except ImportError:
        pass


def backend_name() -> str:
    return BACKEND
