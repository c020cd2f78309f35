"""Pure-numpy token encoding kernel (fallback backend).

Must stay semantically identical to the compiled kernel in ``_ctokens.pyx``;
the test suite cross-checks both backends cell by cell.
"""

import numpy as np


def fill_token_ids(
    out,
    ts_id,
    cont_vals,
    cont_flags,
    cont_col,
    cont_static,
    cont_emp,
    cont_bins,
    cont_base,
    cont_sent,
    enum_idx,
    enum_flags,
    enum_col,
    enum_nstates,
    enum_base,
    enum_sent,
):
    """Fill the timestamp, continuous and enumerated columns of a token block matrix.

    ``out`` is uint32 [n_frames, block_len]; symbolic identifier columns are
    left untouched for the caller. Validity flags: 0 valid, 1 error, 2 missing.
    """
    out[:, 0] = ts_id

    for j in range(cont_col.shape[0]):
        x = cont_vals[:, j]
        flags = cont_flags[:, j]
        smin, smax = cont_static[j]
        emin, emax = cont_emp[j]
        bins = int(cont_bins[j])
        outlier_id, error_id, null_id = cont_sent[j]

        col = np.empty(out.shape[0], dtype=np.uint32)
        if emax > emin:
            u = np.clip((x - emin) / (emax - emin), 0.0, 1.0)
            b = (u * bins).astype(np.int64)
            np.minimum(b, bins - 1, out=b)
            col[:] = cont_base[j] + b.astype(np.uint32)
        else:
            col[:] = cont_base[j]
        with np.errstate(invalid="ignore"):
            col[(x < smin) | (x > smax)] = outlier_id
        col[np.isnan(x)] = null_id
        col[flags == 2] = null_id
        col[flags == 1] = error_id
        out[:, cont_col[j]] = col

    for j in range(enum_col.shape[0]):
        s = enum_idx[:, j].astype(np.int64)
        flags = enum_flags[:, j]
        n_states = int(enum_nstates[j])
        error_id, null_id = enum_sent[j]

        col = np.empty(out.shape[0], dtype=np.uint32)
        valid_state = (s >= 0) & (s < n_states)
        col[:] = error_id
        col[valid_state] = (enum_base[j] + s[valid_state]).astype(np.uint32)
        col[flags == 2] = null_id
        col[flags == 1] = error_id
        out[:, enum_col[j]] = col
