# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled token encoding kernel.

Semantics must match ``_numpy_ref.fill_token_ids`` exactly; the fallback is
the reference for the cross-check tests.
"""

from libc.math cimport isnan


def fill_token_ids(
    unsigned int[:, ::1] out,
    unsigned int ts_id,
    double[:, ::1] cont_vals,
    unsigned char[:, ::1] cont_flags,
    int[::1] cont_col,
    double[:, ::1] cont_static,
    double[:, ::1] cont_emp,
    long long[::1] cont_bins,
    unsigned int[::1] cont_base,
    unsigned int[:, ::1] cont_sent,
    short[:, ::1] enum_idx,
    unsigned char[:, ::1] enum_flags,
    int[::1] enum_col,
    long long[::1] enum_nstates,
    unsigned int[::1] enum_base,
    unsigned int[:, ::1] enum_sent,
):
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t n_cont = cont_col.shape[0]
    cdef Py_ssize_t n_enum = enum_col.shape[0]
    cdef Py_ssize_t i, j
    cdef int c
    cdef double x, smin, smax, emin, emax, u
    cdef long long b, bins, n_states
    cdef unsigned char flag
    cdef short s
    cdef unsigned int tok

    for i in range(n):
        out[i, 0] = ts_id

    for j in range(n_cont):
        c = cont_col[j]
        smin = cont_static[j, 0]
        smax = cont_static[j, 1]
        emin = cont_emp[j, 0]
        emax = cont_emp[j, 1]
        bins = cont_bins[j]
        for i in range(n):
            flag = cont_flags[i, j]
            if flag == 1:
                tok = cont_sent[j, 1]
            elif flag == 2:
                tok = cont_sent[j, 2]
            else:
                x = cont_vals[i, j]
                if isnan(x):
                    tok = cont_sent[j, 2]
                elif x < smin or x > smax:
                    tok = cont_sent[j, 0]
                elif emax > emin:
                    u = (x - emin) / (emax - emin)
                    if u < 0.0:
                        u = 0.0
                    elif u > 1.0:
                        u = 1.0
                    b = <long long> (u * bins)
                    if b >= bins:
                        b = bins - 1
                    tok = cont_base[j] + <unsigned int> b
                else:
                    tok = cont_base[j]
            out[i, c] = tok

    for j in range(n_enum):
        c = enum_col[j]
        n_states = enum_nstates[j]
        for i in range(n):
            flag = enum_flags[i, j]
            if flag == 1:
                tok = enum_sent[j, 0]
            elif flag == 2:
                tok = enum_sent[j, 1]
            else:
                s = enum_idx[i, j]
                if s < 0 or s >= n_states:
                    tok = enum_sent[j, 0]
                else:
                    tok = enum_base[j] + <unsigned int> s
            out[i, c] = tok
