# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled engine loop of the batching simulator.

Mirrors ``_engine_py`` operation for operation (same splitmix64 stream, same
floating-point evaluation order) so both produce bit-identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _next(uint64_t* s) noexcept nogil:
    s[0] += <uint64_t>0x9E3779B97F4A7C15ULL
    cdef uint64_t z = s[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t* s) noexcept nogil:
    return <double>(_next(s) >> 11) * TWO_M53


cdef inline int64_t _randbelow(uint64_t* s, int64_t n) noexcept nogil:
    return <int64_t>(_uniform(s) * n)


cdef inline int64_t _accepted(uint64_t* s, double alpha, int64_t k) noexcept nogil:
    cdef int64_t j = 0
    while j < k:
        if _uniform(s) < alpha:
            j += 1
        else:
            break
    return j + 1


cdef double _coverage(uint64_t* s, int64_t active, int64_t total, int64_t t,
                      int64_t[::1] perm, cnp.int8_t[::1] touched) noexcept nogil:
    cdef int64_t i, j, r, tmp, e, distinct = 0
    if t <= 0:
        return 0.0
    for i in range(total):
        perm[i] = i
        touched[i] = 0
    for i in range(t):
        for j in range(active):
            r = j + _randbelow(s, total - j)
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
            e = perm[j]
            if touched[e] == 0:
                touched[e] = 1
                distinct += 1
        if distinct == total:
            break
    return <double>distinct / <double>total


def accept_counts(int64_t n, double alpha, int64_t k, uint64_t state):
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef int64_t i
    cdef uint64_t s = state
    for i in range(n):
        out[i] = _accepted(&s, alpha, k)
    return out, s


def coverage_samples(int64_t n, int64_t active, int64_t total, int64_t t, uint64_t state):
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef int64_t[::1] perm = np.empty(total, dtype=np.int64)
    cdef cnp.int8_t[::1] touched = np.empty(total, dtype=np.int8)
    cdef int64_t i
    cdef uint64_t s = state
    for i in range(n):
        out[i] = _coverage(&s, active, total, t, perm, touched)
    return out, s


def simulate(double[::1] arrivals, bint closed_loop, int64_t g, int64_t k, double alpha,
             double[::1] costs, double[::1] moe_costs, int64_t moe_active,
             int64_t moe_total, int64_t max_conc, uint64_t state):
    cdef int64_t n = arrivals.shape[0]
    cdef double s1p = costs[0], s2p = costs[1], s1v = costs[2]
    cdef double s2v = costs[3], s1d = costs[4], s2d = costs[5]
    cdef double s1vs = moe_costs[0], s2vs = moe_costs[1]
    cdef bint moe_on = moe_total > 0
    cdef int64_t per_req = k if k > 0 else 1

    cdef cnp.ndarray[double, ndim=1] completion_arr = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[int64_t, ndim=1] tokens_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] cycles_arr = np.zeros(n, dtype=np.int64)
    cdef double[::1] completion = completion_arr
    cdef int64_t[::1] tokens = tokens_arr
    cdef int64_t[::1] cycles = cycles_arr
    cdef int64_t[::1] active = np.empty(max(n, 1), dtype=np.int64)
    cdef cnp.int8_t[::1] decoding = np.zeros(max(n, 1), dtype=np.int8)
    cdef int64_t[::1] perm = np.empty(max(moe_total, 1), dtype=np.int64)
    cdef cnp.int8_t[::1] touched = np.empty(max(moe_total, 1), dtype=np.int8)

    cdef uint64_t s = state
    cdef double t = 0.0, dur, cov, B
    cdef int64_t next_admit = 0, n_active = 0, done = 0, iters = 0
    cdef int64_t n_prefill, n_decode, i, idx, kept, tok

    if closed_loop and n > 0:
        arrivals[0] = 0.0

    with nogil:
        while done < n:
            if n_active == 0 and arrivals[next_admit] > t:
                t = arrivals[next_admit]
            while next_admit < n and (max_conc == 0 or n_active < max_conc):
                if closed_loop and next_admit > done:
                    break
                if arrivals[next_admit] > t:
                    break
                active[n_active] = next_admit
                decoding[next_admit] = 0
                n_active += 1
                next_admit += 1

            B = <double>n_active
            n_prefill = 0
            for i in range(n_active):
                if decoding[active[i]] == 0:
                    n_prefill += 1
            n_decode = n_active - n_prefill

            dur = 0.0
            if n_prefill > 0:
                dur = dur + (s1p + B * s2p)
            if n_decode > 0:
                cov = 0.0
                if moe_on:
                    cov = _coverage(&s, moe_active, moe_total, n_decode * per_req, perm, touched)
                dur = dur + ((s1v + cov * s1vs) + B * (s2v + cov * s2vs))
                if k > 0:
                    dur = dur + k * (s1d + B * s2d)
            t = t + dur
            iters += 1

            kept = 0
            for i in range(n_active):
                idx = active[i]
                if decoding[idx] == 0:
                    decoding[idx] = 1
                    active[kept] = idx
                    kept += 1
                    continue
                if k > 0:
                    tok = _accepted(&s, alpha, k)
                else:
                    tok = 1
                tokens[idx] += tok
                cycles[idx] += 1
                if tokens[idx] >= g:
                    completion[idx] = t
                    done += 1
                    if closed_loop and idx + 1 < n:
                        arrivals[idx + 1] = t
                else:
                    active[kept] = idx
                    kept += 1
            n_active = kept

    return completion_arr, tokens_arr, cycles_arr, iters, s
