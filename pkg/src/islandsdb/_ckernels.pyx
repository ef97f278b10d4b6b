# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same results as islandsdb._kernels_py."""
import os
import threading
import time

import numpy as np
cimport numpy as cnp
from libc.math cimport pow
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free

cnp.import_array()

IMPLEMENTATION = "cython"


cdef extern from "<pthread.h>" nogil:
    ctypedef struct pthread_mutex_t:
        pass
    int pthread_mutex_init(pthread_mutex_t *m, void *attr)
    int pthread_mutex_lock(pthread_mutex_t *m)
    int pthread_mutex_unlock(pthread_mutex_t *m)
    int pthread_mutex_destroy(pthread_mutex_t *m)


def zipf_cdf(Py_ssize_t n, double s):
    if n < 1:
        raise ValueError("n must be >= 1")
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cdf = np.empty(n, dtype=np.float64)
    cdef double acc = 0.0
    cdef Py_ssize_t i
    # s = 1 is the common case; 1/x matches numpy's reciprocal fast path
    if s == 1.0:
        for i in range(n):
            acc += 1.0 / <double>(i + 1)
            cdf[i] = acc
    else:
        for i in range(n):
            acc += pow(<double>(i + 1), -s)
            cdf[i] = acc
    for i in range(n):
        cdf[i] /= acc
    cdf[n - 1] = 1.0
    return cdf


cdef inline Py_ssize_t _bisect_right(const double[:] cdf, double u) nogil:
    cdef Py_ssize_t lo = 0, hi = cdf.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cdf[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def zipf_rank(const double[:] cdf, double u):
    cdef Py_ssize_t r = _bisect_right(cdf, u)
    if r >= cdf.shape[0]:
        r = cdf.shape[0] - 1
    return r


def zipf_ranks(const double[:] cdf, us):
    cdef const double[:] uv = np.ascontiguousarray(us, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0], i, r, last = cdf.shape[0] - 1
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[:] ov = out
    with nogil:
        for i in range(n):
            r = _bisect_right(cdf, uv[i])
            ov[i] = r if r <= last else last
    return out


cdef inline uint64_t _xs(uint64_t x) nogil:
    x ^= x << 13
    x ^= x >> 7
    x ^= x << 17
    return x


def xorshift64(uint64_t x):
    return _xs(x)


def sim_counter_run(contenders, latency, long cs_ns, long think_ns,
                    long jitter_ns, long duration_ns, uint64_t seed):
    cdef long[:, :] latv = np.ascontiguousarray(latency, dtype=np.int_)
    cdef long[:] cores
    cdef Py_ssize_t c, k
    cdef uint64_t x
    cdef long t, n, cost, prev, nxt
    counts = []
    for c in range(len(contenders)):
        cores = np.asarray(contenders[c], dtype=np.int_)
        k = cores.shape[0]
        x = seed * <uint64_t>0x9E3779B97F4A7C15 + <uint64_t>(c + 1)
        if x == 0:
            x = 1
        t = 0
        n = 0
        prev = cores[0]
        with nogil:
            while True:
                x = _xs(x)
                if k > 1:
                    nxt = cores[(x >> 11) % <uint64_t>k]
                else:
                    nxt = prev
                x = _xs(x)
                cost = cs_ns + <long>((x >> 11) % <uint64_t>(2 * jitter_ns + 1)) + latv[prev, nxt]
                if nxt == prev:
                    cost += think_ns
                if t + cost > duration_ns:
                    break
                t += cost
                n += 1
                prev = nxt
        counts.append(n)
    return counts


cdef void _hammer(pthread_mutex_t *m, long *counter, volatile int *stop) nogil:
    cdef int i
    while not stop[0]:
        for i in range(64):
            pthread_mutex_lock(m)
            counter[0] += 1
            pthread_mutex_unlock(m)


def _thread_body(size_t m_addr, size_t c_addr, size_t stop_addr, core):
    if core is not None:
        try:
            os.sched_setaffinity(0, {core})
        except (AttributeError, OSError):
            pass
    with nogil:
        _hammer(<pthread_mutex_t *>m_addr, <long *>c_addr, <volatile int *>stop_addr)


def real_counter_run(counter_of, double seconds, cores=None):
    """GIL-free threads incrementing pthread-mutex-protected counters."""
    cdef Py_ssize_t n_threads = len(counter_of)
    cdef Py_ssize_t n_counters = (max(counter_of) + 1) if n_threads else 0
    if n_counters == 0:
        return []
    # one cache line per counter and per mutex
    cdef pthread_mutex_t *mutexes = <pthread_mutex_t *>malloc(n_counters * 64 * sizeof(char) * 2)
    cdef long *counters = <long *>malloc(n_counters * 64 * sizeof(char))
    cdef volatile int stop = 0
    cdef Py_ssize_t i, c
    if mutexes == NULL or counters == NULL:
        free(mutexes)
        free(counters)
        raise MemoryError()
    cdef char *mbase = <char *>mutexes
    cdef char *cbase = <char *>counters
    for i in range(n_counters):
        pthread_mutex_init(<pthread_mutex_t *>(mbase + i * 128), NULL)
        (<long *>(cbase + i * 64))[0] = 0

    cdef size_t stop_addr = <size_t>&stop
    args = []
    for i in range(n_threads):
        c = counter_of[i]
        args.append((<size_t>(mbase + c * 128), <size_t>(cbase + c * 64), stop_addr,
                     None if cores is None else cores[i]))

    threads = [threading.Thread(target=_thread_body, args=a, daemon=True)
               for a in args]
    for th in threads:
        th.start()
    time.sleep(max(seconds, 0.0))
    stop = 1
    for th in threads:
        th.join()
    out = [(<long *>(cbase + i * 64))[0] for i in range(n_counters)]
    for i in range(n_counters):
        pthread_mutex_destroy(<pthread_mutex_t *>(mbase + i * 128))
    free(mutexes)
    free(counters)
    return out
