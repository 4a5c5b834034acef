# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled marker flooding; same contract as ``_watershed_py.flood``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt
from libc.stdlib cimport free, malloc, realloc
from libc.stdint cimport int32_t, int64_t

cnp.import_array()

cdef double COST_SCALE = 4294967296.0
cdef int64_t INF = 0x7FFFFFFFFFFFFFFF


cdef struct Entry:
    int64_t cost
    int32_t label
    int64_t idx


cdef struct Heap:
    Entry* data
    Py_ssize_t size
    Py_ssize_t cap


cdef inline bint _less(Entry* a, Entry* b) noexcept nogil:
    if a.cost != b.cost:
        return a.cost < b.cost
    if a.label != b.label:
        return a.label < b.label
    return a.idx < b.idx


cdef int _push(Heap* h, int64_t cost, int32_t label, int64_t idx) noexcept nogil:
    cdef Py_ssize_t i, parent
    cdef Entry tmp
    cdef Entry* grown
    if h.size == h.cap:
        grown = <Entry*> realloc(h.data, 2 * h.cap * sizeof(Entry))
        if grown == NULL:
            return -1
        h.data = grown
        h.cap *= 2
    i = h.size
    h.size += 1
    h.data[i].cost = cost
    h.data[i].label = label
    h.data[i].idx = idx
    while i > 0:
        parent = (i - 1) >> 1
        if _less(&h.data[i], &h.data[parent]):
            tmp = h.data[i]
            h.data[i] = h.data[parent]
            h.data[parent] = tmp
            i = parent
        else:
            break
    return 0


cdef Entry _pop(Heap* h) noexcept nogil:
    cdef Entry top = h.data[0]
    cdef Entry tmp
    cdef Py_ssize_t i = 0, l, r, m
    h.size -= 1
    h.data[0] = h.data[h.size]
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < h.size and _less(&h.data[l], &h.data[m]):
            m = l
        if r < h.size and _less(&h.data[r], &h.data[m]):
            m = r
        if m == i:
            break
        tmp = h.data[i]
        h.data[i] = h.data[m]
        h.data[m] = tmp
        i = m
    return top


cdef inline int64_t _step(const double* a, const double* b, Py_ssize_t nch, double spatial) noexcept nogil:
    cdef double acc = 0.0, d
    cdef Py_ssize_t k
    for k in range(nch):
        d = a[k] - b[k]
        acc = acc + d * d
    return <int64_t> floor((sqrt(acc) + spatial) * COST_SCALE + 0.5)


def flood(image, markers, double step, int connectivity=4):
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2, mode="c"] mk = np.ascontiguousarray(
        np.asarray(markers, dtype=np.int64).reshape(-1, 2))
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], nch = img.shape[2]
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    dist_arr = np.full((h, w), INF, dtype=np.int64)
    label_arr = np.zeros((h, w), dtype=np.int32)
    done_arr = np.zeros((h, w), dtype=np.uint8)
    cdef int64_t[:, ::1] dist = dist_arr
    cdef int32_t[:, ::1] label = label_arr
    cdef unsigned char[:, ::1] done = done_arr
    cdef const double* px = <const double*> img.data
    cdef int dr[8]
    cdef int dc[8]
    cdef double dlen[8]
    cdef int ndir = connectivity
    dr[:] = [-1, 0, 0, 1, -1, -1, 1, 1]
    dc[:] = [0, -1, 1, 0, -1, 1, -1, 1]
    cdef double s2 = sqrt(2.0)
    dlen[:] = [1.0, 1.0, 1.0, 1.0, s2, s2, s2, s2]
    cdef double spatial[8]
    cdef Py_ssize_t k, i, r, c, rr, cc, nidx
    for k in range(8):
        spatial[k] = step * dlen[k]

    cdef Heap heap
    heap.cap = max(16, 4 * mk.shape[0])
    heap.size = 0
    heap.data = <Entry*> malloc(heap.cap * sizeof(Entry))
    if heap.data == NULL:
        raise MemoryError()
    cdef Entry e
    cdef int64_t nd
    cdef int err = 0
    try:
        for i in range(mk.shape[0]):
            r = mk[i, 0]
            c = mk[i, 1]
            if label[r, c] == 0:
                dist[r, c] = 0
                label[r, c] = <int32_t> (i + 1)
                if _push(&heap, 0, <int32_t> (i + 1), r * w + c) != 0:
                    raise MemoryError()
        with nogil:
            while heap.size > 0:
                e = _pop(&heap)
                r = e.idx // w
                c = e.idx - r * w
                if done[r, c]:
                    continue
                done[r, c] = 1
                for k in range(ndir):
                    rr = r + dr[k]
                    cc = c + dc[k]
                    if rr < 0 or rr >= h or cc < 0 or cc >= w or done[rr, cc]:
                        continue
                    nidx = rr * w + cc
                    nd = e.cost + _step(px + e.idx * nch, px + nidx * nch, nch, spatial[k])
                    if nd < dist[rr, cc] or (nd == dist[rr, cc] and e.label < label[rr, cc]):
                        dist[rr, cc] = nd
                        label[rr, cc] = e.label
                        if _push(&heap, nd, e.label, nidx) != 0:
                            err = 1
                            break
                if err:
                    break
        if err:
            raise MemoryError()
    finally:
        free(heap.data)
    return dist_arr, label_arr
