# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels: event heap, byte checksum, range lookup.

Behaviour is identical to :mod:`passvp._pyspeedups`.
"""

from cpython.mem cimport PyMem_Malloc, PyMem_Realloc, PyMem_Free
from cpython.ref cimport PyObject, Py_INCREF, Py_DECREF
from libc.stdint cimport uint64_t, int64_t, uint32_t

IMPLEMENTATION = "cython"


cdef struct _Entry:
    uint64_t time
    uint64_t seq
    PyObject* item


cdef inline bint _less(_Entry* a, _Entry* b) nogil:
    if a.time != b.time:
        return a.time < b.time
    return a.seq < b.seq


cdef class EventQueue:
    cdef _Entry* _heap
    cdef Py_ssize_t _len
    cdef Py_ssize_t _cap
    cdef uint64_t _seq

    def __cinit__(self):
        self._cap = 64
        self._len = 0
        self._seq = 0
        self._heap = <_Entry*> PyMem_Malloc(self._cap * sizeof(_Entry))
        if self._heap == NULL:
            raise MemoryError()

    def __dealloc__(self):
        cdef Py_ssize_t i
        if self._heap != NULL:
            for i in range(self._len):
                Py_DECREF(<object> self._heap[i].item)
            PyMem_Free(self._heap)
            self._heap = NULL

    cdef void _grow(self) except *:
        cdef Py_ssize_t cap = self._cap * 2
        cdef _Entry* mem = <_Entry*> PyMem_Realloc(self._heap, cap * sizeof(_Entry))
        if mem == NULL:
            raise MemoryError()
        self._heap = mem
        self._cap = cap

    def push(self, time, item):
        if time < 0:
            raise ValueError("event time must be non-negative")
        cdef uint64_t t = time
        if self._len == self._cap:
            self._grow()
        cdef Py_ssize_t pos = self._len
        cdef Py_ssize_t parent
        cdef _Entry new
        new.time = t
        new.seq = self._seq
        new.item = <PyObject*> item
        Py_INCREF(item)
        self._seq += 1
        self._len += 1
        while pos > 0:
            parent = (pos - 1) >> 1
            if _less(&new, &self._heap[parent]):
                self._heap[pos] = self._heap[parent]
                pos = parent
            else:
                break
        self._heap[pos] = new
        return new.seq

    def pop(self):
        if self._len == 0:
            raise IndexError("pop from empty event queue")
        cdef _Entry top = self._heap[0]
        cdef _Entry last
        cdef Py_ssize_t pos = 0
        cdef Py_ssize_t child
        self._len -= 1
        if self._len > 0:
            last = self._heap[self._len]
            while True:
                child = 2 * pos + 1
                if child >= self._len:
                    break
                if child + 1 < self._len and _less(&self._heap[child + 1], &self._heap[child]):
                    child += 1
                if _less(&self._heap[child], &last):
                    self._heap[pos] = self._heap[child]
                    pos = child
                else:
                    break
            self._heap[pos] = last
        item = <object> top.item
        Py_DECREF(item)
        return top.time, item

    def peek_time(self):
        if self._len == 0:
            return None
        return self._heap[0].time

    def clear(self):
        cdef Py_ssize_t i
        for i in range(self._len):
            Py_DECREF(<object> self._heap[i].item)
        self._len = 0

    def __len__(self):
        return self._len


def byte_sum32(buf):
    """Sum of all bytes in ``buf`` modulo 2**32."""
    cdef const unsigned char[::1] view = memoryview(buf).cast("B")
    cdef Py_ssize_t i, n = view.shape[0]
    cdef uint32_t acc = 0
    with nogil:
        for i in range(n):
            acc += view[i]
    return acc


def find_range(starts, sizes, addr, length):
    """Index of the range in sorted, disjoint ``starts``/``sizes`` that fully
    contains ``[addr, addr + length)``; -1 if none does."""
    cdef Py_ssize_t lo = 0, hi = len(starts), mid
    cdef object a = addr
    while lo < hi:
        mid = (lo + hi) >> 1
        if a < starts[mid]:
            hi = mid
        else:
            lo = mid + 1
    lo -= 1
    if lo < 0:
        return -1
    if addr + length <= starts[lo] + sizes[lo]:
        return lo
    return -1
