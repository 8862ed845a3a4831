"""Pure-Python implementations of the hot kernels.

Mirrors the API of the compiled ``_speedups`` extension exactly; the
selection between the two happens in :mod:`passvp._accel`.
"""

import heapq
from bisect import bisect_right

IMPLEMENTATION = "python"


class EventQueue:
    """Min-heap of ``(time, seq, item)`` with FIFO ordering among equal times."""

    __slots__ = ("_heap", "_seq")

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, time, item):
        if time < 0:
            raise ValueError("event time must be non-negative")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (time, seq, item))
        return seq

    def pop(self):
        if not self._heap:
            raise IndexError("pop from empty event queue")
        time, _, item = heapq.heappop(self._heap)
        return time, item

    def peek_time(self):
        if not self._heap:
            return None
        return self._heap[0][0]

    def clear(self):
        self._heap.clear()

    def __len__(self):
        return len(self._heap)


def byte_sum32(buf):
    """Sum of all bytes in ``buf`` modulo 2**32."""
    return sum(memoryview(buf).cast("B")) & 0xFFFFFFFF


def find_range(starts, sizes, addr, length):
    """Index of the range in sorted, disjoint ``starts``/``sizes`` that fully
    contains ``[addr, addr + length)``; -1 if none does."""
    i = bisect_right(starts, addr) - 1
    if i < 0:
        return -1
    if addr + length <= starts[i] + sizes[i]:
        return i
    return -1
