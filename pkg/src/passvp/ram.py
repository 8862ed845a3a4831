"""System RAM: a zero-filled byte store reachable over the bus and via DMI."""

from __future__ import annotations

import mmap
import os
from typing import Optional

from .sim import DmiDescriptor, GenericPayload, Response, TargetSocket


class Ram:
    """Guest-physical range ``[base, base + size)`` backed by host memory.

    The store is an anonymous mapping, so it is page aligned and can be
    handed to a host IOMMU as-is.
    """

    def __init__(self, name: str, base: int, size: int, latency: int = 0):
        if size <= 0:
            raise ValueError("RAM size must be positive")
        self.name = name
        self.base = base
        self.size = size
        self._map = mmap.mmap(-1, size)
        self.store = memoryview(self._map)
        self.socket = TargetSocket(f"{name}.socket", self.bus_access, self.grant_dmi, latency)

    def translate(self, pa: int) -> int:
        """Buffer index of guest-physical address ``pa``."""
        if not self.base <= pa < self.base + self.size:
            raise ValueError(f"{pa:#x} outside {self.name}")
        return pa - self.base

    def bus_access(self, txn: GenericPayload) -> None:
        n = len(txn.data)
        off = txn.address - self.base
        if off < 0 or off + n > self.size:
            txn.set_response(Response.ADDRESS_ERROR)
            return
        if txn.is_read:
            txn.data[:] = self.store[off:off + n]
        else:
            self.store[off:off + n] = txn.data
        txn.set_response(Response.OK)

    def grant_dmi(self, address: int) -> Optional[DmiDescriptor]:
        if not self.base <= address < self.base + self.size:
            return None
        return DmiDescriptor(self.base, self.base + self.size - 1, self.store)

    def load_image(self, path: str | os.PathLike, offset: int = 0,
                   length: Optional[int] = None) -> int:
        """Copy a raw file into RAM at ``base + offset``; returns bytes loaded."""
        with open(path, "rb") as fh:
            data = fh.read() if length is None else fh.read(length)
        if offset < 0 or offset + len(data) > self.size:
            raise ValueError(f"image of {len(data)} bytes does not fit at offset {offset:#x}")
        self.store[offset:offset + len(data)] = data
        return len(data)

    def dump_image(self, path: str | os.PathLike, offset: int = 0,
                   length: Optional[int] = None) -> int:
        if length is None:
            length = self.size - offset
        if offset < 0 or length < 0 or offset + length > self.size:
            raise ValueError("dump range outside RAM")
        with open(path, "wb") as fh:
            fh.write(self.store[offset:offset + length])
        return length

    def close(self) -> None:
        self.store.release()
        self._map.close()
