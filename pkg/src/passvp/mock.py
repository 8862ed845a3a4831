"""Simulated PCI function: a DMA copy/checksum engine behind a simulated IOMMU.

BAR0 (4 KiB, MEM32) register map::

    0x000  ID        RO   0xC0DE0001
    0x008  SRC       RW   64-bit IOVA
    0x010  DST       RW   64-bit IOVA
    0x018  LEN       RW   bytes
    0x01C  CTRL      RW   bit0 start (self-clearing), bit1 irq enable
    0x020  STATUS    RO   bit0 busy, bit1 done, bit2 error
    0x024  CHECKSUM  RO   byte sum of the last copy, mod 2**32
    0x800  MSI-X table (13 x 16 bytes)
    0xC00  MSI-X PBA

A job takes LEN ns of virtual time. On completion it copies SRC to DST
through the IOMMU and raises vector 1 once per 256-byte chunk followed by
vector 0 once.
"""

from __future__ import annotations

import logging
import struct
from array import array
from dataclasses import dataclass, field
from typing import Optional

from ._accel import byte_sum32, find_range
from .backend import BackendError, DeviceBackend, DmaPerm, IrqEvent, IrqKind, RegionInfo
from .pci import (
    BarDefinition,
    BarKind,
    ConfigSpace,
    Direction,
    MSIX_CTRL_ENABLE,
    MSIX_ENTRY_SIZE,
    Pin,
    MSI_CTRL_ENABLE,
)
from .sim import NS, Kernel, Response

log = logging.getLogger(__name__)

VENDOR_ID = 0x1B0B
DEVICE_ID = 0x0001
ENGINE_ID = 0xC0DE0001
BAR0_SIZE = 0x1000
NUM_VECTORS = 13
MSI_CAP_OFFSET = 0x50
MSIX_CAP_OFFSET = 0x60
HOST_MSI_SENTINEL = 0xFEE0_0000  # what the host side programmed into the device

REG_ID = 0x00
REG_SRC = 0x08
REG_DST = 0x10
REG_LEN = 0x18
REG_CTRL = 0x1C
REG_STATUS = 0x20
REG_CHECKSUM = 0x24
TABLE_OFFSET = 0x800
PBA_OFFSET = 0xC00

CTRL_START = 1 << 0
CTRL_IRQ_ENABLE = 1 << 1
STATUS_BUSY = 1 << 0
STATUS_DONE = 1 << 1
STATUS_ERROR = 1 << 2

VECTOR_DONE = 0
VECTOR_CHUNK = 1

_WRITABLE = {REG_SRC: 8, REG_DST: 8, REG_LEN: 4, REG_CTRL: 4}
_READ_ONLY = {REG_ID: 4, REG_STATUS: 4, REG_CHECKSUM: 4}


class IommuFault(Exception):
    def __init__(self, iova: int, length: int, perm: DmaPerm):
        super().__init__(f"IOMMU fault: [{iova:#x}, +{length}) {perm.name}")
        self.iova = iova
        self.length = length
        self.perm = perm


@dataclass
class IommuMapping:
    iova_base: int
    host_buffer: memoryview
    size: int
    perms: DmaPerm


class SimIommuTable:
    """IOVA -> host buffer translation over disjoint mappings."""

    def __init__(self):
        self.mappings: list[IommuMapping] = []
        self._starts = array("Q")
        self._sizes = array("Q")

    def map(self, iova: int, host_buffer: memoryview, size: int, perms: DmaPerm) -> None:
        if size <= 0 or len(host_buffer) < size:
            raise ValueError("mapping size must be positive and fit the buffer")
        for m in self.mappings:
            if iova < m.iova_base + m.size and m.iova_base < iova + size:
                raise ValueError(f"IOVA range [{iova:#x}, +{size:#x}) overlaps existing mapping")
        self.mappings.append(IommuMapping(iova, host_buffer[:size], size, perms))
        self.mappings.sort(key=lambda m: m.iova_base)
        self._rebuild()

    def unmap(self, iova: int, size: int) -> None:
        keep = [m for m in self.mappings if not (m.iova_base == iova and m.size == size)]
        if len(keep) == len(self.mappings):
            raise ValueError(f"no mapping at {iova:#x} of size {size:#x}")
        self.mappings = keep
        self._rebuild()

    def _rebuild(self) -> None:
        self._starts = array("Q", (m.iova_base for m in self.mappings))
        self._sizes = array("Q", (m.size for m in self.mappings))

    def translate(self, iova: int, length: int, perm: DmaPerm) -> memoryview:
        if length <= 0:
            return memoryview(bytearray())
        i = find_range(self._starts, self._sizes, iova, length)
        if i < 0:
            raise IommuFault(iova, length, perm)
        m = self.mappings[i]
        if perm & ~m.perms:
            raise IommuFault(iova, length, perm)
        off = iova - m.iova_base
        return m.host_buffer[off:off + length]


def iommu_translate(table: SimIommuTable, iova: int, length: int,
                    perm: DmaPerm) -> memoryview:
    return table.translate(iova, length, perm)


@dataclass
class JobRecord:
    src: int
    dst: int
    length: int
    start_ps: int
    end_ps: Optional[int] = None
    checksum: Optional[int] = None
    error: bool = False
    events: list = field(default_factory=list)


class CopyCheckDevice(DeviceBackend):
    def __init__(self, kernel: Kernel, *, chunk_size: int = 256, ps_per_byte: int = NS,
                 msi_sentinel: int = HOST_MSI_SENTINEL):
        if chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        self.kernel = kernel
        self.chunk_size = chunk_size
        self.ps_per_byte = ps_per_byte
        self.msi_sentinel = msi_sentinel
        self.iommu = SimIommuTable()
        self.config = ConfigSpace(VENDOR_ID, DEVICE_ID, class_code=0x120000,
                                  interrupt_pin=Pin.A,
                                  bars=[BarDefinition(0, BAR0_SIZE, BarKind.MEM32)])
        self.config.add_msi(MSI_CAP_OFFSET)
        self.config.add_msix(MSIX_CAP_OFFSET, NUM_VECTORS, 0, TABLE_OFFSET, 0, PBA_OFFSET)
        self.config.write(MSI_CAP_OFFSET + 4, 4, msi_sentinel & 0xFFFFFFFF)
        self.config.write(MSI_CAP_OFFSET + 8, 4, msi_sentinel >> 32)
        self.config._reset_raw = bytes(self.config.raw)
        self.ignored_writes = 0
        self.jobs: list[JobRecord] = []
        self._events: list[IrqEvent] = []
        self._irq_routes: dict[IrqKind, int] = {}
        self.reset()

    # registers
    def reset(self) -> None:
        self.config.reset()
        self.regs = bytearray(BAR0_SIZE)
        struct.pack_into("<I", self.regs, REG_ID, ENGINE_ID)
        for v in range(NUM_VECTORS):
            struct.pack_into("<I", self.regs, TABLE_OFFSET + v * MSIX_ENTRY_SIZE + 12, 1)
        self._events.clear()
        self._job: Optional[JobRecord] = None

    def _reg(self, off: int, width: int = 4) -> int:
        return int.from_bytes(self.regs[off:off + width], "little")

    def _set_reg(self, off: int, value: int, width: int = 4) -> None:
        self.regs[off:off + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    @property
    def status(self) -> int:
        return self._reg(REG_STATUS)

    @property
    def checksum(self) -> int:
        return self._reg(REG_CHECKSUM)

    def region_info(self) -> list[RegionInfo]:
        return [RegionInfo(0, BAR0_SIZE, BarKind.MEM32)]

    def region_access(self, bar: int, offset: int, data: bytearray,
                      direction: Direction) -> Response:
        n = len(data)
        if bar != 0 or offset < 0 or offset + n > BAR0_SIZE:
            return Response.ADDRESS_ERROR
        if direction is Direction.READ:
            data[:] = self.regs[offset:offset + n]
            if PBA_OFFSET <= offset < PBA_OFFSET + 8:
                # pending state is owned by the pass-through model
                data[:] = bytes(n)
            return Response.OK
        self._write(offset, bytes(data))
        return Response.OK

    def _write(self, offset: int, data: bytes) -> None:
        n = len(data)
        table_end = TABLE_OFFSET + NUM_VECTORS * MSIX_ENTRY_SIZE
        if TABLE_OFFSET <= offset and offset + n <= table_end:
            self.regs[offset:offset + n] = data
            return
        base = next((r for r, w in _WRITABLE.items() if r <= offset and offset + n <= r + w), None)
        if base is None:
            self.ignored_writes += 1
            log.debug("mock: ignored write of %d bytes at %#x", n, offset)
            return
        self.regs[offset:offset + n] = data
        if base == REG_CTRL:
            ctrl = self._reg(REG_CTRL)
            self._set_reg(REG_CTRL, ctrl & ~CTRL_START)
            if ctrl & CTRL_START:
                self.start_job()

    # config space
    def config_read(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > len(self.config.raw):
            raise ValueError("config read out of range")
        return bytes(self.config.raw[offset:offset + length])

    def config_write(self, offset: int, data: bytes) -> None:
        self.config.write_bytes(offset, data)

    # DMA
    def map_dma(self, iova: int, host_buffer: memoryview, size: int,
                perms: DmaPerm = DmaPerm.RW) -> None:
        try:
            self.iommu.map(iova, host_buffer, size, perms)
        except ValueError as exc:
            raise BackendError(str(exc)) from None

    def unmap_dma(self, iova: int, size: int) -> None:
        self.iommu.unmap(iova, size)

    def dma_read(self, iova: int, length: int) -> bytes:
        """Device-initiated read through the IOMMU (raises IommuFault)."""
        return bytes(self.iommu.translate(iova, length, DmaPerm.READ))

    def dma_write(self, iova: int, data: bytes) -> None:
        self.iommu.translate(iova, len(data), DmaPerm.WRITE)[:] = data

    # the engine
    def start_job(self) -> None:
        if self.status & STATUS_BUSY:
            self.ignored_writes += 1
            log.warning("mock: start while busy ignored")
            return
        job = JobRecord(self._reg(REG_SRC, 8), self._reg(REG_DST, 8), self._reg(REG_LEN),
                        self.kernel.now)
        self._job = job
        self.jobs.append(job)
        self._set_reg(REG_STATUS, STATUS_BUSY)
        self.kernel.schedule(lambda: self._complete(job), job.length * self.ps_per_byte)

    def _complete(self, job: JobRecord) -> None:
        job.end_ps = self.kernel.now
        self._job = None
        try:
            src = self.iommu.translate(job.src, job.length, DmaPerm.READ)
            dst = self.iommu.translate(job.dst, job.length, DmaPerm.WRITE)
        except IommuFault as fault:
            log.info("mock: job faulted: %s", fault)
            job.error = True
            self._set_reg(REG_STATUS, STATUS_ERROR)
            return
        data = bytes(src)  # snapshot first: SRC and DST may overlap
        dst[:] = data
        job.checksum = byte_sum32(data)
        self._set_reg(REG_CHECKSUM, job.checksum)
        self._set_reg(REG_STATUS, STATUS_DONE)
        chunks = -(-job.length // self.chunk_size)
        for _ in range(chunks):
            self._raise(job, VECTOR_CHUNK)
        self._raise(job, VECTOR_DONE)

    def _raise(self, job: JobRecord, vector: int) -> None:
        if not self._reg(REG_CTRL) & CTRL_IRQ_ENABLE:
            return
        msix = self.config.read(MSIX_CAP_OFFSET + 2, 2) & MSIX_CTRL_ENABLE
        msi = self.config.read(MSI_CAP_OFFSET + 2, 2) & MSI_CTRL_ENABLE
        if msix:
            ev = IrqEvent(IrqKind.MSIX, vector)
        elif vector != VECTOR_DONE:
            # single-vector modes only signal completion
            return
        elif msi:
            ev = IrqEvent(IrqKind.MSI, 0)
        else:
            ev = IrqEvent(IrqKind.LEGACY, int(Pin.A))
        job.events.append(ev)
        self._events.append(ev)

    def poll_irqs(self) -> list[IrqEvent]:
        out, self._events = self._events, []
        return out

    def irq_setup(self, kind: IrqKind, count: int) -> None:
        self._irq_routes[kind] = count
