"""Scripted guest driver standing in for the guest OS.

Every access goes through the CPU initiator socket, so it is decoded by the
bus and the host bridge exactly as guest software would be, and traced.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..host_bridge import CfgAddress
from ..msi import SETSPI, TYPER, decode_typer
from ..pci import (
    BAR0,
    BAR_IO,
    BAR_MEM64,
    CAP_ID_MSI,
    CAP_ID_MSIX,
    CMD_BUS_MASTER,
    CMD_IO_ENABLE,
    CMD_MEMORY_ENABLE,
    COMMAND,
    DEVICE_ID,
    INTERRUPT_PIN,
    MSI_ADDR_HI,
    MSI_ADDR_LO,
    MSI_CTRL,
    MSI_CTRL_ENABLE,
    MSI_DATA,
    MSIX_CTRL,
    MSIX_CTRL_ENABLE,
    MSIX_ENTRY_SIZE,
    VENDOR_ID,
    Pin,
    capability_walk,
    parse_msix,
)
from ..sim import NS, GenericPayload, Response
from .platform import DEVICE_SLOT, Platform

log = logging.getLogger(__name__)

# CopyCheck register map as seen by the driver
REG_ID, REG_SRC, REG_DST, REG_LEN = 0x00, 0x08, 0x10, 0x18
REG_CTRL, REG_STATUS, REG_CHECKSUM = 0x1C, 0x20, 0x24
CTRL_START, CTRL_IRQ_ENABLE = 0x1, 0x2
STATUS_BUSY, STATUS_DONE, STATUS_ERROR = 0x1, 0x2, 0x4
MOCK_VENDOR, MOCK_DEVICE, MOCK_ENGINE_ID = 0x1B0B, 0x0001, 0xC0DE0001
CHUNK = 256
VECTOR_DONE, VECTOR_CHUNK = 0, 1

SCENARIOS = {
    "enumerate": None,
    "enumerate-and-run": "msix",
    "enumerate-and-run-legacy": "legacy",
    "enumerate-and-run-masked": "masked",
    "enumerate-and-run-msi": "msi",
}


class ScenarioFailure(Exception):
    def __init__(self, step: str, detail: str):
        super().__init__(f"{step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass
class Check:
    step: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioResult:
    scenario: str
    checks: list[Check] = field(default_factory=list)
    bars: dict[int, tuple[int, int, bool]] = field(default_factory=dict)
    job_start_ps: Optional[int] = None
    job_end_ps: Optional[int] = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def first_failure(self) -> Optional[Check]:
        return next((c for c in self.checks if not c.passed), None)


def _align_up(value: int, align: int) -> int:
    return (value + align - 1) // align * align


class Driver:
    def __init__(self, platform: Platform, result: ScenarioResult):
        self.p = platform
        self.k = platform.kernel
        self.result = result
        cfg = platform.config
        self.cfg_base = cfg.pci_host.cfg_base + CfgAddress(DEVICE_SLOT, 0, 0).encode()
        self.bar0: Optional[int] = None

    # bookkeeping
    def check(self, step: str, ok: bool, detail: str = "") -> None:
        self.result.checks.append(Check(step, bool(ok), detail))
        if not ok:
            raise ScenarioFailure(step, detail)

    def _sync(self, delay: int) -> None:
        self.k.run_until(self.k.now + delay)

    # raw accesses
    def read(self, addr: int, width: int, step: str = "bus-read") -> int:
        data, resp, _ = self._access(addr, None, width)
        if resp is not Response.OK:
            self.check(step, False, f"read {addr:#x} -> {resp.value}")
        return int.from_bytes(data, "little")

    def write(self, addr: int, width: int, value: int, step: str = "bus-write") -> None:
        _, resp, _ = self._access(addr, (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little"),
                                  width)
        if resp is not Response.OK:
            self.check(step, False, f"write {addr:#x} -> {resp.value}")

    def _access(self, addr: int, data: Optional[bytes], width: int):
        txn = (GenericPayload.read(addr, width) if data is None
               else GenericPayload.write(addr, data))
        delay = self.p.cpu.b_transport(txn)
        self._sync(delay)
        return bytes(txn.data), txn.response, delay

    def read_block(self, addr: int, length: int) -> bytes:
        txn = GenericPayload.read(addr, length)
        self._sync(self.p.cpu.b_transport(txn))
        if not txn.response.ok:
            raise ScenarioFailure("bus-read", f"block read at {addr:#x} -> {txn.response.value}")
        return bytes(txn.data)

    def write_block(self, addr: int, data: bytes) -> None:
        txn = GenericPayload.write(addr, data)
        self._sync(self.p.cpu.b_transport(txn))
        if not txn.response.ok:
            raise ScenarioFailure("bus-write", f"block write at {addr:#x} -> {txn.response.value}")

    def cfg_read(self, offset: int, width: int) -> int:
        return self.read(self.cfg_base + offset, width, "config-read")

    def cfg_write(self, offset: int, width: int, value: int) -> None:
        self.write(self.cfg_base + offset, width, value, "config-write")

    def mmio_read(self, offset: int, width: int = 4) -> int:
        return self.read(self.bar0 + offset, width, "mmio-read")

    def mmio_write(self, offset: int, width: int, value: int) -> None:
        self.write(self.bar0 + offset, width, value, "mmio-write")

    def wait_for(self, predicate: Callable[[], bool], step: str) -> None:
        deadline = self.p.config.timeout
        while not predicate():
            if self.k.now >= deadline:
                self.check(step, False, f"timed out at {self.k.now} ps")
            self.k.run_until(min(self.k.now + self.p.config.quantum, deadline))
        self.check(step, True, f"at {self.k.now} ps")

    # enumeration
    def identify(self, expect_mock: bool) -> None:
        vendor = self.cfg_read(VENDOR_ID, 2)
        device = self.cfg_read(DEVICE_ID, 2)
        self.check("identify", vendor not in (0, 0xFFFF), f"vendor {vendor:#06x}")
        if expect_mock:
            self.check("identify", (vendor, device) == (MOCK_VENDOR, MOCK_DEVICE),
                       f"{vendor:#06x}:{device:#06x}")

    def size_bars(self) -> dict[int, tuple[int, int, bool]]:
        """BAR index -> (size, type bits, is 64-bit upper pair)."""
        found = {}
        index = 0
        while index < 6:
            off = BAR0 + 4 * index
            orig = self.cfg_read(off, 4)
            self.cfg_write(off, 4, 0xFFFFFFFF)
            mask = self.cfg_read(off, 4)
            self.cfg_write(off, 4, orig)
            if mask == 0:
                index += 1
                continue
            if mask & BAR_IO:
                if not mask & 0xFFFF0000:
                    mask |= 0xFFFF0000  # 16-bit IO decoder
                size = (~(mask & ~0x3) & 0xFFFFFFFF) + 1
                found[index] = (size, mask & 0x3, False)
                index += 1
                continue
            is64 = (mask & 0x6) == BAR_MEM64
            full = mask & ~0xF
            if is64:
                hi_off = off + 4
                hi_orig = self.cfg_read(hi_off, 4)
                self.cfg_write(hi_off, 4, 0xFFFFFFFF)
                hi = self.cfg_read(hi_off, 4)
                self.cfg_write(hi_off, 4, hi_orig)
                full |= hi << 32
                size = (~full & 0xFFFFFFFFFFFFFFFF) + 1
            else:
                size = (~full & 0xFFFFFFFF) + 1
            found[index] = (size, mask & 0xF, is64)
            index += 2 if is64 else 1
        self.check("size-bars", bool(found), f"{len(found)} BAR(s)")
        self.result.bars = found
        return found

    def assign_bars(self, bars: dict[int, tuple[int, int, bool]]) -> dict[int, int]:
        host = self.p.config.pci_host
        next_mem, next_io = host.mmio_window_base, host.io_window_base
        bases = {}
        for index, (size, bits, is64) in sorted(bars.items()):
            if bits & BAR_IO:
                base = _align_up(next_io, size)
                next_io = base + size
                limit = host.io_window_base + host.io_window_size
            else:
                base = _align_up(next_mem, size)
                next_mem = base + size
                limit = host.mmio_window_base + host.mmio_window_size
            self.check("assign-bars", base + size <= limit,
                       f"BAR{index} {size:#x} bytes at {base:#x}, window limit {limit:#x}")
            self.cfg_write(BAR0 + 4 * index, 4, base & 0xFFFFFFFF)
            if is64:
                self.cfg_write(BAR0 + 4 * index + 4, 4, base >> 32)
            readback = self.cfg_read(BAR0 + 4 * index, 4) & ~(0x3 if bits & BAR_IO else 0xF)
            self.check("assign-bars", readback == base & 0xFFFFFFFF & ~0xF,
                       f"BAR{index} readback {readback:#x}, programmed {base:#x}")
            bases[index] = base
        has_io = any(b[1] & BAR_IO for b in bars.values())
        cmd = self.cfg_read(COMMAND, 2) | CMD_MEMORY_ENABLE | CMD_BUS_MASTER
        if has_io:
            cmd |= CMD_IO_ENABLE
        self.cfg_write(COMMAND, 2, cmd)
        self.check("enable", self.cfg_read(COMMAND, 2) & CMD_MEMORY_ENABLE, "memory decode on")
        mem_bars = [i for i, b in sorted(bars.items()) if not b[1] & BAR_IO]
        self.bar0 = bases[mem_bars[0]] if mem_bars else None
        return bases

    def capabilities(self) -> dict[int, int]:
        class _View:
            read = staticmethod(self.cfg_read)
        caps = {cid: off for cid, off in capability_walk(_View)}
        self.check("capabilities", True, ", ".join(f"{cid:#04x}@{off:#x}"
                                                    for cid, off in caps.items()))
        return caps

    def msi_frame(self) -> tuple[int, int]:
        base = self.p.config.msi.doorbell_base
        base_spi, num = decode_typer(self.read(base + TYPER, 4, "msi-controller"))
        self.check("msi-controller", num >= 1, f"base_spi {base_spi}, {num} SPIs")
        return base_spi, num


def enumerate_device(drv: Driver, expect_mock: bool) -> dict[int, int]:
    drv.identify(expect_mock)
    bars = drv.size_bars()
    bases = drv.assign_bars(bars)
    return bases


def run_copy_job(drv: Driver, variant: str, length: int, seed: int) -> None:
    p = drv.p
    caps = drv.capabilities()
    base_spi, num_spis = drv.msi_frame()
    doorbell = p.config.msi.doorbell_base + SETSPI
    counts = p.msi.counts
    inta = p.bridge.lines[Pin.A]

    # interrupt programming
    msix_off = caps.get(CAP_ID_MSIX)
    if variant in ("msix", "masked"):
        drv.check("program-interrupts", msix_off is not None, "MSI-X capability present")

        class _View:
            read = staticmethod(drv.cfg_read)
        msix = parse_msix(_View, msix_off)
        vectors = min(msix.table_size, num_spis)
        drv.check("program-interrupts", vectors > VECTOR_CHUNK, f"{msix.table_size} vectors")
        table = drv.bar0 + msix.table_offset
        for v in range(msix.table_size):
            entry = table + v * MSIX_ENTRY_SIZE
            drv.write(entry, 4, doorbell & 0xFFFFFFFF)
            drv.write(entry + 4, 4, doorbell >> 32)
            drv.write(entry + 8, 4, base_spi + v)
            masked = variant == "masked" and v == VECTOR_DONE
            drv.write(entry + 12, 4, 1 if masked or v >= vectors else 0)
        readback = drv.read(table + 8, 4)
        drv.check("program-interrupts", readback == base_spi, f"entry 0 data {readback}")
        ctrl = drv.cfg_read(msix_off + MSIX_CTRL, 2)
        drv.cfg_write(msix_off + MSIX_CTRL, 2, ctrl | MSIX_CTRL_ENABLE)
    elif variant == "msi":
        off = caps.get(CAP_ID_MSI)
        drv.check("program-interrupts", off is not None, "MSI capability present")
        drv.cfg_write(off + MSI_ADDR_LO, 4, doorbell & 0xFFFFFFFF)
        drv.cfg_write(off + MSI_ADDR_HI, 4, doorbell >> 32)
        drv.cfg_write(off + MSI_DATA, 2, base_spi)
        got = drv.cfg_read(off + MSI_ADDR_LO, 4) | drv.cfg_read(off + MSI_ADDR_HI, 4) << 32
        drv.check("program-interrupts", got == doorbell, f"MSI address readback {got:#x}")
        drv.cfg_write(off + MSI_CTRL, 2, drv.cfg_read(off + MSI_CTRL, 2) | MSI_CTRL_ENABLE)
    else:
        pin = drv.cfg_read(INTERRUPT_PIN, 1)
        drv.check("program-interrupts", pin == Pin.A, f"interrupt pin {pin}")

    # DMA window was mapped at platform setup; buffers must lie inside it
    window = p.vpci.window
    drv.check("dma-window", window is not None, "DMA window mapped")
    drv.check("identify", drv.mmio_read(REG_ID) == MOCK_ENGINE_ID, "engine id")
    src = window.guest_base + 0x1_0000
    dst = src + _align_up(max(length, 1), 0x1000) + 0x1000
    drv.check("dma-window", dst + length <= window.guest_end, "buffers fit the DMA window")

    rng = random.Random(seed)
    payload = bytes(rng.getrandbits(8) for _ in range(length))
    if length:
        drv.write_block(src, payload)
    expected_checksum = sum(payload) % (1 << 32)

    drv.mmio_write(REG_SRC, 8, src)
    drv.mmio_write(REG_DST, 8, dst)
    drv.mmio_write(REG_LEN, 4, length)
    start_ps = drv.k.now
    drv.mmio_write(REG_CTRL, 4, CTRL_START | CTRL_IRQ_ENABLE)
    drv.result.job_start_ps = start_ps

    if variant in ("msix", "msi"):
        drv.wait_for(lambda: counts[VECTOR_DONE] >= 1, "wait-irq")
    elif variant == "legacy":
        drv.wait_for(lambda: inta.level, "wait-irq")
    else:
        drv.wait_for(lambda: drv.mmio_read(REG_STATUS) & (STATUS_DONE | STATUS_ERROR), "wait-done")
        # the interrupt reaches the PBA at the next poll, which may trail STATUS
        pba_addr = drv.bar0 + msix.pba_offset
        drv.wait_for(lambda: drv.read(pba_addr, 8) & (1 << VECTOR_DONE), "wait-pending")
        pba = drv.read(pba_addr, 8)
        drv.check("pending", pba & (1 << VECTOR_DONE) and counts[VECTOR_DONE] == 0,
                  f"PBA {pba:#x}, vector 0 pulses {counts[VECTOR_DONE]}")
        drv.write(table + VECTOR_DONE * MSIX_ENTRY_SIZE + 12, 4, 0)
        pba = drv.read(drv.bar0 + msix.pba_offset, 8)
        drv.check("unmask-replay", counts[VECTOR_DONE] == 1 and not pba & 1,
                  f"vector 0 pulses {counts[VECTOR_DONE]}, PBA {pba:#x}")

    status = drv.mmio_read(REG_STATUS)
    drv.check("status", status & STATUS_DONE and not status & (STATUS_ERROR | STATUS_BUSY),
              f"STATUS {status:#x}")
    checksum = drv.mmio_read(REG_CHECKSUM)
    drv.check("checksum", checksum == expected_checksum,
              f"{checksum:#x} vs oracle {expected_checksum:#x}")
    copied = drv.read_block(dst, length) if length else b""
    drv.check("copy", copied == payload, f"{length} bytes")

    chunks = -(-length // CHUNK)
    if variant in ("msix", "masked"):
        got = (counts[VECTOR_CHUNK], counts[VECTOR_DONE])
        drv.check("irq-counts", got == (chunks, 1),
                  f"vector1={got[0]} (want {chunks}), vector0={got[1]} (want 1)")
    elif variant == "msi":
        drv.check("irq-counts", counts[0] == 1 and sum(counts) == 1, f"doorbell SPI counts {[c for c in counts if c] or [0]}, total {sum(counts)}")
    else:
        drv.check("irq-counts", inta.rising_edges == 1 and sum(counts) == 0,
                  f"INTA edges {inta.rising_edges}, doorbell counts {sum(counts)}")

    jobs = getattr(p.backend, "jobs", None)
    if jobs:
        job = jobs[-1]
        drv.result.job_start_ps, drv.result.job_end_ps = job.start_ps, job.end_ps
        drv.check("timing", job.end_ps - job.start_ps == length * NS,
                  f"job took {job.end_ps - job.start_ps} ps for {length} bytes")


def run_driver(platform: Platform, scenario: str, length: int = 4096,
               seed: int = 1) -> ScenarioResult:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    result = ScenarioResult(scenario)
    drv = Driver(platform, result)
    expect_mock = platform.config.device.backend == "mock"
    try:
        enumerate_device(drv, expect_mock)
        variant = SCENARIOS[scenario]
        if variant is None:
            drv.capabilities()
            drv.check("dma-window", platform.vpci.window is not None, "DMA window mapped")
        else:
            run_copy_job(drv, variant, length, seed)
    except ScenarioFailure as failure:
        log.error("scenario %s failed at %s: %s", scenario, failure.step, failure.detail)
    return result
