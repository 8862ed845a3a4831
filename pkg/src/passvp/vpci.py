"""Pass-through PCI device model.

Routes PCI transactions to a :class:`~passvp.backend.DeviceBackend`,
programs the backend's IOMMU from a DMI grant of guest RAM, and turns
backend interrupt events into INTx backward messages or MSI/MSI-X writes
issued through the host bridge.

Config fields served from local shadow state: BARs, the decode bits of
the command register, MSI control/address/data and MSI-X control. The
guest therefore sees what it programmed even when the device (or the host
kernel) holds different values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from .backend import BackendError, DeviceBackend, DmaPerm, IrqEvent, IrqKind, RegionInfo
from .pci import (
    BAR0,
    CAP_ID_MSI,
    CAP_ID_MSIX,
    CMD_BUS_MASTER,
    CMD_INTX_DISABLE,
    CMD_IO_ENABLE,
    CMD_MEMORY_ENABLE,
    COMMAND,
    CONFIG_SPACE_SIZE,
    INTERRUPT_PIN,
    MSI_ADDR_HI,
    MSI_ADDR_LO,
    MSI_CTRL,
    MSI_CTRL_64BIT,
    MSI_CTRL_ENABLE,
    MSI_DATA,
    MSIX_CTRL,
    MSIX_CTRL_ENABLE,
    MSIX_CTRL_MASKALL,
    MSIX_ENTRY_SIZE,
    BarDefinition,
    BarKind,
    ConfigSpace,
    Direction,
    MsiXCapability,
    MsiXTableEntry,
    PciBackwardMessage,
    PciPayload,
    PciSpace,
    PciTargetSocket,
    Pin,
    capability_walk,
    parse_msi,
)
from .sim import US, GenericPayload, InitiatorSocket, Kernel, Response

log = logging.getLogger(__name__)


class DmaSetupError(RuntimeError):
    """The DMA window could not be established (DMI denied or map failed)."""


@dataclass(frozen=True)
class DmaWindow:
    guest_base: int
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("DMA window size must be positive")

    @property
    def guest_end(self) -> int:
        return self.guest_base + self.size


class _ComposedView:
    """``read(offset, width)`` over the guest-visible config space."""

    def __init__(self, dev: "VirtualPciDevice"):
        self._dev = dev

    def read(self, offset: int, width: int) -> int:
        return int.from_bytes(self._dev.config_read(offset, width), "little")


class VirtualPciDevice:
    def __init__(self, kernel: Kernel, name: str, backend: DeviceBackend,
                 quantum: int = US, tracer=None):
        if quantum <= 0:
            raise ValueError("quantum must be positive")
        self.kernel = kernel
        self.name = name
        self.backend = backend
        self.quantum = quantum
        self.tracer = tracer
        self.pci = PciTargetSocket(f"{name}.pci", self.handle_pci, lambda: self.shadow)
        self.dma = InitiatorSocket(kernel, f"{name}.dma")
        self.dma.on_dmi_invalidate(self._on_dmi_invalidate)

        self.regions: dict[int, RegionInfo] = {r.bar: r for r in backend.region_info()}
        raw = backend.config_read(0, CONFIG_SPACE_SIZE)
        bars = []
        for r in self.regions.values():
            reg = int.from_bytes(raw[BAR0 + 4 * r.bar:BAR0 + 4 * r.bar + 4], "little")
            prefetch = r.kind is not BarKind.IO and bool(reg & 0x8)
            bars.append(BarDefinition(r.bar, r.size, r.kind, prefetch))
        self.shadow = ConfigSpace.from_bytes(raw, bars)
        self._vmask = bytearray(CONFIG_SPACE_SIZE)    # bits served from shadow
        self._forward = bytearray(CONFIG_SPACE_SIZE)  # bytes whose writes reach the device
        self._setup_virtualization()

        self.pending: set[int] = set()
        self.intx_asserted = False
        self.window: Optional[DmaWindow] = None
        self.dropped_irqs = 0
        self.dma_errors = 0
        self.map_failures = 0
        self.irq_log: list[IrqEvent] = []
        self._msi_on = False
        self._msix_on = False
        self._tick = None

        self.msix_info: Optional[MsiXCapability] = self.shadow.msix()
        kernel.on_elaboration(self._start)

    def _setup_virtualization(self) -> None:
        for i in range(CONFIG_SPACE_SIZE):
            self._forward[i] = 1
        cmd = CMD_IO_ENABLE | CMD_MEMORY_ENABLE | CMD_BUS_MASTER | CMD_INTX_DISABLE
        self._vmask[COMMAND] = cmd & 0xFF
        self._vmask[COMMAND + 1] = cmd >> 8
        for i in range(BAR0, BAR0 + 24):
            self._vmask[i] = 0xFF
            self._forward[i] = 0
        for cap_id, off in capability_walk(self.shadow):
            if cap_id == CAP_ID_MSI:
                self._vmask[off + MSI_CTRL] |= MSI_CTRL_ENABLE
                end = off + (MSI_DATA + 2 if self.shadow.read(off + MSI_CTRL, 2) & MSI_CTRL_64BIT
                             else MSI_ADDR_HI + 2)
                for i in range(off + MSI_ADDR_LO, end):
                    self._vmask[i] = 0xFF
                    self._forward[i] = 0
                # the guest programs these from scratch
                self.shadow.raw[off + MSI_ADDR_LO:end] = bytes(end - off - MSI_ADDR_LO)
                self.shadow.raw[off + MSI_CTRL] &= ~MSI_CTRL_ENABLE & 0xFF
            elif cap_id == CAP_ID_MSIX:
                self._vmask[off + MSIX_CTRL + 1] |= (MSIX_CTRL_ENABLE | MSIX_CTRL_MASKALL) >> 8
                self.shadow.raw[off + MSIX_CTRL + 1] &= ~((MSIX_CTRL_ENABLE | MSIX_CTRL_MASKALL)
                                                          >> 8) & 0xFF
        # power-on state of the virtualized bits
        self.shadow.raw[COMMAND] &= ~self._vmask[COMMAND] & 0xFF
        self.shadow.raw[COMMAND + 1] &= ~self._vmask[COMMAND + 1] & 0xFF
        self.shadow._reset_raw = bytes(self.shadow.raw)

    def _start(self) -> None:
        if self.shadow.interrupt_pin is not Pin.NONE:
            self._irq_setup(IrqKind.LEGACY, 1)
        self._tick = self.kernel.schedule(self._quantum_tick, self.quantum)

    def _quantum_tick(self) -> None:
        self.pump_interrupts()
        self._tick = self.kernel.schedule(self._quantum_tick, self.quantum)

    def _emit(self, *args) -> None:
        if self.tracer is not None:
            self.tracer.emit(*args)

    def _warn(self, what: str) -> None:
        log.warning("%s: %s", self.name, what)
        if self.tracer is not None:
            self.tracer.warning(self.name, what)

    # configuration space
    def config_read(self, offset: int, length: int) -> bytes:
        vm = self._vmask[offset:offset + length]
        local = self.shadow.raw[offset:offset + length]
        if all(b == 0xFF for b in vm):
            return bytes(local)
        remote = self.backend.config_read(offset, length)
        return bytes((r & ~m & 0xFF) | (s & m) for r, s, m in zip(remote, local, vm))

    def config_write(self, offset: int, data: bytes) -> None:
        self.shadow.write_bytes(offset, data)
        # forward contiguous runs of non-shadow-only bytes
        run_start = None
        for i in range(len(data) + 1):
            fwd = i < len(data) and self._forward[offset + i]
            if fwd and run_start is None:
                run_start = i
            elif not fwd and run_start is not None:
                self.backend.config_write(offset + run_start, bytes(data[run_start:i]))
                run_start = None
        self._after_config_write()

    def _msi_state(self):
        off = self.shadow.find_capability(CAP_ID_MSI)
        return None if off is None else parse_msi(self.shadow, off)

    def _after_config_write(self) -> None:
        msi = self._msi_state()
        if msi is not None and msi.enabled != self._msi_on:
            self._msi_on = msi.enabled
            self._irq_setup(IrqKind.MSI, 1 if msi.enabled else 0)
        msix = self.shadow.msix()
        if msix is not None:
            self.msix_info = msix
            if msix.enabled != self._msix_on:
                self._msix_on = msix.enabled
                self._irq_setup(IrqKind.MSIX, msix.table_size if msix.enabled else 0)
            if msix.enabled and not msix.function_masked and self.pending:
                for vector in sorted(self.pending):
                    self.unmask_replay(vector)

    def _irq_setup(self, kind: IrqKind, count: int) -> None:
        try:
            self.backend.irq_setup(kind, count)
        except BackendError as exc:
            self._warn(f"interrupt setup {kind.value} x{count} failed: {exc}")

    def intercept_config(self, txn: PciPayload) -> None:
        if txn.address + len(txn.data) > CONFIG_SPACE_SIZE:
            txn.response = Response.ADDRESS_ERROR
            return
        if txn.is_read:
            txn.data[:] = self.config_read(txn.address, len(txn.data))
        else:
            self.config_write(txn.address, bytes(txn.data))
        txn.response = Response.OK

    # memory / io regions
    def handle_pci(self, txn: PciPayload) -> None:
        if txn.space is PciSpace.CONFIG:
            self.intercept_config(txn)
            return
        region = self.regions.get(txn.bar)
        want_io = txn.space is PciSpace.IO
        if (region is None or (region.kind is BarKind.IO) != want_io
                or txn.address + len(txn.data) > region.size):
            txn.response = Response.ADDRESS_ERROR
            return
        if self.intx_asserted:
            self._intx_eoi()
        txn.response = self.backend.region_access(txn.bar, txn.address, txn.data, txn.direction)
        if not txn.response.ok:
            return
        if txn.is_read:
            self._overlay_pba(txn)
        else:
            self._after_region_write(txn)
            self.pump_interrupts()

    def _pba_range(self) -> Optional[tuple[int, int, int]]:
        m = self.msix_info
        if m is None:
            return None
        return m.pba_bar, m.pba_offset, m.pba_offset + m.pba_size

    def pba_bytes(self) -> bytes:
        m = self.msix_info
        bits = sum(1 << v for v in self.pending)
        return bits.to_bytes(m.pba_size, "little") if m else b""

    def _overlay_pba(self, txn: PciPayload) -> None:
        pba = self._pba_range()
        if pba is None or txn.bar != pba[0]:
            return
        lo, hi = max(txn.address, pba[1]), min(txn.address + len(txn.data), pba[2])
        if lo >= hi:
            return
        local = self.pba_bytes()
        txn.data[lo - txn.address:hi - txn.address] = local[lo - pba[1]:hi - pba[1]]

    def _after_region_write(self, txn: PciPayload) -> None:
        m = self.msix_info
        if m is None or txn.bar != m.table_bar or not self.pending:
            return
        lo, hi = txn.address, txn.address + len(txn.data)
        t0, t1 = m.table_offset, m.table_offset + m.table_bytes
        if hi <= t0 or lo >= t1:
            return
        first = (max(lo, t0) - t0) // MSIX_ENTRY_SIZE
        last = (min(hi, t1) - 1 - t0) // MSIX_ENTRY_SIZE
        for vector in range(first, last + 1):
            self.unmask_replay(vector)

    def read_msix_entry(self, vector: int) -> MsiXTableEntry:
        m = self.msix_info
        buf = bytearray(MSIX_ENTRY_SIZE)
        for part in (0, 8):
            chunk = bytearray(8)
            resp = self.backend.region_access(
                m.table_bar, m.table_offset + vector * MSIX_ENTRY_SIZE + part, chunk,
                Direction.READ)
            if not resp.ok:
                raise BackendError(f"reading MSI-X entry {vector} failed: {resp.value}")
            buf[part:part + 8] = chunk
        return MsiXTableEntry.unpack(buf)

    # DMA
    def setup_dma_window(self, window: DmaWindow) -> None:
        """Grant the device access to ``window`` of guest memory.

        Obtains a DMI pointer for the window and maps it into the
        backend's IOMMU at IOVA == guest-physical address, so addresses
        the guest hands to the device need no rewriting.
        """
        dmi = self.dma.get_dmi(window.guest_base)
        if dmi is None:
            raise DmaSetupError(f"no DMI grant for DMA window at {window.guest_base:#x}")
        if not dmi.contains(window.guest_base, window.size):
            raise DmaSetupError(
                f"DMA window [{window.guest_base:#x}, {window.guest_end:#x}) not inside one "
                f"memory region [{dmi.range_start:#x}, {dmi.range_end:#x}]")
        host = dmi.view(window.guest_base, window.size)
        perms = DmaPerm(0)
        if dmi.read_allowed:
            perms |= DmaPerm.READ
        if dmi.write_allowed:
            perms |= DmaPerm.WRITE
        try:
            self.backend.map_dma(window.guest_base, host, window.size, perms)
        except BackendError as exc:
            if not self.kernel.elaborated:
                raise DmaSetupError(f"backend rejected DMA map: {exc}") from exc
            self.map_failures += 1
            self._warn(f"runtime DMA map failed: {exc}")
            return
        self.window = window

    def _on_dmi_invalidate(self, start: int, end: int) -> None:
        w = self.window
        if w is None or end < w.guest_base or start >= w.guest_end:
            return
        self.backend.unmap_dma(w.guest_base, w.size)
        self.window = None
        self._warn("DMA window invalidated by memory owner")

    # interrupts
    def pump_interrupts(self) -> int:
        events = self.backend.poll_irqs()
        for ev in events:
            ev.time = self.kernel.now
            self.irq_log.append(ev)
            self._inject(ev)
        return len(events)

    def _inject(self, ev: IrqEvent) -> None:
        if ev.kind is IrqKind.LEGACY:
            self._inject_legacy()
        elif ev.kind is IrqKind.MSI:
            self._inject_msi(ev.index)
        else:
            self._inject_msix(ev.index)

    def _drop(self, why: str) -> None:
        self.dropped_irqs += 1
        self._warn(why)

    def _inject_legacy(self) -> None:
        raw_pin = self.config_read(INTERRUPT_PIN, 1)[0]
        if not 1 <= raw_pin <= 4:
            self._drop("legacy interrupt from device without interrupt pin")
            return
        pin = Pin(raw_pin)
        self._emit("device", "irq", "intx", int(pin), 0, "write")
        self.intx_asserted = True
        self.pci.send_backward(PciBackwardMessage(pin, True))

    def _intx_eoi(self) -> None:
        # a guest access to the device acknowledges the level interrupt
        self.intx_asserted = False
        pin = Pin(self.config_read(INTERRUPT_PIN, 1)[0])
        self.pci.send_backward(PciBackwardMessage(pin, False))
        self.backend.unmask_legacy()

    def _inject_msi(self, index: int) -> None:
        msi = self._msi_state()
        if msi is None or not msi.enabled:
            self._drop("MSI raised while MSI disabled")
            return
        if index != 0:
            self._drop(f"MSI index {index} without multi-message support")
            return
        self._emit("device", "irq", "msi", 0, 0, "write")
        self._message_write(msi.message_address, msi.message_data)

    def _inject_msix(self, vector: int) -> None:
        m = self.msix_info
        if m is None or not m.enabled:
            self._drop(f"MSI-X vector {vector} raised while MSI-X disabled")
            return
        if not 0 <= vector < m.table_size:
            self._drop(f"MSI-X vector {vector} beyond table size {m.table_size}")
            return
        entry = self.read_msix_entry(vector)
        if entry.masked or m.function_masked:
            self.pending.add(vector)
            self._emit("device", "irq", "msix-pending", vector, 0, "write")
            return
        self._emit("device", "irq", "msix", vector, 0, "write")
        self._message_write(entry.message_address, entry.message_data)

    def unmask_replay(self, vector: int) -> None:
        """Deliver a pending vector once its entry and the function are unmasked."""
        if vector not in self.pending:
            return
        m = self.msix_info
        if m is None or not m.enabled or m.function_masked:
            return
        entry = self.read_msix_entry(vector)
        if entry.masked:
            return
        self.pending.discard(vector)
        self._emit("device", "irq", "msix", vector, 0, "write")
        self._message_write(entry.message_address, entry.message_data)

    def _message_write(self, address: int, data: int) -> None:
        txn = GenericPayload.write(address, (data & 0xFFFFFFFF).to_bytes(4, "little"))
        self.dma.b_transport(txn)
        if not txn.response.ok:
            self.dma_errors += 1
            self._warn(f"interrupt message write to {address:#x} failed: {txn.response.value}")

    def guest_view(self) -> _ComposedView:
        return _ComposedView(self)
