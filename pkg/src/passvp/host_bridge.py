"""PCI host bridge between the system bus and attached PCI devices."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

from .pci import (
    BAR0,
    COMMAND,
    BarKind,
    ConfigSpace,
    Direction,
    PciBackwardMessage,
    PciInitiatorSocket,
    PciPayload,
    PciSpace,
    PciTargetSocket,
    Pin,
)
from .sim import (
    DmiDescriptor,
    GenericPayload,
    InitiatorSocket,
    Kernel,
    Response,
    SignalLine,
    TargetSocket,
)

log = logging.getLogger(__name__)

ECAM_SLOT_SHIFT = 15
ECAM_FUNCTION_SHIFT = 12
ECAM_WINDOW = 1 << 20  # one bus: 32 slots x 8 functions x 4 KiB
MAX_SLOTS = 32


@dataclass(frozen=True)
class CfgAddress:
    device_slot: int
    function: int
    register_offset: int

    @classmethod
    def decode(cls, offset: int) -> "CfgAddress":
        return cls((offset >> ECAM_SLOT_SHIFT) & 0x1F, (offset >> ECAM_FUNCTION_SHIFT) & 0x7,
                   offset & 0xFFF)

    def encode(self) -> int:
        return ((self.device_slot << ECAM_SLOT_SHIFT) | (self.function << ECAM_FUNCTION_SHIFT)
                | self.register_offset)


@dataclass(frozen=True)
class DecodeEntry:
    device_slot: int
    bar_index: int
    bus_base: int
    size: int
    space: PciSpace

    @property
    def bus_end(self) -> int:
        return self.bus_base + self.size

    def contains(self, address: int, length: int) -> bool:
        return self.bus_base <= address and address + length <= self.bus_end

    def overlaps(self, other: "DecodeEntry") -> bool:
        return (self.space is other.space and self.bus_base < other.bus_end
                and other.bus_base < self.bus_end)


class PciHostBridge:
    """Three bus-facing targets (CFG, MMIO, IO), one DMA initiator.

    MMIO and IO targets must be mapped so they see bus addresses (i.e. a
    mapping offset equal to the window base), because BAR bases are bus
    addresses. The CFG target sees ECAM offsets relative to its window.
    """

    def __init__(self, kernel: Kernel, name: str = "pcihost"):
        self.kernel = kernel
        self.name = name
        self.cfg = TargetSocket(f"{name}.cfg", lambda t: self.route_bus_access("cfg", t))
        self.mmio = TargetSocket(f"{name}.mmio", lambda t: self.route_bus_access("mmio", t))
        self.io = TargetSocket(f"{name}.io", lambda t: self.route_bus_access("io", t))
        self.dma = InitiatorSocket(kernel, f"{name}.dma")
        self.lines = {pin: SignalLine(kernel, f"{name}.{pin.line_name}")
                      for pin in (Pin.A, Pin.B, Pin.C, Pin.D)}
        self.slots: dict[int, PciInitiatorSocket] = {}
        self.decode: list[DecodeEntry] = []
        self.warnings = 0
        self.tracer = None
        self._device_ports: list[TargetSocket] = []
        self._legacy: dict[tuple[int, Pin], bool] = {}
        self._overlaps_seen: set[frozenset] = set()
        self._warning_hooks: list[Callable[[str, str], None]] = []
        self.dma.on_dmi_invalidate(self._invalidate_device_dmi)

    # wiring
    def attach(self, slot: int, device: PciTargetSocket) -> None:
        if not 0 <= slot < MAX_SLOTS:
            raise ValueError(f"slot {slot} out of range")
        if slot in self.slots:
            raise ValueError(f"slot {slot} already occupied")
        sock = PciInitiatorSocket(self.kernel, f"{self.name}.slot{slot}",
                                  lambda s, msg, slot=slot: self._backward(slot, msg))
        sock.bind(device)
        self.slots[slot] = sock

    def device_port(self) -> TargetSocket:
        """Target socket for a device's DMA/DMI traffic toward the bus."""
        port = TargetSocket(f"{self.name}.dev{len(self._device_ports)}",
                            self._device_transport, self._device_dmi)
        self._device_ports.append(port)
        return port

    def on_warning(self, hook: Callable[[str, str], None]) -> None:
        self._warning_hooks.append(hook)

    def _warn(self, what: str) -> None:
        self.warnings += 1
        log.warning("%s: %s", self.name, what)
        for hook in self._warning_hooks:
            hook(self.name, what)

    def _trace(self, *args, at: Optional[int] = None) -> None:
        if self.tracer is not None:
            self.tracer.emit(*args, at=at)

    def _trace_mark(self) -> Optional[int]:
        return None if self.tracer is None else len(self.tracer.records)

    # CPU side
    def route_bus_access(self, space: str, txn: GenericPayload) -> None:
        if space == "cfg":
            self._route_cfg(txn)
        elif space in ("mmio", "io"):
            self._route_region(space, txn)
        else:
            raise ValueError(f"unknown bus space {space!r}")

    def _route_cfg(self, txn: GenericPayload) -> None:
        n = len(txn.data)
        if n not in (1, 2, 4) or txn.address % n:
            txn.set_response(Response.COMMAND_ERROR)
            return
        if txn.address >= ECAM_WINDOW:
            self._absent(txn)
            return
        addr = CfgAddress.decode(txn.address)
        sock = self.slots.get(addr.device_slot)
        if sock is None or addr.function != 0:
            self._absent(txn)
            return
        if addr.register_offset >= 0x100:
            # no extended config space
            if txn.is_read:
                txn.data[:] = bytes(n)
            txn.set_response(Response.OK)
            return
        pci = PciPayload(PciSpace.CONFIG, addr.register_offset, bytearray(txn.data),
                         Direction.READ if txn.is_read else Direction.WRITE)
        mark = self._trace_mark()
        resp = sock.transport(pci)
        if txn.is_read:
            txn.data[:] = pci.data
        txn.set_response(resp)
        if resp.ok:
            self._trace("cpu", "cfg", "cfg", addr.register_offset, n,
                        pci.direction.value, pci.data, at=mark)
        if not txn.is_read and resp.ok and _touches_decode(addr.register_offset, n):
            self.update_decode(addr.device_slot, sock.peer.describe())

    @staticmethod
    def _absent(txn: GenericPayload) -> None:
        if txn.is_read:
            txn.data[:] = b"\xff" * len(txn.data)
        txn.set_response(Response.OK)

    def lookup(self, space: PciSpace, address: int, length: int) -> Optional[DecodeEntry]:
        for entry in self.decode:
            if entry.space is space and entry.contains(address, length):
                return entry
        return None

    def _route_region(self, space: str, txn: GenericPayload) -> None:
        pspace = PciSpace.MEM if space == "mmio" else PciSpace.IO
        n = len(txn.data)
        entry = self.lookup(pspace, txn.address, n)
        if entry is None:
            txn.set_response(Response.ADDRESS_ERROR)
            return
        offset = txn.address - entry.bus_base
        if n not in (1, 2, 4, 8) or offset % n:
            txn.set_response(Response.COMMAND_ERROR)
            return
        pci = PciPayload(pspace, offset, bytearray(txn.data),
                         Direction.READ if txn.is_read else Direction.WRITE, bar=entry.bar_index)
        mark = self._trace_mark()
        resp = self.slots[entry.device_slot].transport(pci)
        if txn.is_read:
            txn.data[:] = pci.data
        txn.set_response(resp)
        if resp.ok:
            self._trace("cpu", space, f"bar{entry.bar_index}", txn.address, n,
                        pci.direction.value, pci.data, at=mark)

    def update_decode(self, slot: int, cfg: ConfigSpace) -> None:
        """Rebuild the decode entries of ``slot`` from its config space."""
        entries = []
        for bar in cfg.bar_definitions():
            if bar.programmed_base is None:
                continue
            is_io = bar.kind is BarKind.IO
            if not (cfg.io_enabled if is_io else cfg.memory_enabled):
                continue
            if bar.programmed_base % bar.size:
                self._warn(f"slot {slot} BAR{bar.index} base {bar.programmed_base:#x} "
                           f"not aligned to {bar.size:#x}")
                continue
            entries.append(DecodeEntry(slot, bar.index, bar.programmed_base, bar.size,
                                       PciSpace.IO if is_io else PciSpace.MEM))
        others = [e for e in self.decode if e.device_slot != slot]
        for new in entries:
            for old in others:
                key = frozenset({(new.device_slot, new.bar_index), (old.device_slot, old.bar_index)})
                if new.overlaps(old) and key not in self._overlaps_seen:
                    self._overlaps_seen.add(key)
                    self._warn(f"slot {new.device_slot} BAR{new.bar_index} overlaps "
                               f"slot {old.device_slot} BAR{old.bar_index}")
        self.decode = sorted(others + entries,
                             key=lambda e: (e.space.value, e.device_slot, e.bar_index))

    # device side
    def forward_dma_write(self, address: int, data: bytes) -> Response:
        txn = GenericPayload.write(address, data)
        self.dma.b_transport(txn)
        if txn.response.ok:
            self._trace("device", "bus", "bus", address, len(data), "write", data)
        return txn.response

    def _device_transport(self, txn: GenericPayload) -> None:
        if txn.is_read:
            self.dma.b_transport(txn)
        else:
            txn.response = self.forward_dma_write(txn.address, txn.data)

    def _invalidate_device_dmi(self, start: int, end: int) -> None:
        for port in self._device_ports:
            port.invalidate_dmi(start, end)

    def _device_dmi(self, address: int) -> Optional[DmiDescriptor]:
        return self.dma.get_dmi(address)

    def _backward(self, slot: int, msg: PciBackwardMessage) -> None:
        self.raise_legacy(msg.pin, msg.level, slot)

    def raise_legacy(self, pin: Pin, level: bool, slot: int = 0) -> None:
        """Drive INTx; each line is the OR over all devices asserting it."""
        if pin is Pin.NONE or pin not in self.lines:
            self._warn(f"slot {slot} signalled interrupt without a pin")
            return
        self._legacy[(slot, pin)] = bool(level)
        self.lines[pin].set(any(v for (s, p), v in self._legacy.items() if p is pin))


def _touches_decode(offset: int, length: int) -> bool:
    end = offset + length
    return (offset < COMMAND + 2 and COMMAND < end) or (offset < BAR0 + 24 and BAR0 < end)
