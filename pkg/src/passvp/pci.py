"""PCI transactions, sockets and type-0 configuration space.

The configuration space keeps a per-bit write mask next to the raw bytes,
so BAR sizing falls out of ordinary masked writes: writing all-ones to a
BAR leaves only the address bits above the region size set.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from .sim import ElaborationError, Kernel, Response

CONFIG_SPACE_SIZE = 256

# header offsets
VENDOR_ID = 0x00
DEVICE_ID = 0x02
COMMAND = 0x04
STATUS = 0x06
REVISION_ID = 0x08
CLASS_CODE = 0x09
HEADER_TYPE = 0x0E
BAR0 = 0x10
CAPABILITIES_POINTER = 0x34
INTERRUPT_LINE = 0x3C
INTERRUPT_PIN = 0x3D

CMD_IO_ENABLE = 1 << 0
CMD_MEMORY_ENABLE = 1 << 1
CMD_BUS_MASTER = 1 << 2
CMD_INTX_DISABLE = 1 << 10
STATUS_CAP_LIST = 1 << 4

CAP_ID_MSI = 0x05
CAP_ID_MSIX = 0x11

# MSI capability (64-bit address layout)
MSI_CTRL = 0x02
MSI_ADDR_LO = 0x04
MSI_ADDR_HI = 0x08
MSI_DATA = 0x0C
MSI_CAP_SIZE = 0x10
MSI_CTRL_ENABLE = 1 << 0
MSI_CTRL_64BIT = 1 << 7

# MSI-X capability
MSIX_CTRL = 0x02
MSIX_TABLE = 0x04
MSIX_PBA = 0x08
MSIX_CAP_SIZE = 0x0C
MSIX_CTRL_ENABLE = 1 << 15
MSIX_CTRL_MASKALL = 1 << 14
MSIX_ENTRY_SIZE = 16
MSIX_ENTRY_CTRL_MASKED = 1 << 0

BAR_IO = 0x1
BAR_MEM64 = 0x4
BAR_PREFETCH = 0x8


class ConfigError(ValueError):
    """Malformed configuration space (e.g. a looping capability list)."""


class PciSpace(enum.Enum):
    CONFIG = "cfg"
    MEM = "mem"
    IO = "io"


class Direction(enum.Enum):
    READ = "read"
    WRITE = "write"


class Pin(enum.IntEnum):
    NONE = 0
    A = 1
    B = 2
    C = 3
    D = 4

    @property
    def line_name(self) -> str:
        return f"INT{self.name}"


class BarKind(enum.Enum):
    MEM32 = "mem32"
    MEM64 = "mem64"
    IO = "io"


@dataclass
class PciPayload:
    space: PciSpace
    address: int
    data: bytearray
    direction: Direction
    bar: Optional[int] = None
    response: Response = Response.INCOMPLETE

    def __post_init__(self):
        n = len(self.data)
        if n not in (1, 2, 4, 8):
            raise ValueError(f"PCI access width must be 1, 2, 4 or 8 bytes, got {n}")
        if self.address % n:
            raise ValueError(f"PCI address {self.address:#x} not aligned to {n}")
        if not isinstance(self.data, bytearray):
            self.data = bytearray(self.data)

    @property
    def is_read(self) -> bool:
        return self.direction is Direction.READ

    @property
    def value(self) -> int:
        return int.from_bytes(self.data, "little")


@dataclass(frozen=True)
class PciBackwardMessage:
    pin: Pin
    level: bool
    kind: str = "LEGACY_IRQ"


@dataclass
class BarDefinition:
    index: int
    size: int
    kind: BarKind = BarKind.MEM32
    prefetchable: bool = False
    programmed_base: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.index <= 5:
            raise ValueError(f"BAR index {self.index} out of range 0..5")
        minimum = 4 if self.kind is BarKind.IO else 16
        if self.size < minimum or self.size & (self.size - 1):
            raise ValueError(f"BAR size {self.size:#x} must be a power of two >= {minimum}")
        if self.kind is BarKind.MEM64 and self.index == 5:
            raise ValueError("a 64-bit BAR cannot start in slot 5")
        if self.kind is BarKind.IO and self.prefetchable:
            raise ValueError("IO BARs are never prefetchable")

    @property
    def type_bits(self) -> int:
        if self.kind is BarKind.IO:
            return BAR_IO
        bits = BAR_MEM64 if self.kind is BarKind.MEM64 else 0
        if self.prefetchable:
            bits |= BAR_PREFETCH
        return bits

    @property
    def type_mask(self) -> int:
        return 0x3 if self.kind is BarKind.IO else 0xF


def bar_sizing_mask(size: int, type_bits: int, type_mask: int = 0xF) -> int:
    """Value read back from a 32-bit BAR after writing all-ones."""
    return ((~(size - 1)) & 0xFFFFFFFF & ~type_mask) | type_bits


@dataclass
class MsiCapability:
    offset: int
    enabled: bool
    message_address: int
    message_data: int


@dataclass
class MsiXCapability:
    offset: int
    enabled: bool
    function_masked: bool
    table_size: int
    table_bar: int
    table_offset: int
    pba_bar: int
    pba_offset: int

    def __post_init__(self):
        if self.table_size < 1:
            raise ValueError("MSI-X table_size must be >= 1")
        if self.table_bar == self.pba_bar:
            t0, t1 = self.table_offset, self.table_offset + self.table_size * MSIX_ENTRY_SIZE
            p0, p1 = self.pba_offset, self.pba_offset + self.pba_size
            if t0 < p1 and p0 < t1:
                raise ValueError("MSI-X table and PBA overlap")

    @property
    def table_bytes(self) -> int:
        return self.table_size * MSIX_ENTRY_SIZE

    @property
    def pba_size(self) -> int:
        return ((self.table_size + 63) // 64) * 8


@dataclass
class MsiXTableEntry:
    message_address: int = 0
    message_data: int = 0
    masked: bool = True

    def pack(self) -> bytes:
        return struct.pack("<QII", self.message_address, self.message_data,
                           MSIX_ENTRY_CTRL_MASKED if self.masked else 0)

    @classmethod
    def unpack(cls, raw: bytes) -> "MsiXTableEntry":
        addr, data, ctrl = struct.unpack("<QII", bytes(raw[:MSIX_ENTRY_SIZE]))
        return cls(addr, data, bool(ctrl & MSIX_ENTRY_CTRL_MASKED))


class ConfigReader(Protocol):
    def read(self, offset: int, width: int) -> int: ...


class ConfigSpace:
    """256-byte type-0 header plus MSI/MSI-X capabilities."""

    def __init__(self, vendor_id: int, device_id: int, *, class_code: int = 0,
                 revision: int = 0, interrupt_pin: Pin = Pin.NONE,
                 bars: tuple[BarDefinition, ...] | list[BarDefinition] = ()):
        self.raw = bytearray(CONFIG_SPACE_SIZE)
        self.wmask = bytearray(CONFIG_SPACE_SIZE)
        self.bars: dict[int, BarDefinition] = {}
        self._cap_tail: Optional[int] = None
        self._cap_ranges: list[tuple[int, int]] = []

        self._put(VENDOR_ID, 2, vendor_id)
        self._put(DEVICE_ID, 2, device_id)
        self._put(REVISION_ID, 1, revision)
        self._put(CLASS_CODE, 3, class_code)
        self._put(INTERRUPT_PIN, 1, int(interrupt_pin))
        self._put_mask(COMMAND, 2, CMD_IO_ENABLE | CMD_MEMORY_ENABLE | CMD_BUS_MASTER
                       | CMD_INTX_DISABLE)
        self._put_mask(INTERRUPT_LINE, 1, 0xFF)
        for bar in bars:
            self.add_bar(bar)
        self._reset_raw = bytes(self.raw)

    # raw helpers
    def _put(self, offset: int, width: int, value: int) -> None:
        self.raw[offset:offset + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    def _put_mask(self, offset: int, width: int, mask: int) -> None:
        self.wmask[offset:offset + width] = mask.to_bytes(width, "little")

    def add_bar(self, bar: BarDefinition) -> None:
        slots = (bar.index, bar.index + 1) if bar.kind is BarKind.MEM64 else (bar.index,)
        for slot in slots:
            if slot in self.bars or any(b.kind is BarKind.MEM64 and b.index + 1 == slot
                                        for b in self.bars.values()):
                raise ValueError(f"BAR slot {slot} already in use")
        self.bars[bar.index] = bar
        off = BAR0 + 4 * bar.index
        self._put(off, 4, bar.type_bits)
        self._put_mask(off, 4, ~(bar.size - 1) & 0xFFFFFFFF & ~bar.type_mask)
        if bar.kind is BarKind.MEM64:
            self._put_mask(off + 4, 4, (~(bar.size - 1) >> 32) & 0xFFFFFFFF)

    def _link_capability(self, cap_id: int, offset: int, size: int) -> None:
        if offset < 0x40 or offset % 4 or offset + size > CONFIG_SPACE_SIZE:
            raise ValueError(f"capability offset {offset:#x} invalid")
        for start, end in self._cap_ranges:
            if offset < end and start < offset + size:
                raise ValueError(f"capability at {offset:#x} overlaps another")
        self._cap_ranges.append((offset, offset + size))
        self.raw[offset] = cap_id
        self.raw[offset + 1] = 0
        if self._cap_tail is None:
            self.raw[CAPABILITIES_POINTER] = offset
        else:
            self.raw[self._cap_tail + 1] = offset
        self._cap_tail = offset
        self._put(STATUS, 2, self.read(STATUS, 2) | STATUS_CAP_LIST)

    def add_msi(self, offset: int) -> None:
        self._link_capability(CAP_ID_MSI, offset, MSI_CAP_SIZE)
        self._put(offset + MSI_CTRL, 2, MSI_CTRL_64BIT)
        self._put_mask(offset + MSI_CTRL, 2, MSI_CTRL_ENABLE)
        self._put_mask(offset + MSI_ADDR_LO, 4, 0xFFFFFFFC)
        self._put_mask(offset + MSI_ADDR_HI, 4, 0xFFFFFFFF)
        self._put_mask(offset + MSI_DATA, 2, 0xFFFF)
        self._reset_raw = bytes(self.raw)

    def add_msix(self, offset: int, table_size: int, table_bar: int, table_offset: int,
                 pba_bar: int, pba_offset: int) -> None:
        if not 1 <= table_size <= 2048:
            raise ValueError("MSI-X table size must be 1..2048")
        if table_offset % 8 or pba_offset % 8:
            raise ValueError("MSI-X table/PBA offsets must be 8-byte aligned")
        # validates the overlap invariant
        MsiXCapability(offset, False, False, table_size, table_bar, table_offset,
                       pba_bar, pba_offset)
        self._link_capability(CAP_ID_MSIX, offset, MSIX_CAP_SIZE)
        self._put(offset + MSIX_CTRL, 2, table_size - 1)
        self._put_mask(offset + MSIX_CTRL, 2, MSIX_CTRL_ENABLE | MSIX_CTRL_MASKALL)
        self._put(offset + MSIX_TABLE, 4, table_offset | table_bar)
        self._put(offset + MSIX_PBA, 4, pba_offset | pba_bar)
        self._reset_raw = bytes(self.raw)

    @classmethod
    def from_bytes(cls, raw: bytes, bars: list[BarDefinition] | tuple = ()) -> "ConfigSpace":
        """Wrap config bytes read from elsewhere (e.g. a real device).

        Write masks are rebuilt from ``bars`` and from the capabilities
        found in ``raw``.
        """
        if len(raw) != CONFIG_SPACE_SIZE:
            raise ValueError(f"config space must be {CONFIG_SPACE_SIZE} bytes")
        cfg = cls.__new__(cls)
        cfg.raw = bytearray(raw)
        cfg.wmask = bytearray(CONFIG_SPACE_SIZE)
        cfg.bars = {}
        cfg._cap_tail = None
        cfg._cap_ranges = []
        cfg._put_mask(COMMAND, 2, CMD_IO_ENABLE | CMD_MEMORY_ENABLE | CMD_BUS_MASTER
                      | CMD_INTX_DISABLE)
        cfg._put_mask(INTERRUPT_LINE, 1, 0xFF)
        cfg.raw[BAR0:BAR0 + 24] = bytes(24)
        for bar in bars:
            cfg.add_bar(bar)
        for cap_id, off in capability_walk(cfg):
            if cap_id == CAP_ID_MSI:
                cfg._put_mask(off + MSI_CTRL, 2, MSI_CTRL_ENABLE)
                cfg._put_mask(off + MSI_ADDR_LO, 4, 0xFFFFFFFC)
                if cfg.read(off + MSI_CTRL, 2) & MSI_CTRL_64BIT:
                    cfg._put_mask(off + MSI_ADDR_HI, 4, 0xFFFFFFFF)
                    cfg._put_mask(off + MSI_DATA, 2, 0xFFFF)
                else:
                    cfg._put_mask(off + MSI_ADDR_HI, 2, 0xFFFF)
            elif cap_id == CAP_ID_MSIX:
                cfg._put_mask(off + MSIX_CTRL, 2, MSIX_CTRL_ENABLE | MSIX_CTRL_MASKALL)
        cfg._reset_raw = bytes(cfg.raw)
        return cfg

    def reset(self) -> None:
        self.raw[:] = self._reset_raw

    # access
    def read(self, offset: int, width: int) -> int:
        return config_read_field(self, offset, width)

    def write(self, offset: int, width: int, value: int) -> None:
        if width not in (1, 2, 4) or offset < 0 or offset + width > CONFIG_SPACE_SIZE:
            raise ValueError(f"config write [{offset:#x}, +{width}) out of range")
        for i in range(width):
            byte = (value >> (8 * i)) & 0xFF
            m = self.wmask[offset + i]
            self.raw[offset + i] = (self.raw[offset + i] & ~m & 0xFF) | (byte & m)

    def write_bytes(self, offset: int, data: bytes) -> None:
        for i, byte in enumerate(data):
            self.write(offset + i, 1, byte)

    # named views
    vendor_id = property(lambda self: self.read(VENDOR_ID, 2))
    device_id = property(lambda self: self.read(DEVICE_ID, 2))
    command = property(lambda self: self.read(COMMAND, 2))
    status = property(lambda self: self.read(STATUS, 2))
    capabilities_pointer = property(lambda self: self.read(CAPABILITIES_POINTER, 1))
    interrupt_line = property(lambda self: self.read(INTERRUPT_LINE, 1))

    @property
    def interrupt_pin(self) -> Pin:
        value = self.read(INTERRUPT_PIN, 1)
        return Pin(value) if value <= 4 else Pin.NONE

    @property
    def memory_enabled(self) -> bool:
        return bool(self.command & CMD_MEMORY_ENABLE)

    @property
    def io_enabled(self) -> bool:
        return bool(self.command & CMD_IO_ENABLE)

    @property
    def bus_master(self) -> bool:
        return bool(self.command & CMD_BUS_MASTER)

    def bar_register(self, index: int) -> int:
        return self.read(BAR0 + 4 * index, 4)

    def bar_base(self, index: int) -> Optional[int]:
        """Programmed base of BAR ``index``, or None while unset (zero)."""
        bar = self.bars.get(index)
        if bar is None:
            return None
        base = self.bar_register(index) & ~bar.type_mask & 0xFFFFFFFF
        if bar.kind is BarKind.MEM64:
            base |= self.bar_register(index + 1) << 32
        return base or None

    def bar_definitions(self) -> list[BarDefinition]:
        out = []
        for index in sorted(self.bars):
            bar = self.bars[index]
            out.append(BarDefinition(bar.index, bar.size, bar.kind, bar.prefetchable,
                                     self.bar_base(index)))
        return out

    def find_capability(self, cap_id: int) -> Optional[int]:
        for cid, off in capability_walk(self):
            if cid == cap_id:
                return off
        return None

    def msi(self) -> Optional[MsiCapability]:
        off = self.find_capability(CAP_ID_MSI)
        return None if off is None else parse_msi(self, off)

    def msix(self) -> Optional[MsiXCapability]:
        off = self.find_capability(CAP_ID_MSIX)
        return None if off is None else parse_msix(self, off)


def config_read_field(cfg, offset: int, width: int) -> int:
    """Little-endian field of ``width`` bytes at ``offset``."""
    if width not in (1, 2, 4) or offset < 0 or offset + width > CONFIG_SPACE_SIZE:
        raise ValueError(f"config read [{offset:#x}, +{width}) out of range")
    return int.from_bytes(cfg.raw[offset:offset + width], "little")


def bar_write(cfg: ConfigSpace, index: int, value: int) -> None:
    if not 0 <= index <= 5:
        raise ValueError(f"BAR index {index} out of range 0..5")
    cfg.write(BAR0 + 4 * index, 4, value & 0xFFFFFFFF)


def capability_walk(cfg: ConfigReader) -> list[tuple[int, int]]:
    """Follow the capability list; ``[(cap_id, offset), ...]`` in chain order.

    Works on anything with ``read(offset, width)``, so a driver can walk a
    remote device through bus accesses.
    """
    if not cfg.read(STATUS, 2) & STATUS_CAP_LIST:
        return []
    out = []
    seen = set()
    ptr = cfg.read(CAPABILITIES_POINTER, 1) & 0xFC
    while ptr:
        if ptr in seen:
            raise ConfigError(f"capability list loops back to {ptr:#x}")
        if ptr < 0x40 or ptr + 2 > CONFIG_SPACE_SIZE:
            raise ConfigError(f"capability pointer {ptr:#x} outside device-specific area")
        seen.add(ptr)
        out.append((cfg.read(ptr, 1), ptr))
        ptr = cfg.read(ptr + 1, 1) & 0xFC
    return out


def parse_msi(cfg: ConfigReader, off: int) -> MsiCapability:
    ctrl = cfg.read(off + MSI_CTRL, 2)
    addr = cfg.read(off + MSI_ADDR_LO, 4)
    if ctrl & MSI_CTRL_64BIT:
        addr |= cfg.read(off + MSI_ADDR_HI, 4) << 32
        data = cfg.read(off + MSI_DATA, 2)
    else:
        data = cfg.read(off + MSI_ADDR_HI, 2)
    return MsiCapability(off, bool(ctrl & MSI_CTRL_ENABLE), addr, data)


def parse_msix(cfg: ConfigReader, off: int) -> MsiXCapability:
    ctrl = cfg.read(off + MSIX_CTRL, 2)
    table = cfg.read(off + MSIX_TABLE, 4)
    pba = cfg.read(off + MSIX_PBA, 4)
    return MsiXCapability(off, bool(ctrl & MSIX_CTRL_ENABLE), bool(ctrl & MSIX_CTRL_MASKALL),
                          (ctrl & 0x7FF) + 1, table & 0x7, table & ~0x7,
                          pba & 0x7, pba & ~0x7)


class PciTargetSocket:
    """Device side of a PCI link.

    ``handler(txn)`` services forward transactions; ``describe()`` returns
    the configuration space the host bridge should decode against.
    """

    def __init__(self, name: str, handler: Callable[[PciPayload], None],
                 describe: Callable[[], ConfigSpace]):
        self.name = name
        self.handler = handler
        self.describe = describe
        self.peer: Optional[PciInitiatorSocket] = None

    def send_backward(self, msg: PciBackwardMessage) -> None:
        if self.peer is None:
            raise ElaborationError(f"{self.name}: backward path not bound")
        self.peer.backward(self, msg)


class PciInitiatorSocket:
    """Host side of a PCI link, receiving backward interrupt messages."""

    def __init__(self, kernel: Kernel, name: str,
                 on_backward: Callable[["PciInitiatorSocket", PciBackwardMessage], None]):
        self.kernel = kernel
        self.name = name
        self.on_backward = on_backward
        self.peer: Optional[PciTargetSocket] = None

    def bind(self, target: PciTargetSocket) -> None:
        if self.kernel.elaborated:
            raise ElaborationError(f"{self.name}: binding after elaboration")
        if self.peer is not None or target.peer is not None:
            raise ElaborationError(f"{self.name}: PCI sockets bind one-to-one")
        self.peer = target
        target.peer = self

    def transport(self, txn: PciPayload) -> Response:
        if self.peer is None:
            raise ElaborationError(f"{self.name}: socket not bound")
        txn.response = Response.INCOMPLETE
        self.peer.handler(txn)
        if txn.response is Response.INCOMPLETE:
            raise RuntimeError(f"{self.peer.name}: PCI transaction left without response")
        return txn.response

    def backward(self, _target: PciTargetSocket, msg: PciBackwardMessage) -> None:
        self.on_backward(self, msg)
