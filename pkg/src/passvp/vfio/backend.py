"""Real-device backend on top of the Linux VFIO user-space driver interface."""

from __future__ import annotations

import ctypes
import errno
import logging
import mmap
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..backend import (BackendError, DeviceBackend, DmaPerm, IrqEvent, IrqKind,
                       RegionInfo)
from ..pci import (BAR0, BAR_IO, BAR_MEM64, CONFIG_SPACE_SIZE, MSIX_ENTRY_SIZE, BarKind,
                   ConfigError, Direction, capability_walk, CAP_ID_MSIX, parse_msix)
from ..sim import Response
from . import uapi
from .irq import IrqInbox, IrqListener

log = logging.getLogger(__name__)

ADDRESS_RE = re.compile(r"^[0-9a-fA-F]{4}:[0-9a-fA-F]{2}:[0-9a-fA-F]{2}\.[0-7]$")
PAGE_SIZE = mmap.PAGESIZE

_IRQ_INDEX = {IrqKind.LEGACY: uapi.VFIO_PCI_INTX_IRQ_INDEX,
              IrqKind.MSI: uapi.VFIO_PCI_MSI_IRQ_INDEX,
              IrqKind.MSIX: uapi.VFIO_PCI_MSIX_IRQ_INDEX}
_WIDTH_TYPES = {1: ctypes.c_uint8, 2: ctypes.c_uint16, 4: ctypes.c_uint32, 8: ctypes.c_uint64}


def validate_address(address: str) -> str:
    if not isinstance(address, str) or not ADDRESS_RE.fullmatch(address):
        raise ValueError(f"malformed PCI address {address!r}, expected DDDD:BB:DD.F")
    return address.lower()


def check_dma_args(iova: int, vaddr: int, size: int, page: int = PAGE_SIZE) -> None:
    """Argument checks for an IOMMU map, done before any system call."""
    if size <= 0:
        raise ValueError(f"DMA size must be positive, got {size}")
    for what, value in (("iova", iova), ("buffer address", vaddr), ("size", size)):
        if value % page:
            raise ValueError(f"DMA {what} {value:#x} is not {page:#x}-aligned")


@dataclass(frozen=True)
class Region:
    index: int
    offset: int
    size: int
    flags: int

    @property
    def mappable(self) -> bool:
        return bool(self.flags & uapi.VFIO_REGION_INFO_FLAG_MMAP)


def bar_kinds(config: bytes, regions: dict[int, Region]) -> list[RegionInfo]:
    """Pair VFIO BAR regions with their type from the config-space BAR registers."""
    out = []
    for index in range(6):
        region = regions.get(index)
        if region is None or region.size == 0:
            continue
        reg = int.from_bytes(config[BAR0 + 4 * index:BAR0 + 4 * index + 4], "little")
        if reg & BAR_IO:
            kind = BarKind.IO
        elif reg & 0x6 == BAR_MEM64:
            kind = BarKind.MEM64
        else:
            kind = BarKind.MEM32
        out.append(RegionInfo(index, region.size, kind, region.mappable))
    return out


def group_members(group: str, sysfs_root: Path) -> list[tuple[str, str]]:
    """``(address, driver)`` for every device in an IOMMU group."""
    base = sysfs_root / "kernel" / "iommu_groups" / group / "devices"
    members = []
    for dev in sorted(base.iterdir()) if base.is_dir() else ():
        drv = dev / "driver"
        members.append((dev.name, os.path.basename(os.readlink(drv)) if drv.is_symlink() else "none"))
    return members


class MsixTableShadow:
    """Software copy of the MSI-X table.

    The host kernel owns the real table of an assigned device, so guest
    programming is kept here and served back on reads.
    """

    VECTOR_CTRL_MASKED = 1

    def __init__(self, bar: int, offset: int, vectors: int):
        self.bar = bar
        self.offset = offset
        self.data = bytearray(vectors * MSIX_ENTRY_SIZE)
        for v in range(vectors):
            self.data[v * MSIX_ENTRY_SIZE + 12] = self.VECTOR_CTRL_MASKED

    def covers(self, bar: int, offset: int, length: int) -> bool:
        return bar == self.bar and self.offset <= offset and \
            offset + length <= self.offset + len(self.data)

    def access(self, offset: int, data: bytearray, direction: Direction) -> None:
        rel = offset - self.offset
        if direction is Direction.READ:
            data[:] = self.data[rel:rel + len(data)]
        else:
            self.data[rel:rel + len(data)] = data


class VfioBackend(DeviceBackend):
    deterministic = False

    def __init__(self, sysfs_address: str, *, sysfs_root: str = "/sys",
                 dev_root: str = "/dev/vfio"):
        self.address = validate_address(sysfs_address)
        self.sysfs_root = Path(sysfs_root)
        self.dev_root = Path(dev_root)
        self.group_id: Optional[int] = None
        self.container = self.group = self.device = -1
        self.device_flags = 0
        self.regions: dict[int, Region] = {}
        self.irq_counts: dict[int, int] = {}
        self.irq_flags: dict[int, int] = {}
        self._maps: dict[int, mmap.mmap] = {}
        self._fds: dict[int, list[int]] = {}
        self._active: Optional[IrqKind] = None
        self._legacy_wanted = False
        self._dma: dict[int, int] = {}
        self.inbox = IrqInbox()
        self._listener: Optional[IrqListener] = None
        self.msix_table: Optional[MsixTableShadow] = None
        self.readback_mismatches: list[tuple[int, bytes, bytes]] = []

    # open / close

    def _device_dir(self) -> Path:
        return self.sysfs_root / "bus" / "pci" / "devices" / self.address

    def preflight(self) -> str:
        """Sysfs checks; returns the IOMMU group name."""
        dev = self._device_dir()
        if not dev.exists():
            raise BackendError(f"{self.address}: no such PCI device")
        drv_link = dev / "driver"
        driver = os.path.basename(os.readlink(drv_link)) if drv_link.is_symlink() else None
        if driver != "vfio-pci":
            hint = (f"echo vfio-pci > {dev}/driver_override; "
                    + (f"echo {self.address} > {dev}/driver/unbind; " if driver else "")
                    + f"echo {self.address} > /sys/bus/pci/drivers_probe")
            raise BackendError(f"{self.address}: bound to {driver or 'no driver'}, "
                               f"not vfio-pci. Bind it first: {hint}")
        group_link = dev / "iommu_group"
        if not group_link.is_symlink():
            raise BackendError(f"{self.address}: IOMMU unavailable (no iommu_group; "
                               "enable intel_iommu=on / amd_iommu=on or the SMMU)")
        return os.path.basename(os.readlink(group_link))

    def open(self) -> "VfioBackend":
        group = self.preflight()
        self.group_id = int(group)
        try:
            self.container = os.open(self.dev_root / "vfio", os.O_RDWR | os.O_CLOEXEC)
        except OSError as exc:
            raise BackendError(f"IOMMU unavailable: cannot open {self.dev_root / 'vfio'}: "
                               f"{exc.strerror}") from None
        try:
            self._open_group(group)
            self._open_device()
        except BaseException:
            self.close()
            raise
        self._listener = IrqListener(self.inbox)
        self._listener.start()
        return self

    def _open_group(self, group: str) -> None:
        if uapi.ioctl(self.container, uapi.VFIO_GET_API_VERSION) != uapi.VFIO_API_VERSION:
            raise BackendError("unsupported VFIO API version")
        iommu = next((t for t in (uapi.VFIO_TYPE1v2_IOMMU, uapi.VFIO_TYPE1_IOMMU)
                      if uapi.ioctl(self.container, uapi.VFIO_CHECK_EXTENSION, t)), None)
        if iommu is None:
            raise BackendError("IOMMU unavailable: container lacks type1 IOMMU support")
        try:
            self.group = os.open(self.dev_root / group, os.O_RDWR | os.O_CLOEXEC)
        except OSError as exc:
            raise BackendError(f"cannot open IOMMU group {group}: {exc.strerror}") from None
        status = uapi.new(uapi.vfio_group_status)
        uapi.ioctl(self.group, uapi.VFIO_GROUP_GET_STATUS, status)
        if not status.flags & uapi.VFIO_GROUP_FLAGS_VIABLE:
            members = ", ".join(f"{a} ({d})" for a, d in group_members(group, self.sysfs_root))
            raise BackendError(f"IOMMU group {group} is not viable; every device in it must "
                               f"be bound to vfio-pci or unbound: {members}")
        uapi.ioctl(self.group, uapi.VFIO_GROUP_SET_CONTAINER, ctypes.c_int(self.container))
        uapi.ioctl(self.container, uapi.VFIO_SET_IOMMU, iommu)

    def _open_device(self) -> None:
        name = bytearray(self.address.encode() + b"\0")
        try:
            self.device = uapi.ioctl(self.group, uapi.VFIO_GROUP_GET_DEVICE_FD, name)
        except OSError as exc:
            raise BackendError(f"{self.address}: cannot get device fd: {exc.strerror}") from None
        info = uapi.new(uapi.vfio_device_info)
        uapi.ioctl(self.device, uapi.VFIO_DEVICE_GET_INFO, info)
        if not info.flags & uapi.VFIO_DEVICE_FLAGS_PCI:
            raise BackendError(f"{self.address}: not a vfio-pci device")
        self.device_flags = info.flags
        for index in range(min(info.num_regions, uapi.VFIO_PCI_NUM_REGIONS)):
            reg = uapi.new(uapi.vfio_region_info, index=index)
            try:
                uapi.ioctl(self.device, uapi.VFIO_DEVICE_GET_REGION_INFO, reg)
            except OSError:
                continue
            self.regions[index] = Region(index, reg.offset, reg.size, reg.flags)
        for index in range(min(info.num_irqs, uapi.VFIO_PCI_NUM_IRQS)):
            irq = uapi.new(uapi.vfio_irq_info, index=index)
            uapi.ioctl(self.device, uapi.VFIO_DEVICE_GET_IRQ_INFO, irq)
            self.irq_counts[index] = irq.count
            self.irq_flags[index] = irq.flags
        if uapi.VFIO_PCI_CONFIG_REGION_INDEX not in self.regions:
            raise BackendError(f"{self.address}: no config region")
        for r in bar_kinds(self.config_read(0, CONFIG_SPACE_SIZE), self.regions):
            if r.mappable and r.kind is not BarKind.IO:
                self._map_region(r.bar)
        self._setup_msix_shadow()

    def _map_region(self, bar: int) -> None:
        region = self.regions[bar]
        length = -(-region.size // PAGE_SIZE) * PAGE_SIZE
        try:
            self._maps[bar] = mmap.mmap(self.device, length, mmap.MAP_SHARED,
                                        mmap.PROT_READ | mmap.PROT_WRITE, offset=region.offset)
        except OSError as exc:
            log.info("BAR%d not mappable (%s); using pread/pwrite", bar, exc.strerror)

    def _setup_msix_shadow(self) -> None:
        class _Cfg:
            read = staticmethod(lambda off, n: int.from_bytes(self.config_read(off, n), "little"))
        try:
            caps = dict(capability_walk(_Cfg))
        except ConfigError as exc:
            log.warning("%s: capability list: %s", self.address, exc)
            return
        if CAP_ID_MSIX in caps:
            cap = parse_msix(_Cfg, caps[CAP_ID_MSIX])
            self.msix_table = MsixTableShadow(cap.table_bar, cap.table_offset, cap.table_size)

    def close(self) -> None:
        if self._listener is not None:
            self._listener.stop()
            self._listener = None
        for fds in self._fds.values():
            for fd in fds:
                os.close(fd)
        self._fds.clear()
        for m in self._maps.values():
            m.close()
        self._maps.clear()
        for fd in (self.device, self.group, self.container):
            if fd >= 0:
                os.close(fd)
        self.device = self.group = self.container = -1

    # configuration space

    def _config_region(self) -> Region:
        if self.device < 0:
            raise BackendError("device not open")
        return self.regions[uapi.VFIO_PCI_CONFIG_REGION_INDEX]

    def config_read(self, offset: int, length: int) -> bytes:
        region = self._config_region()
        if offset < 0 or offset + length > region.size:
            raise BackendError(f"config read {offset:#x}+{length} beyond {region.size:#x}")
        data = os.pread(self.device, length, region.offset + offset)
        if len(data) != length:
            raise BackendError(f"short config read at {offset:#x}: {len(data)}/{length}")
        return data

    def config_write(self, offset: int, data: bytes) -> None:
        region = self._config_region()
        if offset < 0 or offset + len(data) > region.size:
            raise BackendError(f"config write {offset:#x}+{len(data)} beyond {region.size:#x}")
        n = os.pwrite(self.device, bytes(data), region.offset + offset)
        if n != len(data):
            raise BackendError(f"short config write at {offset:#x}: {n}/{len(data)}")
        # the host kernel may drop or rewrite fields; record it rather than guess why
        back = self.config_read(offset, len(data))
        if back != bytes(data):
            self.readback_mismatches.append((offset, bytes(data), back))
            log.debug("config %#x: wrote %s, reads back %s", offset, bytes(data).hex(), back.hex())

    # BARs

    def region_info(self) -> list[RegionInfo]:
        return bar_kinds(self.config_read(0, CONFIG_SPACE_SIZE), self.regions)

    def region_access(self, bar: int, offset: int, data: bytearray,
                      direction: Direction) -> Response:
        region = self.regions.get(bar)
        n = len(data)
        if region is None or bar > uapi.VFIO_PCI_BAR5_REGION_INDEX or offset < 0 \
                or offset + n > region.size:
            return Response.ADDRESS_ERROR
        if self.msix_table is not None and self.msix_table.covers(bar, offset, n):
            self.msix_table.access(offset, data, direction)
            return Response.OK
        mapping = self._maps.get(bar)
        if mapping is not None and n in _WIDTH_TYPES and offset % n == 0:
            # one load/store of the access width, so device registers are not torn
            cell = _WIDTH_TYPES[n].from_buffer(mapping, offset)
            if direction is Direction.READ:
                data[:] = cell.value.to_bytes(n, "little")
            else:
                cell.value = int.from_bytes(data, "little")
            del cell
            return Response.OK
        try:
            if direction is Direction.READ:
                got = os.pread(self.device, n, region.offset + offset)
                if len(got) != n:
                    return Response.ADDRESS_ERROR
                data[:] = got
            elif os.pwrite(self.device, bytes(data), region.offset + offset) != n:
                return Response.ADDRESS_ERROR
        except OSError as exc:
            log.warning("BAR%d access at %#x failed: %s", bar, offset, exc.strerror)
            return Response.ADDRESS_ERROR
        return Response.OK

    # DMA

    def map_dma(self, iova: int, host_buffer: memoryview, size: int,
                perms: DmaPerm = DmaPerm.RW) -> None:
        if host_buffer.readonly:
            raise ValueError("DMA buffer must be writable")
        if size > host_buffer.nbytes:
            raise ValueError(f"DMA size {size:#x} exceeds buffer ({host_buffer.nbytes:#x})")
        vaddr = ctypes.addressof(ctypes.c_char.from_buffer(host_buffer))
        check_dma_args(iova, vaddr, size)
        flags = ((uapi.VFIO_DMA_MAP_FLAG_READ if perms & DmaPerm.READ else 0)
                 | (uapi.VFIO_DMA_MAP_FLAG_WRITE if perms & DmaPerm.WRITE else 0))
        req = uapi.new(uapi.vfio_iommu_type1_dma_map, flags=flags, vaddr=vaddr,
                       iova=iova, size=size)
        try:
            uapi.ioctl(self.container, uapi.VFIO_IOMMU_MAP_DMA, req)
        except OSError as exc:
            raise BackendError(f"IOMMU map {iova:#x}+{size:#x} failed: "
                               f"{errno.errorcode.get(exc.errno, exc.errno)} {exc.strerror}") from None
        self._dma[iova] = size

    def unmap_dma(self, iova: int, size: int) -> None:
        if self._dma.pop(iova, None) is None or self.container < 0:
            return
        req = uapi.new(uapi.vfio_iommu_type1_dma_unmap, iova=iova, size=size)
        try:
            uapi.ioctl(self.container, uapi.VFIO_IOMMU_UNMAP_DMA, req)
        except OSError as exc:
            raise BackendError(f"IOMMU unmap {iova:#x} failed: {exc.strerror}") from None

    # interrupts

    def supported_irqs(self) -> list[str]:
        return [k.value for k, i in _IRQ_INDEX.items() if self.irq_counts.get(i, 0)]

    def irq_setup(self, kind: IrqKind, count: int) -> None:
        index = _IRQ_INDEX[kind]
        available = self.irq_counts.get(index, 0)
        if count and (available == 0 or count > available):
            raise BackendError(f"{kind.value} x{count} unsupported; device supports "
                               f"{', '.join(self.supported_irqs()) or 'none'} "
                               f"({kind.value} max {available})")
        if kind is IrqKind.LEGACY:
            self._legacy_wanted = bool(count)
        if count == 0:
            self._disable(kind)
            if kind is not IrqKind.LEGACY and self._legacy_wanted:
                self._enable(IrqKind.LEGACY, 1)
            return
        if self._active is not None:
            self._disable(self._active)
        self._enable(kind, count)

    def _enable(self, kind: IrqKind, count: int) -> None:
        index = _IRQ_INDEX[kind]
        fds = [os.eventfd(0, os.EFD_NONBLOCK | os.EFD_CLOEXEC) for _ in range(count)]
        req = uapi.irq_set(index, uapi.VFIO_IRQ_SET_DATA_EVENTFD
                           | uapi.VFIO_IRQ_SET_ACTION_TRIGGER, 0, tuple(fds))
        try:
            uapi.ioctl(self.device, uapi.VFIO_DEVICE_SET_IRQS, req)
        except OSError as exc:
            for fd in fds:
                os.close(fd)
            raise BackendError(f"{kind.value} setup failed: {exc.strerror}") from None
        for vector, fd in enumerate(fds):
            self._listener.add(fd, kind, vector)
        self._fds[index] = fds
        self._active = kind

    def _disable(self, kind: IrqKind) -> None:
        index = _IRQ_INDEX[kind]
        fds = self._fds.pop(index, None)
        if fds is None:
            return
        req = uapi.irq_set(index, uapi.VFIO_IRQ_SET_DATA_NONE
                           | uapi.VFIO_IRQ_SET_ACTION_TRIGGER, count=0)
        try:
            uapi.ioctl(self.device, uapi.VFIO_DEVICE_SET_IRQS, req)
        finally:
            for fd in fds:
                self._listener.remove(fd)
                os.close(fd)
            if self._active is kind:
                self._active = None

    def unmask_legacy(self) -> None:
        if self._active is not IrqKind.LEGACY:
            return
        req = uapi.irq_set(uapi.VFIO_PCI_INTX_IRQ_INDEX, uapi.VFIO_IRQ_SET_DATA_NONE
                           | uapi.VFIO_IRQ_SET_ACTION_UNMASK, count=1)
        uapi.ioctl(self.device, uapi.VFIO_DEVICE_SET_IRQS, req)

    def poll_irqs(self) -> list[IrqEvent]:
        return self.inbox.drain()

    def reset(self) -> None:
        if self.device_flags & uapi.VFIO_DEVICE_FLAGS_RESET:
            uapi.ioctl(self.device, uapi.VFIO_DEVICE_RESET)
        else:
            log.info("%s: device has no reset method", self.address)
