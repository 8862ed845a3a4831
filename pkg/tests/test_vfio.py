"""VFIO backend logic that needs no device, plus one gated hardware check."""

import ctypes
import mmap
import os
import threading
import time

import pytest

from passvp.backend import BackendError, IrqKind
from passvp.pci import BarDefinition, BarKind, ConfigSpace, Direction
from passvp.sim import Response
from passvp.vfio import IrqInbox, IrqListener, VfioBackend, check_dma_args, validate_address
from passvp.vfio import uapi
from passvp.vfio.backend import MsixTableShadow, Region, bar_kinds, group_members

ADDR = "0000:01:00.0"
HW_DEVICE = os.environ.get("PASSVP_VFIO_DEVICE")


# ABI layout, checked against the values in linux/vfio.h

@pytest.mark.parametrize("name,value", [
    ("VFIO_GET_API_VERSION", 0x3B64), ("VFIO_CHECK_EXTENSION", 0x3B65),
    ("VFIO_SET_IOMMU", 0x3B66), ("VFIO_GROUP_GET_STATUS", 0x3B67),
    ("VFIO_GROUP_SET_CONTAINER", 0x3B68), ("VFIO_GROUP_GET_DEVICE_FD", 0x3B6A),
    ("VFIO_DEVICE_GET_INFO", 0x3B6B), ("VFIO_DEVICE_GET_REGION_INFO", 0x3B6C),
    ("VFIO_DEVICE_GET_IRQ_INFO", 0x3B6D), ("VFIO_DEVICE_SET_IRQS", 0x3B6E),
    ("VFIO_DEVICE_RESET", 0x3B6F), ("VFIO_IOMMU_MAP_DMA", 0x3B71),
    ("VFIO_IOMMU_UNMAP_DMA", 0x3B72)])
def test_ioctl_numbers(name, value):
    assert getattr(uapi, name) == value


@pytest.mark.parametrize("struct,size", [
    (uapi.vfio_group_status, 8), (uapi.vfio_device_info, 16), (uapi.vfio_region_info, 32),
    (uapi.vfio_irq_info, 16), (uapi.vfio_irq_set_header, 20),
    (uapi.vfio_iommu_type1_dma_map, 32), (uapi.vfio_iommu_type1_dma_unmap, 24)])
def test_struct_sizes(struct, size):
    assert ctypes.sizeof(struct) == size
    assert uapi.new(struct).argsz == size


def test_index_conventions():
    assert uapi.VFIO_PCI_CONFIG_REGION_INDEX == 7
    assert uapi.VFIO_PCI_CONFIG_REGION_INDEX not in range(0, 6)
    assert (uapi.VFIO_PCI_INTX_IRQ_INDEX, uapi.VFIO_PCI_MSI_IRQ_INDEX,
            uapi.VFIO_PCI_MSIX_IRQ_INDEX) == (0, 1, 2)


def test_irq_set_packing():
    raw = uapi.irq_set(2, uapi.VFIO_IRQ_SET_DATA_EVENTFD | uapi.VFIO_IRQ_SET_ACTION_TRIGGER,
                       0, (5, 6, 7))
    argsz, flags, index, start, count = (int.from_bytes(raw[i:i + 4], "little")
                                         for i in range(0, 20, 4))
    assert (argsz, flags, index, start, count) == (32, 0x24, 2, 0, 3)
    assert [int.from_bytes(raw[i:i + 4], "little") for i in range(20, 32, 4)] == [5, 6, 7]
    off = uapi.irq_set(0, uapi.VFIO_IRQ_SET_DATA_NONE | uapi.VFIO_IRQ_SET_ACTION_UNMASK, count=1)
    assert len(off) == 20 and off[16] == 1


# argument validation before any OS interaction

@pytest.mark.parametrize("addr", ["0000:01:00.0", "abcd:ff:1f.7"])
def test_valid_addresses(addr):
    assert validate_address(addr) == addr.lower()


@pytest.mark.parametrize("addr", ["01:00.0", "0000:01:00.8", "0000:01:00", "", "../../etc",
                                  "0000:01:00.0\n"])
def test_malformed_address_rejected_early(addr):
    with pytest.raises(ValueError):
        VfioBackend(addr, sysfs_root="/nonexistent")


@pytest.mark.parametrize("iova,vaddr,size", [(0x1001, 0, 0x1000), (0, 0x10, 0x1000),
                                              (0, 0, 0x1800), (0, 0, 0)])
def test_dma_alignment_checks(iova, vaddr, size):
    with pytest.raises(ValueError):
        check_dma_args(iova, vaddr, size, page=0x1000)


def test_map_dma_validates_before_ioctl():
    be = VfioBackend(ADDR)  # never opened: any ioctl would fail with EBADF
    buf = mmap.mmap(-1, 2 * mmap.PAGESIZE)
    view = memoryview(buf)
    with pytest.raises(ValueError):
        be.map_dma(0x4000_0000, view, mmap.PAGESIZE + 1)
    with pytest.raises(ValueError):
        be.map_dma(0x4000_0001, view, mmap.PAGESIZE)
    with pytest.raises(ValueError):
        be.map_dma(0x4000_0000, view, 4 * mmap.PAGESIZE)
    view.release()
    buf.close()


def test_unsupported_irq_kind_lists_supported():
    be = VfioBackend(ADDR)
    be.irq_counts = {0: 1, 1: 1, 2: 0}
    with pytest.raises(BackendError, match="legacy, msi"):
        be.irq_setup(IrqKind.MSIX, 13)
    be.irq_counts = {0: 1, 1: 1, 2: 8}
    with pytest.raises(BackendError, match="max 8"):
        be.irq_setup(IrqKind.MSIX, 13)


def test_region_access_bounds_without_device():
    be = VfioBackend(ADDR)
    be.regions = {0: Region(0, 0, 0x1000, 0)}
    assert be.region_access(0, 0x1000, bytearray(4), Direction.READ) is Response.ADDRESS_ERROR
    assert be.region_access(3, 0, bytearray(4), Direction.READ) is Response.ADDRESS_ERROR


def test_config_access_requires_open_device():
    with pytest.raises(BackendError):
        VfioBackend(ADDR).config_read(0, 2)


# region table parsing

def test_bar_kinds_from_config_registers():
    cfg = ConfigSpace(1, 2, bars=[BarDefinition(0, 0x1000), BarDefinition(2, 0x4000, BarKind.MEM64),
                                  BarDefinition(4, 0x100, BarKind.IO)])
    mm = uapi.VFIO_REGION_INFO_FLAG_MMAP
    regions = {0: Region(0, 0, 0x1000, mm), 1: Region(1, 0, 0, 0), 2: Region(2, 0, 0x4000, mm),
               3: Region(3, 0, 0, 0), 4: Region(4, 0, 0x100, 0), 7: Region(7, 0, 256, 0)}
    infos = bar_kinds(bytes(cfg.raw), regions)
    assert [(r.bar, r.kind, r.mappable) for r in infos] == [
        (0, BarKind.MEM32, True), (2, BarKind.MEM64, True), (4, BarKind.IO, False)]


def test_msix_shadow_serves_table():
    sh = MsixTableShadow(0, 0x800, 4)
    buf = bytearray(4)
    sh.access(0x800 + 12, buf, Direction.READ)
    assert buf == b"\x01\x00\x00\x00"
    sh.access(0x810, bytearray(b"\x40\x00\x00\x08"), Direction.WRITE)
    assert sh.data[16:20] == b"\x40\x00\x00\x08"
    assert sh.covers(0, 0x83C, 4) and not sh.covers(0, 0x840, 4) and not sh.covers(1, 0x800, 4)


# open() diagnostics against a synthetic sysfs tree

def _sysfs(tmp_path, driver="vfio-pci", group="7", siblings=()):
    root = tmp_path / "sys"
    dev = root / "bus" / "pci" / "devices" / ADDR
    dev.mkdir(parents=True)
    drivers = root / "bus" / "pci" / "drivers"
    groups = root / "kernel" / "iommu_groups"
    if driver:
        (drivers / driver).mkdir(parents=True, exist_ok=True)
        os.symlink(drivers / driver, dev / "driver")
    if group:
        gdir = groups / group / "devices"
        gdir.mkdir(parents=True)
        os.symlink(groups / group, dev / "iommu_group")
        for addr, drv in ((ADDR, driver), *siblings):
            (gdir / addr).mkdir()
            if drv:
                (drivers / drv).mkdir(parents=True, exist_ok=True)
                os.symlink(drivers / drv, gdir / addr / "driver")
    return root


def test_missing_device(tmp_path):
    with pytest.raises(BackendError, match="no such PCI device"):
        VfioBackend(ADDR, sysfs_root=tmp_path).open()


def test_unbound_device_gets_binding_hint(tmp_path):
    root = _sysfs(tmp_path, driver="ixgbe")
    with pytest.raises(BackendError, match="bound to ixgbe.*driver_override"):
        VfioBackend(ADDR, sysfs_root=root).open()
    root2 = _sysfs(tmp_path / "b", driver=None)
    with pytest.raises(BackendError, match="no driver"):
        VfioBackend(ADDR, sysfs_root=root2).open()


def test_no_iommu_group(tmp_path):
    root = _sysfs(tmp_path, group=None)
    with pytest.raises(BackendError, match="IOMMU unavailable"):
        VfioBackend(ADDR, sysfs_root=root).open()


def test_no_container_device(tmp_path):
    root = _sysfs(tmp_path)
    with pytest.raises(BackendError, match="IOMMU unavailable"):
        VfioBackend(ADDR, sysfs_root=root, dev_root=tmp_path / "nodev").open()


def test_group_members_for_viability_diagnostic(tmp_path):
    root = _sysfs(tmp_path, siblings=[("0000:01:00.1", "snd_hda_intel"), ("0000:01:00.2", None)])
    assert group_members("7", root) == [(ADDR, "vfio-pci"), ("0000:01:00.1", "snd_hda_intel"),
                                        ("0000:01:00.2", "none")]
    assert VfioBackend(ADDR, sysfs_root=root).preflight() == "7"


# interrupt hand-off

def _wait_for(pred, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            raise AssertionError("timed out")
        time.sleep(0.001)


def test_inbox_is_fifo():
    inbox = IrqInbox()
    from passvp.backend import IrqEvent
    for i in range(100):
        inbox.put(IrqEvent(IrqKind.MSIX, i))
    assert [e.index for e in inbox.drain()] == list(range(100))
    assert inbox.drain() == []


def test_listener_no_events_means_empty_poll():
    inbox = IrqInbox()
    lst = IrqListener(inbox)
    lst.start()
    time.sleep(0.02)
    assert inbox.drain() == []
    lst.stop()


def test_listener_lossless_and_ordered():
    inbox = IrqInbox()
    lst = IrqListener(inbox)
    fds = [os.eventfd(0, os.EFD_NONBLOCK) for _ in range(3)]
    for i, fd in enumerate(fds):
        lst.add(fd, IrqKind.MSIX, i)
    lst.start()
    collected = []
    try:
        # sequential signals keep their order
        for vector in (2, 0, 1, 1, 0):
            os.eventfd_write(fds[vector], 1)
            _wait_for(lambda: len(inbox) >= 1)
            collected += inbox.drain()
        assert [e.index for e in collected] == [2, 0, 1, 1, 0]
        # a burst the thread sees as one counter value still yields every event
        lst.remove(fds[0])
        os.eventfd_write(fds[0], 5)
        lst.add(fds[0], IrqKind.MSIX, 0)
        _wait_for(lambda: len(inbox) >= 5)
        time.sleep(0.02)
        assert [e.index for e in inbox.drain()] == [0] * 5
    finally:
        lst.stop()
        for fd in fds:
            os.close(fd)


def test_listener_concurrent_producers_lose_nothing():
    inbox = IrqInbox()
    lst = IrqListener(inbox)
    fds = [os.eventfd(0, os.EFD_NONBLOCK) for _ in range(4)]
    for i, fd in enumerate(fds):
        lst.add(fd, IrqKind.MSI, i)
    lst.start()
    per = 250

    def produce(fd):
        for _ in range(per):
            os.eventfd_write(fd, 1)

    threads = [threading.Thread(target=produce, args=(fd,)) for fd in fds]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = []
    deadline = time.monotonic() + 5
    while len(got) < per * len(fds) and time.monotonic() < deadline:
        got += inbox.drain()
        time.sleep(0.001)
    time.sleep(0.02)
    got += inbox.drain()
    lst.stop()
    for fd in fds:
        os.close(fd)
    assert sorted(e.index for e in got) == sorted(list(range(4)) * per)


# hardware

@pytest.mark.hardware
@pytest.mark.skipif(not HW_DEVICE, reason="set PASSVP_VFIO_DEVICE to a vfio-pci bound device")
def test_hardware_open_config_and_dma():
    be = VfioBackend(HW_DEVICE).open()
    try:
        assert int.from_bytes(be.config_read(0, 2), "little") not in (0, 0xFFFF)
        vendor = be.config_read(0, 2)
        be.config_write(0, b"\x00\x00")
        assert be.config_read(0, 2) == vendor
        bars = be.region_info()
        assert bars
        buf = bytearray(4)
        assert be.region_access(bars[0].bar, 0, buf, Direction.READ) is Response.OK
        ram = mmap.mmap(-1, 0x10000)
        view = memoryview(ram)
        be.map_dma(0x4000_0000, view, 0x10000)
        be.unmap_dma(0x4000_0000, 0x10000)
        view.release()
        ram.close()
    finally:
        be.close()
