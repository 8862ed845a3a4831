import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from passvp.backend import BackendError, DmaPerm, IrqKind
from passvp.mock import (CTRL_IRQ_ENABLE, CTRL_START, ENGINE_ID, HOST_MSI_SENTINEL,
                         MSI_CAP_OFFSET, MSIX_CAP_OFFSET, NUM_VECTORS, PBA_OFFSET, REG_CHECKSUM,
                         REG_CTRL, REG_DST, REG_ID, REG_LEN, REG_SRC, REG_STATUS, STATUS_BUSY,
                         STATUS_DONE, STATUS_ERROR, TABLE_OFFSET, CopyCheckDevice, IommuFault,
                         SimIommuTable)
from passvp.pci import Direction, capability_walk
from passvp.sim import NS, Kernel, Response

IOVA = 0x4000_0000


def make(size=0x4000, **kw):
    k = Kernel()
    dev = CopyCheckDevice(k, **kw)
    mem = memoryview(bytearray(size))
    dev.map_dma(IOVA, mem, size)
    return k, dev, mem


def wr(dev, off, value, width=4):
    assert dev.region_access(0, off, bytearray(value.to_bytes(width, "little")),
                             Direction.WRITE) is Response.OK


def rd(dev, off, width=4):
    buf = bytearray(width)
    assert dev.region_access(0, off, buf, Direction.READ) is Response.OK
    return int.from_bytes(buf, "little")


def enable_msix(dev):
    ctrl = dev.config.read(MSIX_CAP_OFFSET + 2, 2)
    dev.config_write(MSIX_CAP_OFFSET + 2, (ctrl | 0x8000).to_bytes(2, "little"))


def start(dev, src, dst, length, irq=True):
    wr(dev, REG_SRC, src, 8)
    wr(dev, REG_DST, dst, 8)
    wr(dev, REG_LEN, length)
    wr(dev, REG_CTRL, CTRL_START | (CTRL_IRQ_ENABLE if irq else 0))


def test_identity_and_capabilities():
    k, dev, _ = make()
    assert rd(dev, REG_ID) == ENGINE_ID
    assert capability_walk(dev.config) == [(0x05, MSI_CAP_OFFSET), (0x11, MSIX_CAP_OFFSET)]
    msix = dev.config.msix()
    assert msix.table_size == NUM_VECTORS == 13
    assert (msix.table_offset, msix.pba_offset) == (TABLE_OFFSET, PBA_OFFSET)
    assert dev.config.msi().message_address == HOST_MSI_SENTINEL


def test_table_entries_start_masked():
    k, dev, _ = make()
    for v in range(NUM_VECTORS):
        assert rd(dev, TABLE_OFFSET + 16 * v + 12) & 1


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=0, max_size=3000))
def test_copy_checksum_timing_and_vectors(payload):
    k, dev, mem = make()
    enable_msix(dev)
    n = len(payload)
    mem[0:n] = payload
    start(dev, IOVA, IOVA + 0x2000, n)
    assert dev.status & STATUS_BUSY
    k.run_until(n * NS - 1 if n else 0)
    if n:
        assert dev.status & STATUS_BUSY and not dev.poll_irqs()
    k.run_until(n * NS)
    assert dev.status == STATUS_DONE
    assert dev.checksum == sum(payload) % 2**32
    assert bytes(mem[0x2000:0x2000 + n]) == payload
    events = dev.poll_irqs()
    chunks = -(-n // 256)
    assert [e.index for e in events] == [1] * chunks + [0]
    assert all(e.kind is IrqKind.MSIX for e in events)
    assert dev.poll_irqs() == []
    job = dev.jobs[-1]
    assert job.end_ps - job.start_ps == n * NS


def test_chunk_size_parameter():
    k, dev, mem = make(chunk_size=128)
    enable_msix(dev)
    start(dev, IOVA, IOVA + 0x2000, 1000)
    k.run_until(1000 * NS)
    assert [e.index for e in dev.poll_irqs()].count(1) == 8


def test_overlapping_copy_uses_snapshot():
    k, dev, mem = make()
    mem[0:8] = b"abcdefgh"
    start(dev, IOVA, IOVA + 2, 8, irq=False)
    k.run_until(8 * NS)
    assert bytes(mem[2:10]) == b"abcdefgh"


def test_fault_sets_error_without_events():
    k, dev, mem = make(size=0x1000)
    enable_msix(dev)
    start(dev, IOVA, IOVA + 0x0F00, 0x200)
    k.run_until(0x200 * NS)
    assert dev.status == STATUS_ERROR
    assert dev.poll_irqs() == []
    assert dev.jobs[-1].error


def test_start_while_busy_ignored():
    k, dev, mem = make()
    start(dev, IOVA, IOVA + 0x2000, 100)
    wr(dev, REG_CTRL, CTRL_START)
    assert len(dev.jobs) == 1 and dev.ignored_writes == 1


def test_read_only_registers_ignore_writes():
    k, dev, _ = make()
    wr(dev, REG_ID, 0)
    wr(dev, REG_STATUS, 0xFF)
    wr(dev, REG_CHECKSUM, 0xFF)
    assert rd(dev, REG_ID) == ENGINE_ID and rd(dev, REG_STATUS) == 0
    assert dev.ignored_writes == 3


def test_ctrl_start_self_clears():
    k, dev, _ = make()
    start(dev, IOVA, IOVA + 0x100, 4)
    assert rd(dev, REG_CTRL) & CTRL_START == 0


def test_legacy_and_msi_modes_signal_completion_only():
    k, dev, mem = make()
    start(dev, IOVA, IOVA + 0x2000, 600)
    k.run_until(600 * NS)
    (ev,) = dev.poll_irqs()
    assert ev.kind is IrqKind.LEGACY and ev.index == 1
    ctrl = dev.config.read(MSI_CAP_OFFSET + 2, 2)
    dev.config_write(MSI_CAP_OFFSET + 2, (ctrl | 1).to_bytes(2, "little"))
    start(dev, IOVA, IOVA + 0x2000, 600)
    k.run_until(k.now + 600 * NS)
    (ev,) = dev.poll_irqs()
    assert ev.kind is IrqKind.MSI and ev.index == 0


def test_no_events_without_irq_enable():
    k, dev, mem = make()
    enable_msix(dev)
    start(dev, IOVA, IOVA + 0x2000, 10, irq=False)
    k.run_until(10 * NS)
    assert dev.status == STATUS_DONE and dev.poll_irqs() == []


def test_pba_reads_zero():
    k, dev, _ = make()
    assert rd(dev, PBA_OFFSET, 8) == 0


def test_out_of_range_bar_access():
    k, dev, _ = make()
    assert dev.region_access(0, 0x1000, bytearray(4), Direction.READ) is Response.ADDRESS_ERROR
    assert dev.region_access(1, 0, bytearray(4), Direction.READ) is Response.ADDRESS_ERROR


def test_reset_restores_state():
    k, dev, mem = make()
    start(dev, IOVA, IOVA + 0x100, 4)
    k.run_until(4 * NS)
    dev.config_write(0x04, b"\x06\x00")
    dev.reset()
    assert dev.status == 0 and dev.config.command == 0


def test_overlapping_dma_map_rejected():
    k, dev, _ = make()
    with pytest.raises(BackendError):
        dev.map_dma(IOVA + 0x1000, memoryview(bytearray(0x1000)), 0x1000)


def test_iommu_table_permissions_and_bounds():
    t = SimIommuTable()
    buf = memoryview(bytearray(0x2000))
    t.map(0x10_0000, buf[:0x1000], 0x1000, DmaPerm.READ)
    t.map(0x20_0000, buf[0x1000:], 0x1000, DmaPerm.RW)
    assert len(t.translate(0x10_0FF0, 16, DmaPerm.READ)) == 16
    with pytest.raises(IommuFault):
        t.translate(0x10_0000, 4, DmaPerm.WRITE)
    with pytest.raises(IommuFault):
        t.translate(0x10_0FF0, 17, DmaPerm.READ)
    with pytest.raises(IommuFault):
        t.translate(0x0F_FFFF, 1, DmaPerm.READ)
    t.unmap(0x10_0000, 0x1000)
    with pytest.raises(IommuFault):
        t.translate(0x10_0000, 1, DmaPerm.READ)
    with pytest.raises(ValueError):
        t.unmap(0x10_0000, 0x1000)
