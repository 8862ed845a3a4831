import pytest

from passvp.backend import IrqKind
from passvp.harness.config import PlatformConfig
from passvp.harness.platform import build_platform
from passvp.msi import SETSPI
from passvp.pci import CMD_BUS_MASTER, CMD_MEMORY_ENABLE, Pin
from passvp.sim import US, Response
from passvp.vpci import DmaSetupError, DmaWindow

from fakes import SENTINEL, FakeBackend

CFG = 0x2000_0000
BAR = 0x1000_0000
DOORBELL = 0x0800_0000 + SETSPI


def build(backend=None, **cfg):
    fake = backend or FakeBackend()
    p = build_platform(PlatformConfig(**cfg), backend_factory=lambda k: fake)
    return p, fake


def cfg_rd(p, off, n):
    data, resp = p.cpu.read(CFG + off, n)
    assert resp is Response.OK
    return int.from_bytes(data, "little")


def cfg_wr(p, off, n, value):
    assert p.cpu.write(CFG + off, value.to_bytes(n, "little")) is Response.OK


def enable_bar(p):
    cfg_wr(p, 0x10, 4, BAR)
    cfg_wr(p, 0x04, 2, CMD_MEMORY_ENABLE | CMD_BUS_MASTER)


def mmio_wr(p, off, n, value):
    return p.cpu.write(BAR + off, value.to_bytes(n, "little"))


def mmio_rd(p, off, n):
    data, resp = p.cpu.read(BAR + off, n)
    return int.from_bytes(data, "little"), resp


def test_identity_passes_through():
    p, fake = build()
    assert cfg_rd(p, 0, 4) == 0x0042_ABCD


def test_msi_address_virtualized():
    p, fake = build()
    assert cfg_rd(p, 0x54, 4) == 0  # guest starts from a clean slate
    cfg_wr(p, 0x54, 4, 0x0800_0040)
    cfg_wr(p, 0x5C, 2, 77)
    assert cfg_rd(p, 0x54, 4) == 0x0800_0040
    assert cfg_rd(p, 0x5C, 2) == 77
    assert int.from_bytes(fake.cfg.raw[0x54:0x58], "little") == SENTINEL
    assert all(off < 0x54 or off >= 0x5E for off, _ in fake.config_writes)


def test_bar_writes_stay_local_and_command_forwards():
    p, fake = build()
    enable_bar(p)
    assert cfg_rd(p, 0x10, 4) == BAR
    assert fake.cfg.bar_register(0) == 0
    assert fake.cfg.command & CMD_MEMORY_ENABLE
    assert mmio_wr(p, 0x10, 4, 0x1234) is Response.OK
    assert fake.bar[0x10:0x14] == (0x1234).to_bytes(4, "little")


def test_access_beyond_region_is_address_error():
    p, fake = build()
    enable_bar(p)
    assert p.vpci.regions[0].size == 0x1000
    assert mmio_rd(p, 0x1000, 4)[1] is Response.ADDRESS_ERROR


def test_dma_window_is_mapped_at_elaboration():
    p, fake = build()
    (iova, size, perms, buf), = fake.maps
    assert iova == p.config.ram.base and size == p.config.ram.size
    buf[0:3] = b"abc"
    assert p.cpu.read(p.config.ram.base, 3)[0] == b"abc"


def test_dma_window_outside_ram_rejected():
    from passvp.harness.config import ConfigError, DmaWindowConfig
    with pytest.raises(ConfigError, match="dma_window"):
        build(dma_window=DmaWindowConfig(0x9000_0000, 0x1000))
    p, fake = build()
    with pytest.raises(DmaSetupError):
        p.vpci.setup_dma_window(DmaWindow(p.config.ram.base + p.config.ram.size - 0x1000,
                                          0x2000))


def test_map_failure_fatal_before_elaboration():
    with pytest.raises(DmaSetupError):
        build(FakeBackend(fail_map=True))


def test_map_failure_counted_after_elaboration():
    p, fake = build()
    fake.fail_map = True
    p.vpci.setup_dma_window(DmaWindow(p.config.ram.base, 0x1000))
    assert p.vpci.map_failures == 1


def test_dmi_invalidation_unmaps_window():
    p, fake = build()
    p.ram.socket.invalidate_dmi(p.ram.base, p.ram.base + 0xFFF)
    assert fake.unmaps == [(p.config.ram.base, p.config.ram.size)]
    assert p.vpci.window is None


def _program_msix(p, vectors=4, masked=()):
    enable_bar(p)
    for v in range(vectors):
        base = 0x800 + 16 * v
        mmio_wr(p, base, 4, DOORBELL & 0xFFFFFFFF)
        mmio_wr(p, base + 4, 4, 0)
        mmio_wr(p, base + 8, 4, 64 + v)
        mmio_wr(p, base + 12, 4, 1 if v in masked else 0)
    ctrl = cfg_rd(p, 0x62, 2)
    cfg_wr(p, 0x62, 2, ctrl | 0x8000)


def test_msix_delivery_within_one_quantum():
    p, fake = build()
    _program_msix(p)
    assert (IrqKind.MSIX, 4) in fake.irq_setups
    fake.fire(IrqKind.MSIX, 2)
    t0 = p.kernel.now
    p.kernel.run_until(t0 + US)
    assert p.msi.counts[2] == 1
    assert p.vpci.irq_log[-1].time - t0 <= US


def test_masked_vector_pends_then_replays_once():
    p, fake = build()
    _program_msix(p, masked={1})
    fake.fire(IrqKind.MSIX, 1)
    fake.fire(IrqKind.MSIX, 1)  # a pending bit, not a counter
    p.kernel.run_for(2 * US)
    assert p.msi.counts[1] == 0
    assert mmio_rd(p, 0xC00, 8)[0] == 0b10
    assert fake.bar[0xC00] == 0  # PBA state lives in the model, not the device
    mmio_wr(p, 0x800 + 16 + 12, 4, 0)
    assert p.msi.counts[1] == 1
    assert mmio_rd(p, 0xC00, 8)[0] == 0
    p.kernel.run_for(2 * US)
    assert p.msi.counts[1] == 1


def test_function_mask_defers_until_cleared():
    p, fake = build()
    _program_msix(p)
    cfg_wr(p, 0x62, 2, cfg_rd(p, 0x62, 2) | 0x4000)
    fake.fire(IrqKind.MSIX, 0)
    p.kernel.run_for(US)
    assert p.msi.counts[0] == 0 and p.vpci.pending == {0}
    cfg_wr(p, 0x62, 2, cfg_rd(p, 0x62, 2) & ~0x4000)
    assert p.msi.counts[0] == 1 and not p.vpci.pending


def test_msix_disabled_or_out_of_range_dropped():
    p, fake = build()
    fake.fire(IrqKind.MSIX, 0)
    p.kernel.run_for(US)
    assert p.vpci.dropped_irqs == 1
    _program_msix(p)
    fake.fire(IrqKind.MSIX, 9)
    p.kernel.run_for(US)
    assert p.vpci.dropped_irqs == 2
    assert sum(p.msi.counts) == 0
    assert any(r.space == "warn" for r in p.tracer.records)


def test_msi_uses_guest_address_and_data():
    p, fake = build()
    enable_bar(p)
    cfg_wr(p, 0x54, 4, DOORBELL)
    cfg_wr(p, 0x58, 4, 0)
    cfg_wr(p, 0x5C, 2, 64 + 5)
    cfg_wr(p, 0x52, 2, cfg_rd(p, 0x52, 2) | 1)
    assert (IrqKind.MSI, 1) in fake.irq_setups
    fake.fire(IrqKind.MSI)
    p.kernel.run_for(US)
    assert p.msi.counts[5] == 1
    bus = [r for r in p.tracer.records if r.space == "bus"]
    assert bus[-1].address == DOORBELL and bus[-1].data_hex == (69).to_bytes(4, "little").hex()


def test_legacy_assert_and_eoi_on_bar_access():
    p, fake = build()
    enable_bar(p)
    assert (IrqKind.LEGACY, 1) in fake.irq_setups
    fake.fire(IrqKind.LEGACY, 1)
    p.kernel.run_for(US)
    line = p.bridge.lines[Pin.A]
    assert line.level and line.rising_edges == 1
    mmio_rd(p, 0, 4)
    assert not line.level and fake.unmasks == 1


def test_legacy_without_pin_dropped():
    p, fake = build(FakeBackend(pin=Pin.NONE))
    assert not any(k is IrqKind.LEGACY for k, _ in fake.irq_setups)
    fake.fire(IrqKind.LEGACY)
    p.kernel.run_for(US)
    assert p.vpci.dropped_irqs == 1


def test_guest_view_walks_capabilities():
    from passvp.pci import capability_walk
    p, fake = build()
    assert [c for c, _ in capability_walk(p.vpci.guest_view())] == [0x05, 0x11]
