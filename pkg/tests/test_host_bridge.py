import pytest
from hypothesis import given
from hypothesis import strategies as st

from passvp.host_bridge import ECAM_WINDOW, CfgAddress, PciHostBridge
from passvp.pci import (BarDefinition, BarKind, ConfigSpace, Direction, PciBackwardMessage,
                        PciSpace, PciTargetSocket, Pin)
from passvp.ram import Ram
from passvp.sim import Bus, GenericPayload, InitiatorSocket, Kernel, Response
from passvp.trace import Tracer

CFG, MMIO, IO = 0x2000_0000, 0x1000_0000, 0x3000_0000


class StubDevice:
    """Config space plus a flat BAR store; records what reaches it."""

    def __init__(self, name, bars=(BarDefinition(0, 0x1000),), pin=Pin.A):
        self.cfg = ConfigSpace(0x1234, 0x0001, interrupt_pin=pin, bars=list(bars))
        self.mem = {b.index: bytearray(b.size) for b in bars}
        self.seen = []
        self.socket = PciTargetSocket(name, self.handle, lambda: self.cfg)

    def handle(self, txn):
        self.seen.append((txn.space, txn.bar, txn.address, txn.direction))
        if txn.space is PciSpace.CONFIG:
            if txn.direction is Direction.READ:
                txn.data[:] = self.cfg.raw[txn.address:txn.address + len(txn.data)]
            else:
                self.cfg.write_bytes(txn.address, bytes(txn.data))
        else:
            store = self.mem[txn.bar]
            if txn.direction is Direction.READ:
                txn.data[:] = store[txn.address:txn.address + len(txn.data)]
            else:
                store[txn.address:txn.address + len(txn.data)] = txn.data
        txn.response = Response.OK


def make(*devices, tracer=False):
    k = Kernel()
    bus = Bus(k)
    br = PciHostBridge(k)
    bus.map(br.cfg, CFG, ECAM_WINDOW)
    bus.map(br.mmio, MMIO, 0x0100_0000, offset=MMIO)
    bus.map(br.io, IO, 0x10000)
    ram = Ram("ram", 0x4000_0000, 0x10000)
    bus.map(ram.socket, ram.base, ram.size, offset=ram.base)
    cpu = InitiatorSocket(k, "cpu")
    cpu.bind(bus.initiator_port())
    br.dma.bind(bus.initiator_port())
    for slot, dev in devices:
        br.attach(slot, dev.socket)
    if tracer:
        br.tracer = Tracer(k)
    k.elaborate()
    return k, br, cpu, ram


def cfg_addr(slot, reg, fn=0):
    return CFG + CfgAddress(slot, fn, reg).encode()


def rd(cpu, addr, n):
    data, resp = cpu.read(addr, n)
    return int.from_bytes(data, "little"), resp


def wr(cpu, addr, n, value):
    return cpu.write(addr, value.to_bytes(n, "little"))


@given(st.integers(0, 31), st.integers(0, 7), st.integers(0, 0xFFF))
def test_cfg_address_roundtrip(slot, fn, reg):
    a = CfgAddress(slot, fn, reg)
    assert CfgAddress.decode(a.encode()) == a
    assert a.encode() == (slot << 15) | (fn << 12) | reg


def test_cfg_read_present_and_absent():
    dev = StubDevice("d0")
    k, br, cpu, _ = make((0, dev))
    assert rd(cpu, cfg_addr(0, 0), 4) == (0x0001_1234, Response.OK)
    assert rd(cpu, cfg_addr(3, 0), 4) == (0xFFFFFFFF, Response.OK)
    assert rd(cpu, cfg_addr(0, 0, fn=1), 2) == (0xFFFF, Response.OK)
    assert rd(cpu, cfg_addr(0, 0x100), 4) == (0, Response.OK)


def test_cfg_misaligned_is_command_error():
    k, br, cpu, _ = make((0, StubDevice("d0")))
    assert rd(cpu, cfg_addr(0, 1), 2)[1] is Response.COMMAND_ERROR


def _program(cpu, slot, bar, base, enable=True):
    wr(cpu, cfg_addr(slot, 0x10 + 4 * bar), 4, base)
    if enable:
        wr(cpu, cfg_addr(slot, 0x04), 2, 0x0007)


def test_mmio_decode_gated_by_command_register():
    dev = StubDevice("d0")
    k, br, cpu, _ = make((0, dev))
    _program(cpu, 0, 0, MMIO + 0x2000, enable=False)
    assert rd(cpu, MMIO + 0x2000, 4)[1] is Response.ADDRESS_ERROR
    wr(cpu, cfg_addr(0, 0x04), 2, 0x0002)
    assert wr(cpu, MMIO + 0x2010, 4, 0xDEADBEEF) is Response.OK
    assert dev.mem[0][0x10:0x14] == (0xDEADBEEF).to_bytes(4, "little")
    assert dev.seen[-1] == (PciSpace.MEM, 0, 0x10, Direction.WRITE)
    wr(cpu, cfg_addr(0, 0x04), 2, 0x0000)
    assert rd(cpu, MMIO + 0x2010, 4)[1] is Response.ADDRESS_ERROR


def test_io_decode():
    dev = StubDevice("d0", bars=(BarDefinition(1, 0x100, BarKind.IO),))
    k, br, cpu, _ = make((0, dev))
    wr(cpu, cfg_addr(0, 0x14), 4, 0x400)
    wr(cpu, cfg_addr(0, 0x04), 2, 0x0001)
    assert wr(cpu, IO + 0x404, 2, 0xBEEF) is Response.OK
    assert dev.seen[-1] == (PciSpace.IO, 1, 4, Direction.WRITE)


def test_overlap_lowest_slot_wins_and_warns_once():
    a, b = StubDevice("a"), StubDevice("b")
    k, br, cpu, _ = make((2, b), (1, a))
    warnings = []
    br.on_warning(lambda who, what: warnings.append(what))
    _program(cpu, 1, 0, MMIO)
    _program(cpu, 2, 0, MMIO)
    _program(cpu, 2, 0, MMIO)  # re-programming the same pair does not warn again
    wr(cpu, MMIO, 4, 7)
    assert a.mem[0][0] == 7 and b.mem[0][0] == 0
    assert len(warnings) == 1 and br.warnings == 1


def test_wired_or_intx():
    k, br, cpu, _ = make((0, StubDevice("a")), (1, StubDevice("b")))
    line = br.lines[Pin.A]
    br.raise_legacy(Pin.A, True, slot=0)
    br.raise_legacy(Pin.A, True, slot=1)
    br.raise_legacy(Pin.A, False, slot=0)
    assert line.level
    br.raise_legacy(Pin.A, False, slot=1)
    assert not line.level and line.rising_edges == 1


def test_backward_message_drives_line():
    dev = StubDevice("a")
    k, br, cpu, _ = make((0, dev))
    dev.socket.send_backward(PciBackwardMessage(Pin.B, True))
    assert br.lines[Pin.B].level


def test_pinless_interrupt_warns():
    k, br, cpu, _ = make((0, StubDevice("a")))
    br.raise_legacy(Pin.NONE, True)
    assert br.warnings == 1


def test_device_dma_and_dmi_through_bridge():
    dev = StubDevice("a")
    k = Kernel()
    bus = Bus(k)
    br = PciHostBridge(k)
    ram = Ram("ram", 0x4000_0000, 0x2000)
    bus.map(ram.socket, ram.base, ram.size, offset=ram.base)
    br.dma.bind(bus.initiator_port())
    devdma = InitiatorSocket(k, "devdma")
    devdma.bind(br.device_port())
    br.attach(0, dev.socket)
    br.tracer = Tracer(k)
    k.elaborate()
    assert devdma.write(0x4000_0010, b"hello") is Response.OK
    assert bytes(ram.store[0x10:0x15]) == b"hello"
    rec = br.tracer.records[-1]
    assert (rec.source, rec.space, rec.address, rec.length) == ("device", "bus", 0x4000_0010, 5)
    dmi = devdma.get_dmi(0x4000_0000)
    assert dmi is not None and dmi.range_start == 0x4000_0000
    hits = []
    devdma.on_dmi_invalidate(lambda s, e: hits.append((s, e)))
    ram.socket.invalidate_dmi(ram.base, ram.base + 0xFFF)
    assert hits and not dmi.valid


def test_trace_orders_cpu_access_before_side_effects():
    dev = StubDevice("a")
    k, br, cpu, _ = make((0, dev), tracer=True)

    def handle(txn, orig=dev.handle):
        orig(txn)
        if txn.space is PciSpace.MEM and txn.direction is Direction.WRITE:
            br.forward_dma_write(0x4000_0000, b"\x01")

    dev.socket.handler = handle
    _program(cpu, 0, 0, MMIO)
    wr(cpu, MMIO + 8, 4, 1)
    kinds = [(r.source, r.space) for r in br.tracer.records[-2:]]
    assert kinds == [("cpu", "mmio"), ("device", "bus")]
    assert br.tracer.records[-2].region == "bar0"
