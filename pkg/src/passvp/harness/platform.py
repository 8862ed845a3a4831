"""Assembles the virtual platform: bus, RAM, PCI host, MSI frame, vPCI device."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from ..backend import DeviceBackend
from ..host_bridge import ECAM_WINDOW, PciHostBridge
from ..msi import FRAME_SIZE, DoorbellConfig, MsiController
from ..ram import Ram
from ..sim import Bus, InitiatorSocket, Kernel
from ..trace import Tracer
from ..vpci import DmaWindow, VirtualPciDevice
from .config import PlatformConfig

DEVICE_SLOT = 0


@dataclass
class Platform:
    config: PlatformConfig
    kernel: Kernel
    bus: Bus
    ram: Ram
    bridge: PciHostBridge
    msi: MsiController
    vpci: VirtualPciDevice
    backend: DeviceBackend
    tracer: Tracer
    cpu: InitiatorSocket

    def close(self) -> None:
        self.backend.close()


def make_backend(config: PlatformConfig, kernel: Kernel) -> DeviceBackend:
    if config.device.backend == "mock":
        from ..mock import CopyCheckDevice
        return CopyCheckDevice(kernel)
    from ..vfio import VfioBackend
    backend = VfioBackend(config.device.sysfs_address)
    backend.open()
    return backend


def build_platform(config: PlatformConfig,
                   backend_factory: Optional[Callable[[Kernel], DeviceBackend]] = None) -> Platform:
    """Wire the platform, map the DMA window and elaborate.

    ``backend_factory(kernel)`` overrides the backend named in ``config``.
    """
    config.validate()
    kernel = Kernel()
    tracer = Tracer(kernel)
    bus = Bus(kernel, "bus")
    ram = Ram("ram", config.ram.base, config.ram.size)
    bridge = PciHostBridge(kernel, "pcihost")
    msi = MsiController(kernel, "gicv2m",
                        DoorbellConfig(config.msi.doorbell_base, config.msi.base_spi,
                                       config.msi.num_spis))
    factory = backend_factory or (lambda k: make_backend(config, k))
    backend = factory(kernel)
    vpci = VirtualPciDevice(kernel, "vpci", backend, quantum=config.quantum, tracer=tracer)

    host = config.pci_host
    bus.map(ram.socket, ram.base, ram.size, offset=ram.base)
    bus.map(bridge.cfg, host.cfg_base, ECAM_WINDOW)
    bus.map(bridge.mmio, host.mmio_window_base, host.mmio_window_size,
            offset=host.mmio_window_base)
    bus.map(bridge.io, host.io_window_base, host.io_window_size)
    bus.map(msi.socket, config.msi.doorbell_base, FRAME_SIZE)

    cpu = InitiatorSocket(kernel, "cpu")
    cpu.bind(bus.initiator_port())
    bridge.dma.bind(bus.initiator_port())
    vpci.dma.bind(bridge.device_port())
    bridge.attach(DEVICE_SLOT, vpci.pci)

    bridge.tracer = tracer
    bridge.on_warning(tracer.warning)
    msi.on_warning(tracer.warning)

    vpci.setup_dma_window(DmaWindow(config.dma_base, config.dma_size))
    kernel.elaborate()
    return Platform(config, kernel, bus, ram, bridge, msi, vpci, backend, tracer, cpu)
