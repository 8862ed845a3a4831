"""Interface between the pass-through device model and a device implementation."""

from __future__ import annotations

import abc
import enum
from dataclasses import dataclass
from typing import Optional

from .pci import BarKind, Direction
from .sim import Response


class BackendError(RuntimeError):
    """Device or host-side failure (open, DMA map, interrupt setup, I/O)."""


class IrqKind(enum.Enum):
    LEGACY = "legacy"
    MSI = "msi"
    MSIX = "msix"


class DmaPerm(enum.Flag):
    READ = 1
    WRITE = 2
    RW = READ | WRITE


@dataclass
class IrqEvent:
    kind: IrqKind
    index: int
    time: Optional[int] = None


@dataclass(frozen=True)
class RegionInfo:
    bar: int
    size: int
    kind: BarKind
    mappable: bool = True


class DeviceBackend(abc.ABC):
    """What the pass-through model needs from a (real or simulated) device.

    ``poll_irqs`` drains: an event is returned by at most one call.
    """

    #: whether interrupt timing is a pure function of virtual time
    deterministic = True

    @abc.abstractmethod
    def config_read(self, offset: int, length: int) -> bytes: ...

    @abc.abstractmethod
    def config_write(self, offset: int, data: bytes) -> None: ...

    @abc.abstractmethod
    def region_access(self, bar: int, offset: int, data: bytearray,
                      direction: Direction) -> Response: ...

    @abc.abstractmethod
    def region_info(self) -> list[RegionInfo]: ...

    @abc.abstractmethod
    def map_dma(self, iova: int, host_buffer: memoryview, size: int,
                perms: DmaPerm = DmaPerm.RW) -> None: ...

    @abc.abstractmethod
    def unmap_dma(self, iova: int, size: int) -> None: ...

    @abc.abstractmethod
    def poll_irqs(self) -> list[IrqEvent]: ...

    @abc.abstractmethod
    def reset(self) -> None: ...

    def irq_setup(self, kind: IrqKind, count: int) -> None:
        """Route ``count`` interrupts of ``kind`` to ``poll_irqs`` (0 disables)."""

    def unmask_legacy(self) -> None:
        """Re-arm INTx after the simulation delivered the last assertion."""

    def close(self) -> None:
        pass
