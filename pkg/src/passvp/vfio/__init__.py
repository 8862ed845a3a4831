"""Hardware backend for devices bound to vfio-pci."""

from .backend import VfioBackend, check_dma_args, validate_address
from .irq import IrqInbox, IrqListener

__all__ = ["VfioBackend", "IrqInbox", "IrqListener", "check_dma_args", "validate_address"]
