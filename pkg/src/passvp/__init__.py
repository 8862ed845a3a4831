"""Transaction-level virtual platform with PCI pass-through via VFIO."""

from ._accel import IMPLEMENTATION as KERNEL_IMPLEMENTATION

__version__ = "0.1.0"
__all__ = ["KERNEL_IMPLEMENTATION", "__version__"]
