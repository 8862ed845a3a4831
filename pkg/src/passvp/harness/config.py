"""Platform configuration: defaults, INI-style loading and validation.

A config file uses one section per :class:`PlatformConfig` group, keys
named after the fields::

    [ram]
    base = 0x40000000
    size = 0x10000000

    [device]
    backend = mock

    [run]
    quantum = 1us
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

from ..host_bridge import ECAM_WINDOW
from ..msi import FRAME_SIZE
from ..sim import MS, US, parse_duration
from ..vfio.backend import ADDRESS_RE as PCI_ADDRESS_RE


class ConfigError(ValueError):
    """Invalid platform configuration; message starts with the field path."""


@dataclass
class RamConfig:
    base: int = 0x4000_0000
    size: int = 256 << 20


@dataclass
class PciHostConfig:
    cfg_base: int = 0x2000_0000
    mmio_window_base: int = 0x1000_0000
    mmio_window_size: int = 0x0100_0000
    io_window_base: int = 0x3000_0000
    io_window_size: int = 0x1_0000


@dataclass
class MsiConfig:
    doorbell_base: int = 0x0800_0000
    base_spi: int = 64
    num_spis: int = 32


@dataclass
class DeviceConfig:
    backend: str = "mock"
    sysfs_address: Optional[str] = None


@dataclass
class DmaWindowConfig:
    base: Optional[int] = None  # default: all of RAM
    size: Optional[int] = None


@dataclass
class PlatformConfig:
    ram: RamConfig = field(default_factory=RamConfig)
    pci_host: PciHostConfig = field(default_factory=PciHostConfig)
    msi: MsiConfig = field(default_factory=MsiConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    dma_window: DmaWindowConfig = field(default_factory=DmaWindowConfig)
    quantum: int = US
    timeout: int = 10 * MS
    trace_path: Optional[str] = None
    stats_path: Optional[str] = None

    @property
    def dma_base(self) -> int:
        return self.ram.base if self.dma_window.base is None else self.dma_window.base

    @property
    def dma_size(self) -> int:
        if self.dma_window.size is not None:
            return self.dma_window.size
        return self.ram.base + self.ram.size - self.dma_base

    def validate(self) -> "PlatformConfig":
        if self.ram.size <= 0:
            raise ConfigError("ram.size: must be positive")
        if self.device.backend not in ("mock", "vfio"):
            raise ConfigError(f"device.backend: unknown backend {self.device.backend!r}")
        if self.device.backend == "vfio" and not self.device.sysfs_address:
            raise ConfigError("device.sysfs_address: required for the vfio backend")
        addr = self.device.sysfs_address
        if addr and not PCI_ADDRESS_RE.fullmatch(addr):
            raise ConfigError(f"device.sysfs_address: malformed PCI address "
                              f"{self.device.sysfs_address!r}, expected DDDD:BB:DD.F")
        for name in ("mmio_window_size", "io_window_size"):
            if getattr(self.pci_host, name) <= 0:
                raise ConfigError(f"pci_host.{name}: must be positive")
        if self.msi.num_spis < 1:
            raise ConfigError("msi.num_spis: must be >= 1")
        if self.msi.doorbell_base % FRAME_SIZE:
            raise ConfigError("msi.doorbell_base: must be 4 KiB aligned")
        if self.quantum <= 0:
            raise ConfigError("quantum: must be positive")
        if self.timeout <= 0:
            raise ConfigError("timeout: must be positive")
        windows = [
            ("ram", self.ram.base, self.ram.size),
            ("pci_host.cfg", self.pci_host.cfg_base, ECAM_WINDOW),
            ("pci_host.mmio_window", self.pci_host.mmio_window_base,
             self.pci_host.mmio_window_size),
            ("pci_host.io_window", self.pci_host.io_window_base, self.pci_host.io_window_size),
            ("msi.doorbell", self.msi.doorbell_base, FRAME_SIZE),
        ]
        for i, (na, a, sa) in enumerate(windows):
            if a < 0:
                raise ConfigError(f"{na}: negative base address")
            for nb, b, sb in windows[i + 1:]:
                if a < b + sb and b < a + sa:
                    raise ConfigError(f"{nb}: [{b:#x}, {b + sb:#x}) overlaps {na} "
                                      f"[{a:#x}, {a + sa:#x})")
        lo, hi = self.dma_base, self.dma_base + self.dma_size
        if self.dma_size <= 0 or lo < self.ram.base or hi > self.ram.base + self.ram.size:
            raise ConfigError(f"dma_window: [{lo:#x}, {hi:#x}) is not inside ram "
                              f"[{self.ram.base:#x}, {self.ram.base + self.ram.size:#x})")
        return self


_SECTIONS = {"ram": RamConfig, "pci_host": PciHostConfig, "msi": MsiConfig,
             "device": DeviceConfig, "dma_window": DmaWindowConfig}
_RUN_KEYS = {"quantum", "timeout", "trace_path", "stats_path"}


def _convert(path: str, text: str, ftype):
    text = text.strip()
    try:
        if ftype in ("int", "Optional[int]"):
            return int(text.replace("_", ""), 0)
    except ValueError:
        raise ConfigError(f"{path}: expected an integer, got {text!r}") from None
    return text


def load_config(path: str | os.PathLike) -> PlatformConfig:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc.message}") from None
    cfg = PlatformConfig()
    for section in parser.sections():
        if section == "run":
            for key, value in parser.items(section):
                if key not in _RUN_KEYS:
                    raise ConfigError(f"run.{key}: unknown key")
                if key in ("quantum", "timeout"):
                    try:
                        setattr(cfg, key, parse_duration(value))
                    except ValueError as exc:
                        raise ConfigError(f"run.{key}: {exc}") from None
                else:
                    setattr(cfg, key, value)
            continue
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"{section}: unknown section")
        group = getattr(cfg, section)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in parser.items(section):
            if key not in types:
                raise ConfigError(f"{section}.{key}: unknown key")
            setattr(group, key, _convert(f"{section}.{key}", value, types[key]))
    return cfg.validate()
