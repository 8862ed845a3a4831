"""GICv2m-style MSI frame: writing an SPI number to SETSPI raises that line."""

from __future__ import annotations

from dataclasses import dataclass

from .sim import GenericPayload, Kernel, Response, SignalLine, TargetSocket

FRAME_SIZE = 0x1000
TYPER = 0x008
SETSPI = 0x040


@dataclass(frozen=True)
class DoorbellConfig:
    base_address: int
    base_spi: int
    num_spis: int

    def __post_init__(self):
        if self.num_spis < 1:
            raise ValueError("num_spis must be >= 1")
        if not 0 <= self.base_spi < 1 << 10 or self.num_spis >= 1 << 10:
            raise ValueError("base_spi and num_spis must fit in 10 bits")
        if self.base_address % FRAME_SIZE:
            raise ValueError("doorbell frame must be 4 KiB aligned")

    @property
    def doorbell_address(self) -> int:
        return self.base_address + SETSPI


def encode_typer(base_spi: int, num_spis: int) -> int:
    return ((base_spi & 0x3FF) << 16) | (num_spis & 0x3FF)


def decode_typer(value: int) -> tuple[int, int]:
    return (value >> 16) & 0x3FF, value & 0x3FF


class MsiController:
    """MSI termination point with one pulsed output line per SPI."""

    def __init__(self, kernel: Kernel, name: str, config: DoorbellConfig):
        self.kernel = kernel
        self.name = name
        self.config = config
        self.lines = [SignalLine(kernel, f"{name}.spi{config.base_spi + i}")
                      for i in range(config.num_spis)]
        self.counts = [0] * config.num_spis
        self.warnings = 0
        self.socket = TargetSocket(f"{name}.mmio", self._transport)
        self._warning_hooks = []

    def on_warning(self, hook) -> None:
        self._warning_hooks.append(hook)

    def _warn(self, what: str) -> None:
        self.warnings += 1
        for hook in self._warning_hooks:
            hook(self.name, what)

    def read_typer(self, offset: int = TYPER) -> int:
        if offset != TYPER:
            return 0
        return encode_typer(self.config.base_spi, self.config.num_spis)

    def doorbell_write(self, offset: int, value: int) -> Response:
        if offset != SETSPI:
            self._warn(f"write to {offset:#x}")
            return Response.OK
        line = value - self.config.base_spi
        if not 0 <= line < self.config.num_spis:
            self._warn(f"SPI {value} out of range")
            return Response.OK
        self.counts[line] += 1
        self.lines[line].pulse()
        return Response.OK

    def _transport(self, txn: GenericPayload) -> None:
        n = len(txn.data)
        if txn.address < 0 or txn.address + n > FRAME_SIZE:
            txn.set_response(Response.ADDRESS_ERROR)
            return
        if txn.is_read:
            value = self.read_typer(txn.address) if n == 4 else 0
            txn.data[:] = value.to_bytes(n, "little")
            txn.set_response(Response.OK)
        else:
            txn.set_response(self.doorbell_write(txn.address,
                                                 int.from_bytes(txn.data, "little")))
