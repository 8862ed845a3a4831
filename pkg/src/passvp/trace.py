"""Trace records for CPU-to-device traffic, device bus writes and interrupts.

Device DMA that goes through a DMI grant or a host IOMMU never reaches the
simulated bus, so it never shows up here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, TextIO

SOURCES = ("cpu", "device", "platform")
SPACES = ("cfg", "mmio", "io", "bus", "irq", "warn")
DIRECTIONS = ("read", "write", "none")
MAX_DATA_BYTES = 8


@dataclass(frozen=True)
class TraceRecord:
    time_ps: int
    source: str
    space: str
    region: str
    address: int
    length: int
    direction: str
    data_hex: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"bad trace source {self.source!r}")
        if self.space not in SPACES:
            raise ValueError(f"bad trace space {self.space!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"bad trace direction {self.direction!r}")

    def to_json(self) -> str:
        d = asdict(self)
        d["address"] = f"{self.address:016x}"
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        d = json.loads(line)
        d["address"] = int(d["address"], 16)
        return cls(**d)


class Tracer:
    """Collects records in emission order; time comes from the kernel."""

    def __init__(self, kernel):
        self.kernel = kernel
        self.records: list[TraceRecord] = []

    def emit(self, source: str, space: str, region: str, address: int, length: int,
             direction: str, data: bytes = b"", at: int | None = None) -> TraceRecord:
        """Append a record, or insert it at index ``at`` (a position taken
        before the access started, so it precedes anything it caused)."""
        rec = TraceRecord(self.kernel.now, source, space, region, address, length,
                          direction, bytes(data[:MAX_DATA_BYTES]).hex())
        if at is None:
            self.records.append(rec)
        else:
            self.records.insert(at, rec)
        return rec

    def warning(self, component: str, _what: str = "") -> None:
        self.emit("platform", "warn", component, 0, 0, "none")

    def write(self, fh: TextIO) -> None:
        write_trace(self.records, fh)


def write_trace(records: Iterable[TraceRecord], fh: TextIO) -> None:
    for rec in records:
        fh.write(rec.to_json())
        fh.write("\n")


def read_trace(fh: TextIO) -> Iterator[TraceRecord]:
    for line in fh:
        line = line.strip()
        if line:
            yield TraceRecord.from_json(line)
