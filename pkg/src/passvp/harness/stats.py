"""Per-region traffic and per-vector interrupt statistics folded from a trace."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from ..pci import Pin
from ..trace import TraceRecord

CSV_HEADER = ("category", "key", "metric", "value")
DMI_NOTE = ("note: device DMA through the IOMMU/DMI bypasses the simulated bus "
            "and is not included")


@dataclass
class RegionStats:
    bytes_read: int = 0
    bytes_written: int = 0
    access_count: int = 0


@dataclass
class StatsReport:
    scenario: str
    regions: dict[str, RegionStats] = field(default_factory=dict)
    irq_counts: dict[int, int] = field(default_factory=dict)
    pending_counts: dict[int, int] = field(default_factory=dict)
    msi_count: int = 0
    legacy_pins: dict[str, int] = field(default_factory=dict)
    warnings: int = 0

    def rows(self) -> list[tuple[str, str, str, str]]:
        """Flat ``(category, key, metric, value)`` rows in a stable order."""
        out = [("meta", "scenario", "name", self.scenario)]
        for name in sorted(self.regions):
            r = self.regions[name]
            out += [("region", name, "bytes_read", str(r.bytes_read)),
                    ("region", name, "bytes_written", str(r.bytes_written)),
                    ("region", name, "access_count", str(r.access_count))]
        for v in sorted(self.irq_counts):
            out.append(("irq", f"msix:{v}", "count", str(self.irq_counts[v])))
        for v in sorted(self.pending_counts):
            out.append(("irq", f"msix:{v}", "pending", str(self.pending_counts[v])))
        if self.msi_count:
            out.append(("irq", "msi", "count", str(self.msi_count)))
        for pin in sorted(self.legacy_pins):
            out.append(("legacy", pin, "count", str(self.legacy_pins[pin])))
        out.append(("warnings", "total", "count", str(self.warnings)))
        return out

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, str, str]]) -> "StatsReport":
        rep = cls(scenario="")
        for category, key, metric, value in rows:
            if category == "meta":
                rep.scenario = value
            elif category == "region":
                setattr(rep.regions.setdefault(key, RegionStats()), metric, int(value))
            elif category == "irq" and key == "msi":
                rep.msi_count = int(value)
            elif category == "irq":
                vector = int(key.split(":", 1)[1])
                target = rep.irq_counts if metric == "count" else rep.pending_counts
                target[vector] = int(value)
            elif category == "legacy":
                rep.legacy_pins[key] = int(value)
            elif category == "warnings":
                rep.warnings = int(value)
            else:
                raise ValueError(f"unknown stats row category {category!r}")
        return rep


def emit_stats(records: Iterable[TraceRecord], scenario: str = "adhoc") -> StatsReport:
    rep = StatsReport(scenario)
    irq = defaultdict(int)
    pend = defaultdict(int)
    pins = defaultdict(int)
    for rec in records:
        if rec.space in ("cfg", "mmio", "io", "bus"):
            r = rep.regions.setdefault(rec.region, RegionStats())
            r.access_count += 1
            if rec.direction == "read":
                r.bytes_read += rec.length
            else:
                r.bytes_written += rec.length
        elif rec.space == "irq":
            if rec.region == "msix":
                irq[rec.address] += 1
            elif rec.region == "msix-pending":
                pend[rec.address] += 1
            elif rec.region == "msi":
                rep.msi_count += 1
            elif rec.region == "intx":
                pins[Pin(rec.address).line_name] += 1
        elif rec.space == "warn":
            rep.warnings += 1
    rep.irq_counts = dict(irq)
    rep.pending_counts = dict(pend)
    rep.legacy_pins = dict(pins)
    return rep


def write_csv(report: StatsReport, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report.rows())


def read_csv(fh: TextIO) -> StatsReport:
    r = csv.reader(fh)
    header = tuple(next(r, ()))
    if header != CSV_HEADER:
        raise ValueError(f"not a stats file (header {header!r})")
    return StatsReport.from_rows(tuple(row) for row in r if row)


def format_table(report: StatsReport) -> str:
    buf = io.StringIO()
    buf.write(f"scenario: {report.scenario}\n\n")
    buf.write(f"{'region':<10} {'bytes read':>12} {'bytes written':>14} {'accesses':>9}\n")
    for name in sorted(report.regions):
        r = report.regions[name]
        buf.write(f"{name:<10} {r.bytes_read:>12} {r.bytes_written:>14} {r.access_count:>9}\n")
    if not report.regions:
        buf.write(f"{'(none)':<10} {0:>12} {0:>14} {0:>9}\n")
    buf.write(f"\n{'interrupt':<12} {'delivered':>10} {'pended':>8}\n")
    for v in sorted(set(report.irq_counts) | set(report.pending_counts)):
        buf.write(f"{'msix ' + str(v):<12} {report.irq_counts.get(v, 0):>10} "
                  f"{report.pending_counts.get(v, 0):>8}\n")
    if report.msi_count:
        buf.write(f"{'msi':<12} {report.msi_count:>10} {0:>8}\n")
    for pin in sorted(report.legacy_pins):
        buf.write(f"{pin:<12} {report.legacy_pins[pin]:>10} {0:>8}\n")
    buf.write(f"\nwarnings: {report.warnings}\n{DMI_NOTE}\n")
    return buf.getvalue()


@dataclass
class DiffResult:
    passed: bool
    differences: list[str]

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def diff_stats(a: StatsReport, b: StatsReport) -> DiffResult:
    if a.scenario != b.scenario:
        raise ValueError(f"scenario mismatch: {a.scenario!r} vs {b.scenario!r}")
    left = {r[:3]: r[3] for r in a.rows()}
    right = {r[:3]: r[3] for r in b.rows()}
    diffs = []
    for key in sorted(set(left) | set(right)):
        va, vb = left.get(key, "0"), right.get(key, "0")
        if va != vb:
            category, name, metric = key
            label = "warnings" if category == "warnings" else f"{category}/{name}/{metric}"
            diffs.append(f"{label}: {va} -> {vb}")
    return DiffResult(not diffs, diffs)
