"""Discrete-event kernel with virtual time and blocking TLM-style transport.

Time is an integer count of picoseconds. Events scheduled for the same
instant run in the order they were scheduled, which makes every run of a
given scenario replay the exact same sequence of callbacks.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from ._accel import EventQueue

log = logging.getLogger(__name__)

PS = 1
NS = 1000 * PS
US = 1000 * NS
MS = 1000 * US
SEC = 1000 * MS

_UNITS = {"ps": PS, "ns": NS, "us": US, "ms": MS, "s": SEC}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ps|ns|us|ms|s)\s*$")
_U64 = (1 << 64) - 1


def parse_duration(text: str | int) -> int:
    """Parse ``"10ns"``, ``"1us"`` or a bare picosecond integer."""
    if isinstance(text, int):
        if text < 0:
            raise ValueError(f"negative duration: {text}")
        return text
    m = _DURATION_RE.match(text)
    if m is None:
        if text.strip().isdigit():
            return int(text)
        raise ValueError(f"bad duration: {text!r}")
    value, unit = m.groups()
    ps = float(value) * _UNITS[unit] if "." in value else int(value) * _UNITS[unit]
    if ps != int(ps):
        raise ValueError(f"duration {text!r} is not a whole number of picoseconds")
    return int(ps)


def format_time(ps: int) -> str:
    for unit in ("s", "ms", "us", "ns"):
        scale = _UNITS[unit]
        if ps and ps % scale == 0:
            return f"{ps // scale}{unit}"
    return f"{ps}ps"


class SimulationError(RuntimeError):
    """Lifecycle misuse of the kernel (e.g. scheduling after the end)."""


class ElaborationError(SimulationError):
    """Platform wiring problem detected before time starts."""


class Command(enum.Enum):
    READ = "read"
    WRITE = "write"


class Response(enum.Enum):
    INCOMPLETE = "incomplete"
    OK = "ok"
    ADDRESS_ERROR = "address_error"
    COMMAND_ERROR = "command_error"

    @property
    def ok(self) -> bool:
        return self is Response.OK


@dataclass
class GenericPayload:
    address: int
    data: bytearray
    command: Command
    response: Response = Response.INCOMPLETE
    dmi_allowed: bool = False

    def __post_init__(self):
        if len(self.data) < 1:
            raise ValueError("payload data must hold at least one byte")
        if not isinstance(self.data, bytearray):
            self.data = bytearray(self.data)

    @classmethod
    def read(cls, address: int, length: int) -> "GenericPayload":
        return cls(address, bytearray(length), Command.READ)

    @classmethod
    def write(cls, address: int, data: bytes) -> "GenericPayload":
        return cls(address, bytearray(data), Command.WRITE)

    @property
    def is_read(self) -> bool:
        return self.command is Command.READ

    def set_response(self, resp: Response) -> None:
        if self.response is not Response.INCOMPLETE:
            raise SimulationError("response already set for this transaction")
        self.response = resp


@dataclass
class DmiDescriptor:
    """Direct access grant: guest address ``a`` lives at
    ``host_buffer[a - range_start]``."""

    range_start: int
    range_end: int
    host_buffer: memoryview
    read_allowed: bool = True
    write_allowed: bool = True
    valid: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.range_start > self.range_end:
            raise ValueError("DMI range_start > range_end")
        if len(self.host_buffer) != self.size:
            raise ValueError("DMI host buffer length does not match range size")

    @property
    def size(self) -> int:
        return self.range_end - self.range_start + 1

    def contains(self, address: int, length: int = 1) -> bool:
        return self.range_start <= address and address + length - 1 <= self.range_end

    def view(self, address: int, length: int) -> memoryview:
        if not self.contains(address, length):
            raise ValueError(f"[{address:#x}, +{length}) outside DMI range")
        off = address - self.range_start
        return self.host_buffer[off:off + length]

    def shifted(self, delta: int) -> "DmiDescriptor":
        return DmiDescriptor(self.range_start + delta, self.range_end + delta,
                             self.host_buffer, self.read_allowed, self.write_allowed)


class EventHandle:
    __slots__ = ("callback", "time", "cancelled")

    def __init__(self, callback, time):
        self.callback = callback
        self.time = time
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Kernel:
    """Single-threaded event scheduler owning the virtual clock."""

    def __init__(self):
        self._queue = EventQueue()
        self._now = 0
        self._finished = False
        self._elaborated = False
        self._stop_requested = False
        self._sockets: list[InitiatorSocket] = []
        self._elaboration_hooks: list[Callable[[], None]] = []
        self.events_executed = 0

    @property
    def now(self) -> int:
        return self._now

    @property
    def elaborated(self) -> bool:
        return self._elaborated

    @property
    def finished(self) -> bool:
        return self._finished

    def register_socket(self, sock: "InitiatorSocket") -> None:
        if self._elaborated:
            raise ElaborationError(f"socket {sock.name} created after elaboration")
        self._sockets.append(sock)

    def on_elaboration(self, hook: Callable[[], None]) -> None:
        self._elaboration_hooks.append(hook)

    def elaborate(self) -> None:
        if self._elaborated:
            return
        unbound = [s.name for s in self._sockets if s.peer is None]
        if unbound:
            raise ElaborationError(f"unbound initiator socket(s): {', '.join(unbound)}")
        self._elaborated = True
        for hook in self._elaboration_hooks:
            hook()

    def schedule(self, callback: Callable[[], None], delay: int = 0) -> EventHandle:
        if self._finished:
            raise SimulationError("cannot schedule events after the simulation finished")
        if delay < 0:
            raise ValueError("delay must be non-negative")
        when = self._now + delay
        if when > _U64:
            raise OverflowError("event time overflows 64-bit picoseconds")
        handle = EventHandle(callback, when)
        self._queue.push(when, handle)
        return handle

    def stop(self) -> None:
        """Make the current ``run_until`` return after this callback."""
        self._stop_requested = True

    def run_until(self, limit: int) -> int:
        """Run every event with ``time <= limit``; returns the new ``now``.

        Time advances to ``limit`` unless :meth:`stop` was requested, in
        which case it stays at the time of the stopping event.
        """
        if self._finished:
            raise SimulationError("simulation already finished")
        self.elaborate()
        if limit < self._now:
            return self._now
        self._stop_requested = False
        queue = self._queue
        while True:
            t = queue.peek_time()
            if t is None or t > limit:
                break
            t, handle = queue.pop()
            if handle.cancelled:
                continue
            self._now = t
            self.events_executed += 1
            handle.callback()
            if self._stop_requested:
                self._stop_requested = False
                return self._now
        self._now = limit
        return self._now

    def run_for(self, duration: int) -> int:
        return self.run_until(self._now + duration)

    def pending(self) -> int:
        return len(self._queue)

    def finish(self) -> None:
        self._finished = True
        self._queue.clear()


class TargetSocket:
    """Target side of a blocking transport link.

    ``handler(txn)`` must set ``txn.response``; ``dmi_handler(address)``
    returns a :class:`DmiDescriptor` or ``None``.
    """

    def __init__(self, name: str, handler: Callable[[GenericPayload], None],
                 dmi_handler: Optional[Callable[[int], Optional[DmiDescriptor]]] = None,
                 latency: int = 0):
        if latency < 0:
            raise ValueError("latency must be non-negative")
        self.name = name
        self.handler = handler
        self.dmi_handler = dmi_handler
        self.latency = latency
        self.peer: Optional[InitiatorSocket] = None

    def invalidate_dmi(self, start: int = 0, end: int = _U64) -> None:
        if self.peer is not None:
            self.peer.invalidate_dmi(start, end)


class InitiatorSocket:
    def __init__(self, kernel: Kernel, name: str):
        self.kernel = kernel
        self.name = name
        self.peer: Optional[TargetSocket] = None
        self._dmi_cache: list[DmiDescriptor] = []
        self._invalidation_listeners: list[Callable[[int, int], None]] = []
        kernel.register_socket(self)

    def bind(self, target: TargetSocket) -> None:
        if self.kernel.elaborated:
            raise ElaborationError(f"{self.name}: binding after elaboration")
        if self.peer is not None:
            raise ElaborationError(f"{self.name}: already bound to {self.peer.name}")
        if target.peer is not None:
            raise ElaborationError(f"{target.name}: already bound to {target.peer.name}")
        self.peer = target
        target.peer = self

    def _target(self) -> TargetSocket:
        if self.peer is None:
            raise ElaborationError(f"{self.name}: socket not bound")
        return self.peer

    def b_transport(self, txn: GenericPayload, delay: int = 0) -> int:
        """Deliver ``txn`` and return ``delay`` plus the target's latency."""
        target = self._target()
        txn.response = Response.INCOMPLETE
        target.handler(txn)
        if txn.response is Response.INCOMPLETE:
            raise SimulationError(f"{target.name}: transaction left without response")
        return delay + target.latency

    def get_dmi(self, address: int) -> Optional[DmiDescriptor]:
        for dmi in self._dmi_cache:
            if dmi.valid and dmi.contains(address):
                return dmi
        target = self._target()
        if target.dmi_handler is None:
            return None
        dmi = target.dmi_handler(address)
        if dmi is not None:
            self._dmi_cache.append(dmi)
        return dmi

    def on_dmi_invalidate(self, listener: Callable[[int, int], None]) -> None:
        self._invalidation_listeners.append(listener)

    def invalidate_dmi(self, start: int, end: int) -> None:
        keep = []
        for dmi in self._dmi_cache:
            if dmi.range_start <= end and start <= dmi.range_end:
                dmi.valid = False
            else:
                keep.append(dmi)
        self._dmi_cache = keep
        for listener in self._invalidation_listeners:
            listener(start, end)

    # convenience accessors used by scripted initiators
    def read(self, address: int, length: int) -> tuple[bytes, Response]:
        txn = GenericPayload.read(address, length)
        self.b_transport(txn)
        return bytes(txn.data), txn.response

    def write(self, address: int, data: bytes) -> Response:
        txn = GenericPayload.write(address, data)
        self.b_transport(txn)
        return txn.response


class SignalLine:
    """Boolean wire; observers get ``(line, level, time)`` per transition."""

    def __init__(self, kernel: Kernel, name: str, level: bool = False):
        self.kernel = kernel
        self.name = name
        self.level = level
        self._observers: list[Callable[["SignalLine", bool, int], None]] = []
        self.rising_edges = 0

    def observe(self, observer: Callable[["SignalLine", bool, int], None]) -> None:
        self._observers.append(observer)

    def set(self, level: bool) -> None:
        level = bool(level)
        if level == self.level:
            return
        self.level = level
        if level:
            self.rising_edges += 1
        for obs in self._observers:
            obs(self, level, self.kernel.now)

    def pulse(self) -> None:
        self.set(True)
        self.set(False)


@dataclass(order=True)
class _Mapping:
    start: int
    end: int  # inclusive
    offset: int
    port: TargetSocket = field(compare=False)
    out: "InitiatorSocket" = field(compare=False)


class Bus:
    """Address router from any number of initiators to mapped targets.

    A target mapped at ``[start, end]`` with ``offset`` receives address
    ``addr - start + offset``.
    """

    def __init__(self, kernel: Kernel, name: str = "bus"):
        self.kernel = kernel
        self.name = name
        self._maps: list[_Mapping] = []
        self._in_ports: list[TargetSocket] = []
        self._out_ports: list[InitiatorSocket] = []

    def initiator_port(self) -> TargetSocket:
        """New bus-side target socket for one more initiator."""
        port = TargetSocket(f"{self.name}.in{len(self._in_ports)}",
                            self._transport, self._get_dmi)
        self._in_ports.append(port)
        return port

    def map(self, target: TargetSocket, start: int, size: int, offset: int = 0) -> None:
        if size <= 0:
            raise ValueError("mapping size must be positive")
        end = start + size - 1
        for m in self._maps:
            if m.start <= end and start <= m.end:
                raise ElaborationError(
                    f"{self.name}: [{start:#x}, {end:#x}] overlaps mapping of {m.port.name}")
        out = InitiatorSocket(self.kernel, f"{self.name}.out{len(self._out_ports)}")
        out.bind(target)
        out.on_dmi_invalidate(lambda s, e, m_start=start, m_off=offset:
                              self._propagate_invalidation(s - m_off + m_start,
                                                           e - m_off + m_start))
        self._out_ports.append(out)
        self._maps.append(_Mapping(start, end, offset, target, out))
        self._maps.sort()

    def _propagate_invalidation(self, start: int, end: int) -> None:
        for port in self._in_ports:
            port.invalidate_dmi(start, end)

    def _lookup(self, address: int, length: int) -> Optional[tuple[_Mapping, InitiatorSocket]]:
        for m in self._maps:
            if m.start <= address and address + length - 1 <= m.end:
                return m, m.out
        return None

    def _transport(self, txn: GenericPayload) -> None:
        hit = self._lookup(txn.address, len(txn.data))
        if hit is None:
            txn.set_response(Response.ADDRESS_ERROR)
            return
        m, out = hit
        original = txn.address
        txn.address = original - m.start + m.offset
        try:
            out.b_transport(txn)
        finally:
            txn.address = original

    def _get_dmi(self, address: int) -> Optional[DmiDescriptor]:
        hit = self._lookup(address, 1)
        if hit is None:
            return None
        m, out = hit
        dmi = out.get_dmi(address - m.start + m.offset)
        if dmi is None:
            return None
        # clip to the mapped window, then shift into bus addresses
        delta = m.start - m.offset
        lo = max(dmi.range_start, m.offset)
        hi = min(dmi.range_end, m.end - m.start + m.offset)
        clipped = DmiDescriptor(lo, hi, dmi.view(lo, hi - lo + 1),
                                dmi.read_allowed, dmi.write_allowed)
        return clipped.shifted(delta)
