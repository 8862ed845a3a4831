"""Interrupt hand-off from eventfds to the simulation thread."""

from __future__ import annotations

import logging
import os
import queue
import selectors
import threading

from ..backend import IrqEvent, IrqKind

log = logging.getLogger(__name__)


class IrqInbox:
    """Lossless FIFO between listener threads and the simulation thread."""

    def __init__(self):
        self._q: queue.SimpleQueue[IrqEvent] = queue.SimpleQueue()

    def put(self, event: IrqEvent) -> None:
        self._q.put(event)

    def drain(self) -> list[IrqEvent]:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out

    def __len__(self) -> int:
        return self._q.qsize()


class IrqListener:
    """Thread that turns eventfd signals into :class:`IrqEvent` entries.

    An eventfd read returns the number of signals since the last read; each
    one becomes a separate event so nothing is coalesced away. Registered
    descriptors must be non-blocking. Epoll allows registration while the
    thread is waiting, so no lock is needed.
    """

    def __init__(self, inbox: IrqInbox):
        self.inbox = inbox
        self._sel = selectors.DefaultSelector()
        self._wake = os.eventfd(0, os.EFD_NONBLOCK | os.EFD_CLOEXEC)
        self._sel.register(self._wake, selectors.EVENT_READ, None)
        self._thread: threading.Thread | None = None
        self._stopping = False

    def add(self, fd: int, kind: IrqKind, index: int) -> None:
        self._sel.register(fd, selectors.EVENT_READ, (kind, index))

    def remove(self, fd: int) -> None:
        try:
            self._sel.unregister(fd)
        except KeyError:
            pass

    def start(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(target=self._loop, name="vfio-irq", daemon=True)
            self._thread.start()

    def stop(self) -> None:
        self._stopping = True
        os.eventfd_write(self._wake, 1)
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self._sel.close()
        os.close(self._wake)

    def _loop(self) -> None:
        while not self._stopping:
            try:
                ready = self._sel.select(timeout=0.5)
            except (OSError, ValueError):
                if self._stopping:
                    return
                raise
            for key, _ in ready:
                count = self._read(key.fd)
                if key.data is None:
                    continue  # wake-up only
                kind, index = key.data
                for _ in range(count):
                    self.inbox.put(IrqEvent(kind, index))

    @staticmethod
    def _read(fd: int) -> int:
        try:
            return os.eventfd_read(fd)
        except BlockingIOError:
            return 0
        except OSError as exc:
            log.warning("eventfd %d read failed: %s", fd, exc)
            return 0
