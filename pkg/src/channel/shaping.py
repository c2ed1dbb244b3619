"""
Receiver-side bandwidth emulation.

Each (sender -> receiver) link gets a virtual clock: a message of b bits on
a link of r bit/s is released at max(now, link clock) + b / r. Releases are
ordered per link, so shaping never reorders one sender's messages.
"""
import heapq
import itertools
import threading
import time
from fnmatch import fnmatchcase
from typing import Callable, Dict, Optional


def link_rate(shape: Dict[str, float], sender: str, receiver: str) -> Optional[float]:
    """Slowest rate among patterns matching either endpoint, None when unshaped"""
    rates = [bps for pattern, bps in shape.items()
             if fnmatchcase(sender, pattern) or fnmatchcase(receiver, pattern)]
    return min(rates) if rates else None


class Shaper:
    def __init__(self, shape: Dict[str, float], receiver: str):
        self.shape = dict(shape)
        self.receiver = receiver
        self._clocks: Dict[str, float] = {}
        self._rates: Dict[str, Optional[float]] = {}
        self._heap = []
        self._counter = itertools.count()
        self._cond = threading.Condition()
        self._closed = False
        self._thread: Optional[threading.Thread] = None

    @property
    def active(self) -> bool:
        return bool(self.shape)

    def rate(self, sender: str) -> Optional[float]:
        if sender not in self._rates:
            self._rates[sender] = link_rate(self.shape, sender, self.receiver)
        return self._rates[sender]

    def submit(self, sender: str, size_bytes: int, deliver: Callable[[], None]):
        """Run ``deliver`` once the emulated transfer time has elapsed"""
        with self._cond:
            rate = self.rate(sender) if sender != self.receiver else None
            if rate is None:
                deliver()
                return
            now = time.monotonic()
            start = max(now, self._clocks.get(sender, 0.0))
            release = start + (size_bytes * 8.0 / rate if rate else 0.0)
            self._clocks[sender] = release
            heapq.heappush(self._heap, (release, next(self._counter), sender, deliver))
            self._ensure_thread()
            self._cond.notify_all()

    def _ensure_thread(self):
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, name=f"shaper-{self.receiver}", daemon=True)
            self._thread.start()

    def _run(self):
        while True:
            with self._cond:
                while not self._closed and (not self._heap or self._heap[0][0] > time.monotonic()):
                    timeout = self._heap[0][0] - time.monotonic() if self._heap else None
                    self._cond.wait(timeout)
                if self._closed:
                    return
                _, _, _, deliver = heapq.heappop(self._heap)
            deliver()

    def close(self):
        with self._cond:
            self._closed = True
            self._heap.clear()
            self._cond.notify_all()
