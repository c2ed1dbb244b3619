"""
Channel handle: one worker's endpoint on one channel group.

The nine operations (join, leave, send, recv, recv_fifo, peek, broadcast,
ends, empty) behave the same over every backend; a backend only decides how
bytes travel between handles. Membership is published as retained presence
records on the job's broker under ``<job>/<channel>/<group>/$presence/<worker>``.
"""
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterator, List, Optional, Set, Tuple

from ..exceptions import (AlreadyJoined, ChannelClosed, ChannelTimeout, NotJoined, PeerLeft,
                          SendToUnknownEnd)
from ..logger import logger, log_action
from ..tag.models import BackendKind
from .broker import connect_broker
from .shaping import Shaper

PRESENCE = "$presence"


@dataclass(frozen=True, order=True)
class EndId:
    worker_id: str
    channel: str
    group: str

    def __str__(self):
        return f"{self.channel}/{self.group}/{self.worker_id}"


@dataclass
class Message:
    headers: Dict[str, str] = field(default_factory=dict)
    payload: bytes = b""
    # wall-clock time the message reached the receiver's queue
    arrived_at: float = 0.0

    @classmethod
    def build(cls, payload: bytes = b"", func_tag: str = "", **headers) -> "Message":
        merged = {k: str(v) for k, v in headers.items()}
        merged["func_tag"] = func_tag
        return cls(headers=merged, payload=bytes(payload))

    @property
    def func_tag(self) -> str:
        return self.headers.get("func_tag", "")

    @property
    def seq(self) -> int:
        return int(self.headers.get("seq", "-1"))

    @property
    def sender(self) -> str:
        return self.headers.get("sender", "")

    def header(self, key: str, default: str = "") -> str:
        return self.headers.get(key, default)


@dataclass
class PeerInfo:
    end: EndId
    role: str
    address: str = ""


class ChannelHandle:
    def __init__(self, job_id: str, channel: str, group: str, worker_id: str, role: str,
                 peer_role: str, backend: BackendKind = BackendKind.BROKER_SIM,
                 broker_address: str = "inproc://default",
                 bandwidth_shape: Optional[Dict[str, float]] = None,
                 func_tags: Optional[List[str]] = None,
                 selector: Optional[Callable[[EndId], bool]] = None):
        self.job_id = job_id
        self.channel = channel
        self.my_end = EndId(worker_id, channel, group)
        self.role = role
        self.peer_role = peer_role
        self.backend = backend
        self.broker_address = broker_address
        self.bandwidth_shape = dict(bandwidth_shape or {})
        self.func_tags = list(func_tags or [])
        self.selector = selector

        self.bytes_sent = 0
        self._seq = itertools.count(1)
        self._cond = threading.Condition()
        self._joined = False
        self._peers: Dict[EndId, PeerInfo] = {}
        self._departed: Set[EndId] = set()
        self._queues: Dict[EndId, Deque[Tuple[int, Message]]] = {}
        self._arrivals = itertools.count()
        self._broker = None
        self._presence_sub = None
        self._shaper: Optional[Shaper] = None
        self._transport = None

    def __repr__(self):
        return f"ChannelHandle({self.my_end}, {self.backend.value})"

    @property
    def is_self_channel(self) -> bool:
        return self.role == self.peer_role

    @property
    def joined(self) -> bool:
        return self._joined

    def _topic(self, *levels: str) -> str:
        return "/".join((self.job_id, self.channel, self.my_end.group) + levels)

    # ---- membership ----

    def join(self):
        """Allocate the receive queue and announce presence to the group"""
        with self._cond:
            if self._joined:
                raise AlreadyJoined(f"{self.my_end} already joined")
        from .backends import make_transport

        broker = connect_broker(self.broker_address)
        with self._cond:
            self._broker = broker
            self._peers.clear()
            self._departed.clear()
            self._queues.clear()
            self._shaper = Shaper(self.bandwidth_shape, self.my_end.worker_id)
            self._joined = True

        self._transport = make_transport(self)
        address = self._transport.open()
        self._presence_sub = broker.subscribe(self._topic(PRESENCE, "+"), self._on_presence)
        broker.publish(self._topic(PRESENCE, self.my_end.worker_id),
                       {"worker_id": self.my_end.worker_id, "role": self.role, "address": address or ""},
                       b"1", retain=True)
        log_action(logger, 'CHANNEL_JOINED', job_id=self.job_id, worker_id=self.my_end.worker_id,
                   channel=self.channel, message=f"joined group {self.my_end.group} ({self.backend.value})")

    def leave(self):
        """Withdraw presence and drop unreceived messages"""
        with self._cond:
            if not self._joined:
                raise NotJoined(f"{self.my_end} is not joined")
            self._joined = False
            self._cond.notify_all()

        try:
            self._transport.close()
            self._broker.publish(self._topic(PRESENCE, self.my_end.worker_id), {}, b"", retain=True)
            self._broker.unsubscribe(self._presence_sub)
        finally:
            self._shaper.close()
            with self._cond:
                self._queues.clear()
                self._peers.clear()
                self._cond.notify_all()
        log_action(logger, 'CHANNEL_LEFT', job_id=self.job_id, worker_id=self.my_end.worker_id,
                   channel=self.channel, message=f"left group {self.my_end.group}")

    def _on_presence(self, topic: str, headers: Dict[str, str], payload: bytes):
        worker_id = topic.rsplit("/", 1)[-1]
        if worker_id == self.my_end.worker_id:
            return
        end = EndId(worker_id, self.channel, self.my_end.group)
        if payload:
            if headers.get("role") != self.peer_role:
                return
            info = PeerInfo(end, headers.get("role", ""), headers.get("address", ""))
            self._shaper.submit(worker_id, 0, lambda: self._add_peer(info))
        else:
            self._shaper.submit(worker_id, 0, lambda: self.peer_departed(end))

    def _add_peer(self, info: PeerInfo):
        with self._cond:
            if not self._joined:
                return
            self._peers[info.end] = info
            self._departed.discard(info.end)
            self._cond.notify_all()

    def peer_departed(self, end: EndId):
        with self._cond:
            if end in self._peers or end in self._queues:
                self._departed.add(end)
            self._peers.pop(end, None)
            self._cond.notify_all()

    def peer_info(self, end: EndId) -> Optional[PeerInfo]:
        with self._cond:
            return self._peers.get(end)

    # ---- inbound path ----

    def inbound(self, headers: Dict[str, str], payload: bytes):
        """Called by the transport for every message addressed to this end"""
        sender = headers.get("sender", "")
        end = EndId(sender, self.channel, self.my_end.group)
        message = Message(headers=headers, payload=payload)
        shaper = self._shaper
        if shaper is None:
            return
        shaper.submit(sender, len(payload), lambda: self._enqueue(end, message))

    def inbound_departure(self, worker_id: str):
        """Departure announced on the data path, ordered after that peer's messages"""
        end = EndId(worker_id, self.channel, self.my_end.group)
        shaper = self._shaper
        if shaper is not None:
            shaper.submit(worker_id, 0, lambda: self.peer_departed(end))

    def _enqueue(self, end: EndId, message: Message):
        with self._cond:
            if not self._joined:
                return
            message.arrived_at = time.time()
            self._queues.setdefault(end, deque()).append((next(self._arrivals), message))
            self._cond.notify_all()

    # ---- sending ----

    def _check_joined(self):
        if not self._joined:
            raise ChannelClosed(f"{self.my_end} is not joined")

    def send(self, end: EndId, msg: Message):
        with self._cond:
            self._check_joined()
            to_self = end == self.my_end and self.is_self_channel
            peer = None if to_self else self._peers.get(end)
            if not to_self and peer is None:
                raise SendToUnknownEnd(f"{end} is not a peer of {self.my_end}")
            headers = {**msg.headers, "sender": self.my_end.worker_id, "seq": str(next(self._seq))}
            headers.setdefault("func_tag", "")

        if to_self:
            self._enqueue(self.my_end, Message(headers=headers, payload=bytes(msg.payload)))
        else:
            self._transport.deliver(peer, headers, bytes(msg.payload))
        with self._cond:
            self.bytes_sent += len(msg.payload)

    def broadcast(self, msg: Message) -> List[EndId]:
        """send() to every current peer (snapshot at call time)"""
        with self._cond:
            self._check_joined()
            targets = sorted(self._peers)
        for end in targets:
            self.send(end, msg)
        return targets

    # ---- receiving ----

    def _wait(self, predicate: Callable[[], bool], timeout: Optional[float], what: str):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not predicate():
            self._check_joined()
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise ChannelTimeout(f"{self.my_end}: timed out waiting for {what}")
            self._cond.wait(remaining)

    def recv(self, end: EndId, timeout: Optional[float] = None) -> Message:
        """Oldest message from ``end``; PeerLeft once it departed with nothing queued"""
        with self._cond:
            self._check_joined()
            self._wait(lambda: bool(self._queues.get(end)) or end in self._departed,
                       timeout, f"a message from {end}")
            queue = self._queues.get(end)
            if queue:
                return queue.popleft()[1]
            raise PeerLeft(end)

    def recv_fifo(self, ends: List[EndId], timeout: Optional[float] = None) -> Iterator[Tuple[EndId, object]]:
        """
        One (end, message) per end, in arrival order at this handle.

        Departed ends with nothing queued yield (end, PeerLeft). The timeout
        bounds the whole iteration; expiry raises ChannelTimeout naming the
        ends still missing.
        """
        remaining = list(dict.fromkeys(ends))
        deadline = None if timeout is None else time.monotonic() + timeout
        while remaining:
            with self._cond:
                def ready():
                    return any(self._queues.get(e) or e in self._departed for e in remaining)
                budget = None if deadline is None else max(0.0, deadline - time.monotonic())
                try:
                    self._wait(ready, budget, f"{len(remaining)} end(s)")
                except ChannelTimeout:
                    raise ChannelTimeout(
                        f"{self.my_end}: no message from {', '.join(map(str, remaining))}",
                        missing=[str(e) for e in remaining]) from None
                queued = [(self._queues[e][0][0], e) for e in remaining if self._queues.get(e)]
                if queued:
                    _, end = min(queued)
                    item = self._queues[end].popleft()[1]
                else:
                    end = next(e for e in remaining if e in self._departed)
                    item = PeerLeft(end)
                remaining.remove(end)
            yield end, item

    def peek(self, end: EndId) -> Optional[Message]:
        with self._cond:
            self._check_joined()
            queue = self._queues.get(end)
            return queue[0][1] if queue else None

    def pending(self) -> int:
        with self._cond:
            return sum(len(q) for q in self._queues.values())

    def ends(self) -> List[EndId]:
        """Current peers through the selection filter, sorted"""
        with self._cond:
            self._check_joined()
            peers = sorted(self._peers)
        if self.selector is None:
            return peers
        return [e for e in peers if self.selector(e)]

    def empty(self) -> bool:
        with self._cond:
            self._check_joined()
            return not self._peers

    def end_of(self, worker_id: str) -> EndId:
        return EndId(worker_id, self.channel, self.my_end.group)

    def await_peers(self, worker_ids, timeout: Optional[float] = None) -> List[EndId]:
        """Block until every named worker is a peer"""
        wanted = [self.end_of(w) for w in worker_ids if w != self.my_end.worker_id]
        with self._cond:
            self._check_joined()
            self._wait(lambda: all(e in self._peers for e in wanted), timeout,
                       f"peers {sorted(worker_ids)}")
        return sorted(wanted)
