"""
Event notifier: durable per-subscriber event queues streamed as server-sent events.

Delivery is at-least-once. A (re)connecting subscriber first receives every
event addressed to it that is not yet acknowledged, in id order, then new
ones as they are emitted; consumers deduplicate by event id. Every event has
one target, so an acknowledged event is dropped from the store.
"""
import asyncio
import json
import threading
from collections import OrderedDict
from typing import AsyncIterator, Callable, List, Optional, Set

from ..exceptions import DuplicateSubscriber, UnknownEvent
from ..logger import logger, log_action
from .records import Event, EventKind
from .store import JournaledStore

EVENTS = "events"
EVENT_SEQ = "event_seq"
# acknowledged events remembered for idempotent re-acks
RECENT_ACKS = 4096


def format_sse(event: Event) -> str:
    data = json.dumps(event.model_dump(mode="json"), separators=(",", ":"))
    return f"id: {event.event_id}\nevent: {event.kind.value}\ndata: {data}\n\n"


KEEPALIVE = ": keepalive\n\n"


class Notifier:
    def __init__(self, store: JournaledStore, keepalive_s: float = 15.0):
        self.store = store
        self.keepalive_s = keepalive_s
        self._cond = threading.Condition()
        self._active: Set[str] = set()
        saved = (store.get(EVENT_SEQ, "next") or {}).get("value", 1)
        self._next_id = max(saved, 1 + max((int(k) for k, _ in store.items(EVENTS)), default=0))
        self._recent_acks: "OrderedDict[int, Event]" = OrderedDict()
        self.on_ack: Optional[Callable[[Event], None]] = None

    def emit(self, kind: EventKind, job_id: str, target: str, payload: Optional[dict] = None) -> Event:
        with self._cond:
            event = Event(event_id=self._next_id, kind=kind, job_id=job_id, target=target,
                          payload=payload or {})
            self._next_id += 1
            self.store.put(EVENT_SEQ, "next", {"value": self._next_id})
            self.store.put(EVENTS, str(event.event_id), event.model_dump(mode="json"))
            self._cond.notify_all()
        log_action(logger, 'EVENT_EMITTED', job_id=job_id, event_id=event.event_id,
                   compute_id=target, message=f"{kind.value} -> {target}")
        return event

    def get(self, event_id: int) -> Optional[Event]:
        doc = self.store.get(EVENTS, str(event_id))
        return Event.model_validate(doc) if doc else None

    def events(self, job_id: Optional[str] = None) -> List[Event]:
        """Events not yet acknowledged"""
        found = [Event.model_validate(doc) for _, doc in self.store.items(EVENTS)]
        if job_id is not None:
            found = [e for e in found if e.job_id == job_id]
        return sorted(found, key=lambda e: e.event_id)

    def pending(self, subscriber: str, after: int = 0) -> List[Event]:
        return [e for e in self.events() if e.target == subscriber and not e.acked and e.event_id > after]

    def ack(self, subscriber: str, event_id: int) -> Event:
        """Idempotent; acknowledging somebody else's event is UnknownEvent"""
        with self._cond:
            event = self.get(event_id) or self._recent_acks.get(event_id)
            if event is None or event.target != subscriber:
                raise UnknownEvent(f"no event {event_id} for {subscriber}", event_id=event_id)
            if event.acked:
                return event
            event = event.model_copy(update={"acked": True})
            self.store.delete(EVENTS, str(event_id))
            self._recent_acks[event_id] = event
            while len(self._recent_acks) > RECENT_ACKS:
                self._recent_acks.popitem(last=False)
        if self.on_ack is not None:
            self.on_ack(event)
        return event

    # ---- streams ----

    def attach(self, subscriber: str):
        with self._cond:
            if subscriber in self._active:
                raise DuplicateSubscriber(f"{subscriber} already has an open stream", subscriber=subscriber)
            self._active.add(subscriber)
        log_action(logger, 'SUBSCRIBER_ATTACHED', compute_id=subscriber, message="notify stream opened")

    def detach(self, subscriber: str):
        with self._cond:
            self._active.discard(subscriber)
        log_action(logger, 'SUBSCRIBER_DETACHED', compute_id=subscriber, message="notify stream closed")

    def is_attached(self, subscriber: str) -> bool:
        with self._cond:
            return subscriber in self._active

    def wait_pending(self, subscriber: str, after: int, timeout: float) -> List[Event]:
        """Unacknowledged events newer than ``after``; blocks up to ``timeout`` for one"""
        with self._cond:
            found = self.pending(subscriber, after)
            if not found:
                self._cond.wait(timeout)
                found = self.pending(subscriber, after)
            return found

    async def stream(self, subscriber: str) -> AsyncIterator[str]:
        """SSE text for an attached subscriber; detaches when the consumer goes away"""
        last = 0
        try:
            while True:
                events = await asyncio.to_thread(self.wait_pending, subscriber, last, self.keepalive_s)
                if not events:
                    yield KEEPALIVE
                    continue
                for event in events:
                    last = event.event_id
                    yield format_sse(event)
        finally:
            self.detach(subscriber)
