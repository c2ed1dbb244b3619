"""
Topic broker with MQTT semantics: '/'-separated topics, '+' matches one
level, a trailing '#' matches the rest, retained messages are replayed to
new subscribers and a retained publish with an empty payload clears them.

Deliveries happen under the broker lock in the publisher's thread, so every
subscriber observes one global publish order.
"""
import itertools
import threading
from typing import Callable, Dict, Optional, Tuple

from ..exceptions import BackendUnavailable

Callback = Callable[[str, Dict[str, str], bytes], None]


def topic_matches(pattern: str, topic: str) -> bool:
    pattern_levels = pattern.split("/")
    topic_levels = topic.split("/")
    for i, level in enumerate(pattern_levels):
        if level == "#":
            return i == len(pattern_levels) - 1
        if i >= len(topic_levels):
            return False
        if level != "+" and level != topic_levels[i]:
            return False
    return len(pattern_levels) == len(topic_levels)


class Broker:
    """In-process broker; also the core behind BrokerServer"""

    def __init__(self, name: str = "local"):
        self.name = name
        self._lock = threading.RLock()
        self._subs: Dict[int, Tuple[str, Callback]] = {}
        self._retained: Dict[str, Tuple[Dict[str, str], bytes]] = {}
        self._ids = itertools.count(1)
        self.closed = False

    def subscribe(self, pattern: str, callback: Callback) -> int:
        with self._lock:
            self._ensure_open()
            sub_id = next(self._ids)
            self._subs[sub_id] = (pattern, callback)
            for topic in sorted(self._retained):
                if topic_matches(pattern, topic):
                    headers, payload = self._retained[topic]
                    callback(topic, dict(headers), payload)
            return sub_id

    def unsubscribe(self, sub_id: int):
        with self._lock:
            self._subs.pop(sub_id, None)

    def publish(self, topic: str, headers: Dict[str, str], payload: bytes = b"",
                retain: bool = False) -> int:
        """Deliver to every matching subscription; returns the delivery count"""
        with self._lock:
            self._ensure_open()
            if retain:
                if payload:
                    self._retained[topic] = (dict(headers), payload)
                else:
                    self._retained.pop(topic, None)
            delivered = 0
            for pattern, callback in list(self._subs.values()):
                if topic_matches(pattern, topic):
                    callback(topic, dict(headers), payload)
                    delivered += 1
            return delivered

    def retained(self, pattern: str) -> Dict[str, Tuple[Dict[str, str], bytes]]:
        with self._lock:
            return {t: v for t, v in self._retained.items() if topic_matches(pattern, t)}

    def close(self):
        with self._lock:
            self.closed = True
            self._subs.clear()

    def _ensure_open(self):
        if self.closed:
            raise BackendUnavailable(f"broker {self.name} is closed")


_registry: Dict[str, object] = {}
_registry_lock = threading.Lock()


def connect_broker(address: str):
    """
    Shared broker connection for this process.

    'inproc://<name>' gives an in-process Broker, 'tcp://host:port' a
    RemoteBroker client of a BrokerServer.
    """
    with _registry_lock:
        broker = _registry.get(address)
        if broker is not None and not broker.closed:
            return broker
        if address.startswith("inproc://"):
            broker = Broker(address[len("inproc://"):])
        elif address.startswith("tcp://"):
            from .broker_server import RemoteBroker
            broker = RemoteBroker(address)
        else:
            raise BackendUnavailable(f"unsupported broker address {address!r}")
        _registry[address] = broker
        return broker


def reset_brokers(address: Optional[str] = None):
    """Close shared brokers (all, or one address)"""
    with _registry_lock:
        targets = [address] if address else list(_registry)
        for key in targets:
            broker = _registry.pop(key, None)
            if broker is not None:
                broker.close()
