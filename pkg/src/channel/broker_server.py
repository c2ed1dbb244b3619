"""
Broker service over local TCP so worker processes share one topic space.

Control headers carry a '$' prefix; everything else is the message's own
headers. Requests carry '$rid' and are answered with an '$op=ack' frame once
applied (for subscriptions, after retained messages were forwarded).
"""
import itertools
import socket
import threading
from typing import Dict, Optional

from ..exceptions import BackendUnavailable, ChannelTimeout
from ..logger import logger, log_action
from .broker import Broker, Callback
from .framing import parse_address, read_frame, write_frame

REQUEST_TIMEOUT_S = 30.0


def _split(headers: Dict[str, str]):
    control = {k: v for k, v in headers.items() if k.startswith("$")}
    user = {k: v for k, v in headers.items() if not k.startswith("$")}
    return control, user


class _Connection:
    """One client connection on the server side"""

    def __init__(self, server: "BrokerServer", sock: socket.socket):
        self.server = server
        self.sock = sock
        self.write_lock = threading.Lock()
        self.subs: Dict[str, int] = {}

    def send(self, headers: Dict[str, str], payload: bytes = b""):
        with self.write_lock:
            write_frame(self.sock, headers, payload)

    def forwarder(self, remote_sub: str) -> Callback:
        def forward(topic: str, headers: Dict[str, str], payload: bytes):
            try:
                self.send({**headers, "$op": "msg", "$sub": remote_sub, "$topic": topic}, payload)
            except OSError:
                pass
        return forward

    def serve(self):
        broker = self.server.broker
        try:
            while True:
                frame = read_frame(self.sock)
                if frame is None:
                    break
                control, user = _split(frame[0])
                op = control.get("$op")
                if op == "pub":
                    broker.publish(control["$topic"], user, frame[1], retain=control.get("$retain") == "1")
                elif op == "sub":
                    self.subs[control["$sub"]] = broker.subscribe(control["$pattern"],
                                                                  self.forwarder(control["$sub"]))
                elif op == "unsub":
                    sub_id = self.subs.pop(control["$sub"], None)
                    if sub_id is not None:
                        broker.unsubscribe(sub_id)
                if "$rid" in control:
                    self.send({"$op": "ack", "$rid": control["$rid"]})
        except (OSError, ValueError):
            pass
        finally:
            for sub_id in self.subs.values():
                broker.unsubscribe(sub_id)
            try:
                self.sock.close()
            except OSError:
                pass


class BrokerServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, broker: Optional[Broker] = None):
        self.broker = broker or Broker("server")
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self.host, self.port = self._sock.getsockname()[:2]
        self._thread: Optional[threading.Thread] = None
        self._stopped = threading.Event()

    @property
    def address(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    def start(self) -> "BrokerServer":
        self._thread = threading.Thread(target=self._accept_loop, name="broker-accept", daemon=True)
        self._thread.start()
        log_action(logger, 'BROKER_STARTED', message=f"broker listening on {self.address}")
        return self

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                sock, _ = self._sock.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock)
            threading.Thread(target=conn.serve, name="broker-conn", daemon=True).start()

    def serve_forever(self):
        self.start()
        self._stopped.wait()

    def stop(self):
        self._stopped.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self.broker.close()


class RemoteBroker:
    """Client with the same subscribe/publish surface as Broker"""

    def __init__(self, address: str, timeout: float = REQUEST_TIMEOUT_S):
        self.address = address
        self.timeout = timeout
        try:
            self._sock = socket.create_connection(parse_address(address), timeout=timeout)
        except OSError as e:
            raise BackendUnavailable(f"cannot reach broker at {address}: {e}") from e
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._write_lock = threading.Lock()
        self._cond = threading.Condition()
        self._acked: set = set()
        self._callbacks: Dict[str, Callback] = {}
        self._ids = itertools.count(1)
        self.closed = False
        threading.Thread(target=self._read_loop, name="broker-client", daemon=True).start()

    def _read_loop(self):
        try:
            while True:
                frame = read_frame(self._sock)
                if frame is None:
                    break
                control, user = _split(frame[0])
                if control.get("$op") == "ack":
                    with self._cond:
                        self._acked.add(control["$rid"])
                        self._cond.notify_all()
                elif control.get("$op") == "msg":
                    callback = self._callbacks.get(control["$sub"])
                    if callback is not None:
                        callback(control["$topic"], user, frame[1])
        except (OSError, ValueError):
            pass
        finally:
            with self._cond:
                self.closed = True
                self._cond.notify_all()

    def _request(self, control: Dict[str, str], user: Optional[Dict[str, str]] = None,
                 payload: bytes = b""):
        if self.closed:
            raise BackendUnavailable(f"broker connection {self.address} is closed")
        rid = str(next(self._ids))
        with self._write_lock:
            try:
                write_frame(self._sock, {**(user or {}), **control, "$rid": rid}, payload)
            except OSError as e:
                raise BackendUnavailable(f"broker write failed: {e}") from e
        with self._cond:
            if not self._cond.wait_for(lambda: rid in self._acked or self.closed, self.timeout):
                raise ChannelTimeout(f"broker did not acknowledge {control.get('$op')}")
            if rid not in self._acked:
                raise BackendUnavailable(f"broker connection {self.address} lost")
            self._acked.discard(rid)

    def subscribe(self, pattern: str, callback: Callback) -> str:
        sub_id = f"s{next(self._ids)}"
        self._callbacks[sub_id] = callback
        self._request({"$op": "sub", "$sub": sub_id, "$pattern": pattern})
        return sub_id

    def unsubscribe(self, sub_id: str):
        self._callbacks.pop(sub_id, None)
        if not self.closed:
            self._request({"$op": "unsub", "$sub": sub_id})

    def publish(self, topic: str, headers: Dict[str, str], payload: bytes = b"",
                retain: bool = False):
        self._request({"$op": "pub", "$topic": topic, "$retain": "1" if retain else "0"},
                      headers, payload)

    def close(self):
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
            self._sock.close()
        except OSError:
            pass
