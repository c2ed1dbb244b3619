"""
Backends move message bytes between handles.

BrokerSim publishes to ``<job>/<channel>/<group>/<worker>`` on the shared
broker. PointToPoint keeps a listener per handle (advertised through the
presence record) and one persistent connection per peer; on close it sends a
'bye' frame down every outbound connection and waits for the peer to
acknowledge it, so departures are observed after the data that preceded them.
"""
import logging
import socket
import struct
import threading
from typing import Dict, List, Optional, Tuple

from ..exceptions import BackendUnavailable, ChannelClosed
from ..logger import logger, log_action
from ..tag.models import BackendKind
from .framing import read_frame, write_frame

BYE_ACK_TIMEOUT_S = 5.0


class Transport:
    def __init__(self, handle):
        self.handle = handle

    def open(self) -> Optional[str]:
        """Start receiving; returns the address to advertise, if any"""
        raise NotImplementedError

    def deliver(self, peer, headers: Dict[str, str], payload: bytes):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError


class BrokerSimTransport(Transport):
    def __init__(self, handle):
        super().__init__(handle)
        self._sub = None

    def _data_topic(self, worker_id: str) -> str:
        h = self.handle
        return f"{h.job_id}/{h.channel}/{h.my_end.group}/{worker_id}"

    def open(self) -> Optional[str]:
        broker = self.handle._broker
        self._sub = broker.subscribe(self._data_topic(self.handle.my_end.worker_id), self._on_message)
        return None

    def _on_message(self, topic: str, headers: Dict[str, str], payload: bytes):
        self.handle.inbound(headers, payload)

    def deliver(self, peer, headers: Dict[str, str], payload: bytes):
        self.handle._broker.publish(self._data_topic(peer.end.worker_id), headers, payload)

    def close(self):
        if self._sub is not None:
            self.handle._broker.unsubscribe(self._sub)
            self._sub = None


class PointToPointTransport(Transport):
    def __init__(self, handle):
        super().__init__(handle)
        self._listener: Optional[socket.socket] = None
        self._outbound: Dict[str, Tuple[socket.socket, threading.Lock]] = {}
        self._inbound: List[socket.socket] = []
        self._lock = threading.Lock()
        self._closed = False

    def open(self) -> Optional[str]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(64)
        self._listener = listener
        host, port = listener.getsockname()[:2]
        threading.Thread(target=self._accept_loop, daemon=True,
                         name=f"p2p-accept-{self.handle.my_end.worker_id}").start()
        return f"{host}:{port}"

    def _accept_loop(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                if self._closed:
                    sock.close()
                    return
                self._inbound.append(sock)
            threading.Thread(target=self._read_loop, args=(sock,), daemon=True).start()

    def _read_loop(self, sock: socket.socket):
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    return
                headers, payload = frame
                kind = headers.pop("$kind", "data")
                if kind == "bye":
                    sender = headers.get("sender", "")
                    self.handle.inbound_departure(sender)
                    write_frame(sock, {"$kind": "bye-ack"})
                    return
                self.handle.inbound(headers, payload)
        except (ValueError, struct.error) as e:
            log_action(logger, 'P2P_BAD_FRAME', level=logging.WARNING, worker_id=self.handle.my_end.worker_id,
                       channel=self.handle.channel, message=f"dropping connection: {e}")
        except OSError:
            return
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _connection(self, peer) -> Tuple[socket.socket, threading.Lock]:
        worker_id = peer.end.worker_id
        with self._lock:
            if self._closed:
                raise ChannelClosed(f"{self.handle.my_end} transport closed")
            conn = self._outbound.get(worker_id)
            if conn is not None:
                return conn
            host, _, port = peer.address.rpartition(":")
            try:
                sock = socket.create_connection((host, int(port)), timeout=10.0)
            except (OSError, ValueError) as e:
                raise BackendUnavailable(f"cannot connect to {peer.end} at {peer.address}: {e}") from e
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = (sock, threading.Lock())
            self._outbound[worker_id] = conn
            return conn

    def deliver(self, peer, headers: Dict[str, str], payload: bytes):
        sock, lock = self._connection(peer)
        with lock:
            try:
                write_frame(sock, {**headers, "$kind": "data"}, payload)
            except OSError as e:
                raise BackendUnavailable(f"send to {peer.end} failed: {e}") from e

    def close(self):
        with self._lock:
            self._closed = True
            outbound = list(self._outbound.items())
            self._outbound.clear()
            inbound = list(self._inbound)
            self._inbound.clear()

        me = self.handle.my_end.worker_id
        for worker_id, (sock, lock) in outbound:
            with lock:
                try:
                    write_frame(sock, {"$kind": "bye", "sender": me})
                    sock.settimeout(BYE_ACK_TIMEOUT_S)
                    read_frame(sock)
                except OSError as e:
                    log_action(logger, 'P2P_BYE_UNACKED', worker_id=me, channel=self.handle.channel,
                               message=f"{worker_id}: {e}")
                finally:
                    sock.close()

        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for sock in inbound:
            try:
                sock.shutdown(socket.SHUT_RDWR)
                sock.close()
            except OSError:
                pass


def make_transport(handle) -> Transport:
    if handle.backend == BackendKind.POINT_TO_POINT:
        return PointToPointTransport(handle)
    return BrokerSimTransport(handle)
