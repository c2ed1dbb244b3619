"""
Length-prefixed frames for socket transports.

    u32 BE  total length of everything after this field
    u16 BE  header count
    per header: u16 BE key length, key (utf-8), u32 BE value length, value (utf-8)
    payload bytes (the remainder)
"""
import socket
import struct
from typing import Dict, Optional, Tuple

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")

MAX_FRAME = 1 << 30


def encode_frame(headers: Dict[str, str], payload: bytes = b"") -> bytes:
    parts = [_U16.pack(len(headers))]
    for key, value in headers.items():
        k = str(key).encode("utf-8")
        v = str(value).encode("utf-8")
        parts.append(_U16.pack(len(k)))
        parts.append(k)
        parts.append(_U32.pack(len(v)))
        parts.append(v)
    parts.append(bytes(payload))
    body = b"".join(parts)
    return _U32.pack(len(body)) + body


def decode_body(body: bytes) -> Tuple[Dict[str, str], bytes]:
    view = memoryview(body)
    (count,) = _U16.unpack_from(view, 0)
    offset = _U16.size
    headers = {}
    for _ in range(count):
        (klen,) = _U16.unpack_from(view, offset)
        offset += _U16.size
        key = bytes(view[offset:offset + klen]).decode("utf-8")
        offset += klen
        (vlen,) = _U32.unpack_from(view, offset)
        offset += _U32.size
        headers[key] = bytes(view[offset:offset + vlen]).decode("utf-8")
        offset += vlen
    return headers, bytes(view[offset:])


def _read_exact(sock: socket.socket, size: int) -> Optional[bytes]:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Optional[Tuple[Dict[str, str], bytes]]:
    """Next frame from the socket, or None on a clean close"""
    head = _read_exact(sock, _U32.size)
    if head is None:
        return None
    (length,) = _U32.unpack(head)
    if length > MAX_FRAME:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    body = _read_exact(sock, length)
    if body is None:
        return None
    return decode_body(body)


def write_frame(sock: socket.socket, headers: Dict[str, str], payload: bytes = b""):
    sock.sendall(encode_frame(headers, payload))


def parse_address(address: str) -> Tuple[str, int]:
    """'tcp://host:port' or 'host:port' -> (host, port)"""
    if "://" in address:
        address = address.split("://", 1)[1]
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)
