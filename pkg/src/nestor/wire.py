"""Newline-delimited JSON framing over TCP sockets.

One message per line, UTF-8, compact separators. Used for both the
rendezvous handshake and head/worker traffic.
"""
from __future__ import annotations

import json
import socket
import threading

from .errors import ConnectionFailed, ProtocolError

# Hard cap per line; artifacts travel base64-encoded inside messages, so lines
# can be large, but an unbounded buffer is a denial-of-service hazard.
MAX_LINE_BYTES = 256 * 1024 * 1024
RECV_CHUNK = 1 << 16

_JSON_OPTS = {"separators": (",", ":")}


def encode_message(msg: dict) -> bytes:
    return json.dumps(msg, **_JSON_OPTS).encode("utf-8") + b"\n"


def decode_message(line: bytes) -> dict:
    try:
        msg = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from exc
    if not isinstance(msg, dict):
        raise ProtocolError("message is not a JSON object")
    return msg


def connect(host: str, port: int, timeout: float | None = 10.0) -> "LineChannel":
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectionFailed(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return LineChannel(sock)


class LineChannel:
    """A duplex line-message channel over one TCP socket.

    send() is safe to call from multiple threads; recv() must only be
    called from one thread at a time. recv() with a timeout preserves any
    partially received line for the next call.
    """

    def __init__(self, sock: socket.socket):
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # non-TCP transports (e.g. unix socketpairs in tests)
        self._sock = sock
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        self._closed = False

    def send(self, msg: dict) -> None:
        data = encode_message(msg)
        with self._send_lock:
            if self._closed:
                raise ConnectionFailed("channel is closed")
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ConnectionFailed(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> dict | None:
        """Receive one message. Returns None on clean EOF.

        Raises TimeoutError if no full line arrives within `timeout`.
        """
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[:nl])
                del self._buf[: nl + 1]
                return decode_message(line)
            if len(self._buf) > MAX_LINE_BYTES:
                raise ProtocolError("line exceeds MAX_LINE_BYTES")
            try:
                self._sock.settimeout(timeout)
                chunk = self._sock.recv(RECV_CHUNK)
            except (socket.timeout, BlockingIOError):
                raise TimeoutError("recv timed out") from None
            except OSError as exc:
                if self._closed:
                    return None
                raise ConnectionFailed(f"recv failed: {exc}") from exc
            finally:
                try:
                    self._sock.settimeout(None)
                except OSError:
                    pass
            if not chunk:
                return None  # EOF; any partial line is dropped
            self._buf.extend(chunk)

    def close(self) -> None:
        with self._send_lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    @property
    def closed(self) -> bool:
        return self._closed

    def peername(self) -> tuple:
        try:
            return self._sock.getpeername()
        except OSError:
            return ("?", 0)

    def sockname(self) -> tuple:
        try:
            return self._sock.getsockname()
        except OSError:
            return ("?", 0)
