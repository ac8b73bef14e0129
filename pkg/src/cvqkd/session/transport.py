"""Reliable ordered transports for encoded frames."""

from __future__ import annotations

import queue
import socket
from typing import Callable

from .messages import HEADER, Message, decode, parse_header, trailer_size

_CLOSED = object()


class TransportClosed(ConnectionError):
    pass


class Transport:
    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackTransport(Transport):
    """One end of an in-process pipe; frames are encoded and decoded on the way."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in = inbox
        self._out = outbox
        self.closed = False

    @classmethod
    def pair(cls) -> tuple["LoopbackTransport", "LoopbackTransport"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, msg: Message) -> None:
        if self.closed:
            raise TransportClosed("loopback closed")
        self._out.put(msg.encode())

    def recv(self, timeout: float | None = None) -> Message:
        if self.closed:
            raise TransportClosed("loopback closed")
        try:
            raw = self._in.get(timeout=timeout)
        except queue.Empty:
            raise TransportClosed("receive timed out") from None
        if raw is _CLOSED:
            self.closed = True
            raise TransportClosed("peer closed the loopback")
        return decode(raw)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._out.put(_CLOSED)


class FaultyTransport(Transport):
    """Wraps a transport and rewrites outgoing frames; for fault injection.

    ``fault(index, msg)`` sees every outgoing message with its running index
    and returns the list of messages to forward in its place (possibly empty
    or reordered with held-back ones via ``hold``).
    """

    def __init__(self, inner: Transport, fault: Callable[[int, Message], list[Message]]):
        self.inner = inner
        self.fault = fault
        self.sent = 0

    def send(self, msg: Message) -> None:
        for m in self.fault(self.sent, msg):
            self.inner.send(m)
        self.sent += 1

    def recv(self, timeout: float | None = None) -> Message:
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "SocketTransport":
        return cls(socket.create_connection((host, port), timeout=timeout))

    @classmethod
    def listen(cls, host: str, port: int, timeout: float | None = None) -> "SocketTransport":
        with socket.create_server((host, port)) as srv:
            srv.settimeout(timeout)
            conn, _ = srv.accept()
        conn.settimeout(None)
        return cls(conn)

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def send(self, msg: Message) -> None:
        try:
            self.sock.sendall(msg.encode())
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def recv(self, timeout: float | None = None) -> Message:
        self.sock.settimeout(timeout)
        head = self._read(HEADER.size)
        kind, _, length = parse_header(head)
        return decode(head + self._read(length + trailer_size(kind)))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
