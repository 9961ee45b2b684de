"""Remote tail server and the edge-side transports that talk to it."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Optional

import numpy as np

from ..core import SparseMlp, forward
from ..errors import FrameError, RemoteError, TransportError
from .protocol import HEADER_SIZE, Frame, MsgType, activation_frame_size, decode_frame, encode_frame, read_frame

log = logging.getLogger(__name__)


def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, sep, port = str(endpoint).rpartition(":")
    if not sep or not port.isdigit():
        raise TransportError(f"endpoint {endpoint!r} is not host:port")
    return host or "127.0.0.1", int(port)


def tail_class(tail: SparseMlp, activation: np.ndarray) -> int:
    logits = forward(tail, activation.reshape(1, -1))[-1]
    return int(np.argmax(logits[0]))


def handle_request(tail: SparseMlp, frame: Frame) -> tuple[Frame, bool]:
    """Answer one frame.  Returns ``(reply, keep_connection)``."""
    if frame.msg_type == MsgType.ACTIVATION_REQUEST:
        expected = activation_frame_size(tail.input_width)
        if len(frame) != expected:
            return Frame.error(frame.sample_id, f"expected payload_len {expected - HEADER_SIZE}, got {len(frame.payload)}"), False
        return Frame.class_response(frame.sample_id, tail_class(tail, frame.activation)), True
    if frame.msg_type == MsgType.SHUTDOWN:
        return Frame.shutdown(frame.sample_id), False
    return Frame.error(frame.sample_id, f"unexpected message type {int(frame.msg_type)}"), False


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: TailServer = self.server  # type: ignore[assignment]
        while True:
            try:
                frame = read_frame(self.rfile)
            except FrameError as exc:
                self._send(Frame.error(0, str(exc)))
                log.warning("closing connection from %s: %s", self.client_address, exc)
                return
            except OSError as exc:
                log.warning("connection from %s failed: %s", self.client_address, exc)
                return
            if frame is None:
                return
            reply, keep = handle_request(server.tail, frame)
            self._send(reply)
            if frame.msg_type == MsgType.SHUTDOWN:
                server.request_shutdown()
                return
            if not keep:
                return

    def _send(self, frame: Frame) -> None:
        try:
            self.wfile.write(encode_frame(frame))
            self.wfile.flush()
        except OSError:
            pass


class TailServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """Serves tail predictions; one thread per connection, frames in order."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, tail: SparseMlp, address=("127.0.0.1", 0)):
        super().__init__(parse_endpoint(address), _Handler)
        self.tail = tail
        self._thread: Optional[threading.Thread] = None
        self.shutdown_requested = threading.Event()

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def request_shutdown(self) -> None:
        self.shutdown_requested.set()
        threading.Thread(target=self.shutdown, daemon=True).start()

    def start(self) -> "TailServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self.shutdown()
            self._thread.join()
            self._thread = None
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_remote(tail: SparseMlp, listen_endpoint) -> int:
    """Serve until a shutdown frame arrives; returns 0 on a clean stop."""
    server = TailServer(tail, listen_endpoint)
    log.info("tail serving on %s", server.endpoint)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


class LoopbackTransport:
    """In-process stand-in for the network: frames still go through bytes."""

    def __init__(self, tail: SparseMlp):
        self.tail = tail
        self.bytes_sent = 0
        self.bytes_received = 0

    def exchange(self, frame: Frame) -> Frame:
        wire = encode_frame(frame)
        self.bytes_sent += len(wire)
        reply, _ = handle_request(self.tail, decode_frame(wire))
        back = encode_frame(reply)
        self.bytes_received += len(back)
        return _check_reply(decode_frame(back))

    def close(self) -> None:
        pass


class TcpTransport:
    """Stop-and-wait client: one request in flight per connection."""

    def __init__(self, endpoint, timeout: float = 30.0):
        self.address = parse_endpoint(endpoint)
        self.timeout = timeout
        self.bytes_sent = 0
        self.bytes_received = 0
        self._sock: Optional[socket.socket] = None
        self._rfile = None

    def connect(self) -> None:
        self.close()
        self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")

    def exchange(self, frame: Frame) -> Frame:
        if self._sock is None:
            self.connect()
        wire = encode_frame(frame)
        self._sock.sendall(wire)
        self.bytes_sent += len(wire)
        reply = read_frame(self._rfile)
        if reply is None:
            raise ConnectionResetError("remote closed the connection")
        self.bytes_received += len(reply)
        return _check_reply(reply)

    def close(self) -> None:
        if self._rfile is not None:
            self._rfile.close()
            self._rfile = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def _check_reply(reply: Frame) -> Frame:
    if reply.msg_type == MsgType.ERROR:
        raise RemoteError(reply.message)
    return reply


def send_shutdown(endpoint, timeout: float = 10.0) -> Frame:
    transport = TcpTransport(endpoint, timeout)
    try:
        return transport.exchange(Frame.shutdown())
    finally:
        transport.close()
