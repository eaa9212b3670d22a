"""TCP transport for the controller emulator.

One listening endpoint per controller (ports base..base+7 by default), so
the emulator doubles as a standalone conformance target for third-party
clients. Commands and responses are 7-bit ASCII, '/'-terminated, no other
framing; partial commands are buffered per connection.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
from typing import Optional

from .protocol import ControllerBank


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        bank: ControllerBank = self.server.bank  # type: ignore[attr-defined]
        controller_id: int = self.server.controller_id  # type: ignore[attr-defined]
        lock: threading.Lock = self.server.bank_lock  # type: ignore[attr-defined]
        buffer = b""
        while True:
            try:
                data = self.request.recv(4096)
            except OSError:
                break
            if not data:
                break
            buffer += data
            end = buffer.rfind(b"/")
            if end < 0:
                continue
            complete, buffer = buffer[: end + 1], buffer[end + 1 :]
            with lock:
                reply = bank.handle_bytes(controller_id, complete)
            if reply:
                try:
                    self.request.sendall(reply)
                except OSError:
                    break


class _ControllerTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class MotorServer:
    """Serves a ControllerBank over one TCP port per controller."""

    def __init__(self, bank: Optional[ControllerBank] = None, host: str = "127.0.0.1",
                 base_port: int = 8350, tick_hz: float = 100.0) -> None:
        self.bank = bank or ControllerBank()
        self.host = host
        self.base_port = base_port
        self.tick_hz = tick_hz
        self.bank_lock = threading.Lock()
        self._servers: list[_ControllerTCPServer] = []
        self._threads: list[threading.Thread] = []
        self._ticker: Optional[threading.Thread] = None
        self._running = False

    @property
    def ports(self) -> dict[int, int]:
        return {cid: self.base_port + cid - 1 for cid in self.bank.controllers}

    def start(self) -> None:
        self._running = True
        for cid, port in self.ports.items():
            server = _ControllerTCPServer((self.host, port), _Handler)
            server.bank = self.bank  # type: ignore[attr-defined]
            server.controller_id = cid  # type: ignore[attr-defined]
            server.bank_lock = self.bank_lock  # type: ignore[attr-defined]
            thread = threading.Thread(target=server.serve_forever, daemon=True,
                                      name=f"motor-ctrl-{cid}")
            thread.start()
            self._servers.append(server)
            self._threads.append(thread)
        if self.tick_hz > 0:
            self._ticker = threading.Thread(target=self._tick_loop, daemon=True,
                                            name="motor-ticker")
            self._ticker.start()

    def _tick_loop(self) -> None:
        dt = 1.0 / self.tick_hz
        last = time.monotonic()
        while self._running:
            time.sleep(dt)
            now = time.monotonic()
            with self.bank_lock:
                self.bank.tick_all(now - last)
            last = now

    def stop(self) -> None:
        self._running = False
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self._servers.clear()
        if self._ticker is not None:
            self._ticker.join(timeout=1.0)
            self._ticker = None


def send_command(host: str, port: int, data: bytes, timeout: float = 2.0) -> bytes:
    """One-shot client: send '/'-terminated bytes, read one reply burst."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(data)
        sock.settimeout(timeout)
        reply = b""
        expected = data.count(b"/") or 1
        while reply.count(b"/") < expected:
            chunk = sock.recv(4096)
            if not chunk:
                break
            reply += chunk
        return reply
