"""Datagram transports: an in-memory network for tests and a UDP demo binding.

Both route by the packet's outer destination locator. On UDP every endpoint
listens on the same port, so a locator maps to ``(str(locator), port)``;
distinct loopback addresses (127.0.0.1, 127.0.0.2, ...) stand in for hosts.
"""

from __future__ import annotations

import heapq
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .crypto import KeyPair
from .endpoint import (
    ClientSession,
    ClientState,
    Server,
    client_initiate,
    client_on_challenge,
    client_on_reply,
)
from .identity import Identifier, Locator
from .wire import MalformedPacket, MsgType, Packet, decode_packet, encode_packet

log = logging.getLogger(__name__)

DEFAULT_PORT = 4342
MAX_DATAGRAM = 65535


@dataclass
class MemoryNetwork:
    """Delivers encoded packets between registered locators.

    ``loss`` is a drop probability and ``delay`` a fixed latency; both can be
    changed between sends to script scenarios.
    """

    delay: float = 0.001
    loss: float = 0.0
    seed: int = 0
    now: float = 0.0
    handlers: dict[Locator, Callable[[Packet, float], None]] = field(default_factory=dict)
    queue: list = field(default_factory=list)
    sent: int = 0
    dropped: int = 0
    _seq: int = 0

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def attach(self, loc: Locator, handler: Callable[[Packet, float], None]) -> None:
        self.handlers[loc] = handler

    def send(self, packet: Packet) -> None:
        self.sent += 1
        if self.loss and self._rng.random() < self.loss:
            self.dropped += 1
            return
        heapq.heappush(self.queue, (self.now + self.delay, self._seq, encode_packet(packet)))
        self._seq += 1

    def run(self, until: float | None = None) -> None:
        while self.queue and (until is None or self.queue[0][0] <= until):
            t, _, raw = heapq.heappop(self.queue)
            self.now = max(self.now, t)
            packet = decode_packet(raw)
            handler = self.handlers.get(packet.encap.outer_dst)
            if handler is not None:
                handler(packet, self.now)
        if until is not None:
            self.now = max(self.now, until)


def attach_server(net: MemoryNetwork, server: Server, clock_offset: float = 0.0) -> None:
    def handle(packet: Packet, now: float) -> None:
        decision = server.process(packet, now + clock_offset)
        if decision.outbound is not None:
            net.send(decision.outbound)

    net.attach(server.config.locator, handle)


def attach_client(net: MemoryNetwork, session: ClientSession) -> None:
    def handle(packet: Packet, now: float) -> None:
        if packet.encap.inner_dst != session.id_src:
            return
        if packet.msg_type == MsgType.CHALLENGE:
            retry = client_on_challenge(session, packet)
            if retry is not None:
                net.send(retry)
        else:
            client_on_reply(session, packet)

    net.attach(session.loc_src, handle)


class UdpServer:
    """Runs a :class:`Server` on a UDP socket in a background thread."""

    def __init__(self, server: Server, port: int = DEFAULT_PORT, clock: Callable[[], float] = time.time):
        self.server = server
        self.clock = clock
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((str(server.config.locator), port))
        self.port = self.sock.getsockname()[1]
        self.sock.settimeout(0.1)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="eip-udp-server", daemon=True)
        self.malformed = 0

    def start(self) -> "UdpServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self) -> "UdpServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                raw, _addr = self.sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                packet = decode_packet(raw)
            except MalformedPacket as exc:
                self.malformed += 1
                log.debug("dropping malformed datagram: %s", exc)
                continue
            decision = self.server.process(packet, self.clock())
            log.info("%s from %s: %s", packet.msg_type, packet.encap.outer_src, decision.reason.value)
            out = decision.outbound
            if out is not None:
                self.sock.sendto(encode_packet(out), (str(out.encap.outer_dst), self.port))


def udp_exchange(
    keypair: KeyPair,
    loc_src: Locator,
    server_id: Identifier,
    server_loc: Locator,
    payload: bytes,
    port: int = DEFAULT_PORT,
    timeout: float = 5.0,
    sock: socket.socket | None = None,
    on_first_packet: Callable[[bytes], None] | None = None,
) -> ClientSession:
    """Run one request through the full handshake over UDP.

    ``on_first_packet`` receives the encoded first packet right after it is
    sent, which lets tests replay it from elsewhere.
    """
    own = sock is None
    if sock is None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((str(loc_src), port))
    dest = (str(server_loc), port)
    try:
        session, first = client_initiate(keypair, loc_src, (server_id, server_loc), payload, time.time())
        raw_first = encode_packet(first)
        sock.sendto(raw_first, dest)
        if on_first_packet is not None:
            on_first_packet(raw_first)
        deadline = time.monotonic() + timeout
        while session.state not in (ClientState.ESTABLISHED, ClientState.FAILED):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no answer from {dest} (state {session.state.name})")
            sock.settimeout(remaining)
            try:
                raw, _ = sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                continue
            try:
                packet = decode_packet(raw)
            except MalformedPacket:
                continue
            if packet.encap.inner_dst != session.id_src:
                continue
            if packet.msg_type == MsgType.CHALLENGE:
                retry = client_on_challenge(session, packet)
                if retry is not None:
                    sock.sendto(encode_packet(retry), dest)
            else:
                client_on_reply(session, packet)
        return session
    finally:
        if own:
            sock.close()
