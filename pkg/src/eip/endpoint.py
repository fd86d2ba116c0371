"""Client and server protocol logic.

The server pipeline for each inbound packet is:

1. the inner destination must be one of the server's live identifiers;
2. whitelisted senders are delivered without any cryptographic work;
3. the certificate is verified (temporal validity, identifier, signature);
4. depending on the puzzle policy the sender is challenged, subject to the
   per-prefix shaper, or answered directly;
5. solution retries are checked statelessly and, on success, whitelisted.
"""

from __future__ import annotations

import enum
import logging
import secrets
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

from . import puzzle as puzzles
from .crypto import KeyPair, SuiteId
from .identity import (
    Certificate,
    ClockPolicy,
    Identifier,
    Locator,
    Verdict,
    Whitelist,
    generate_certificate,
    verify,
)
from .puzzle import Challenge, PuzzleIssuer, SolverExhausted
from .shaper import BucketKey, Shaper, ShaperConfig
from .wire import EncapHeader, MsgType, Packet, SecurityHeader, SolutionRetry

log = logging.getLogger(__name__)


class PuzzlePolicy(enum.Enum):
    ALWAYS = "always"
    NEVER = "never"
    IF_AMPLIFYING = "if-amplifying"


class Action(enum.Enum):
    DELIVER = "deliver"
    REPLY = "reply"
    SEND_CHALLENGE = "send-challenge"
    DROP = "drop"


class Reason(enum.Enum):
    OK = "ok"
    WHITELISTED = "whitelisted"
    PUZZLE_SOLVED = "puzzle-solved"
    CHALLENGED = "challenged"
    UNKNOWN_DESTINATION = "unknown-destination"
    LOCATOR_MISMATCH = "locator-mismatch"
    TEMPORALLY_INVALID = "temporally-invalid"
    DURATION_EXCEEDED = "duration-exceeded"
    IDENTIFIER_MISMATCH = "identifier-mismatch"
    BAD_SIGNATURE = "bad-signature"
    SHAPED = "shaped"
    BAD_SOLUTION = "bad-solution"
    NOT_WHITELISTED = "not-whitelisted"
    LEGACY_REJECTED = "legacy-rejected"
    UNEXPECTED_MESSAGE = "unexpected-message"


_VERDICT_REASON = {
    Verdict.UNKNOWN_DESTINATION: Reason.UNKNOWN_DESTINATION,
    Verdict.TEMPORALLY_INVALID: Reason.TEMPORALLY_INVALID,
    Verdict.DURATION_EXCEEDED: Reason.DURATION_EXCEEDED,
    Verdict.IDENTIFIER_MISMATCH: Reason.IDENTIFIER_MISMATCH,
    Verdict.BAD_SIGNATURE: Reason.BAD_SIGNATURE,
}


@dataclass(frozen=True)
class ServerDecision:
    action: Action
    reason: Reason
    outbound: Packet | None = None


@dataclass
class OwnIdentifiers:
    """Rotating set of the server's public identifiers.

    A new identifier is minted every ``rotation_period``; old ones stay live
    for ``overlap`` seconds more so certificates issued against them remain
    acceptable.
    """

    rotation_period: float = 2 * 3600.0
    overlap: float = 600.0
    mint: Callable[[], Identifier] = field(
        default=lambda: Identifier.from_tag(secrets.randbits(121))
    )
    created: dict[Identifier, float] = field(default_factory=dict)

    def rotate(self, now: float) -> set[Identifier]:
        if not self.created or now - max(self.created.values()) >= self.rotation_period:
            self.created[self.mint()] = now
        newest = max(self.created.values())
        for ident, born in list(self.created.items()):
            if born != newest and now - born > self.rotation_period + self.overlap:
                del self.created[ident]
        return set(self.created)

    @property
    def current(self) -> Identifier:
        return max(self.created, key=self.created.__getitem__)

    def __contains__(self, ident: object) -> bool:
        return ident in self.created

    def __iter__(self):
        return iter(self.created)

    def __len__(self) -> int:
        return len(self.created)


def _no_reply(payload: bytes) -> bytes | None:
    return None


@dataclass
class ServerConfig:
    locator: Locator
    clock_policy: ClockPolicy = field(default_factory=ClockPolicy)
    puzzle_policy: PuzzlePolicy = PuzzlePolicy.ALWAYS
    k_bm: int = 12
    l: int = 0
    shaper_config: ShaperConfig | None = None
    legacy_allowed: bool = False
    amplification_estimate: Callable[[bytes], float] = lambda payload: 1.0
    responder: Callable[[bytes], bytes | None] = _no_reply
    rotation_period: float = 2 * 3600.0
    overlap: float = 600.0
    puzzle_rotation: float = 300.0
    puzzle_window: int = 2
    suite: SuiteId = SuiteId.HMAC_SHA3_256


class Server:
    """Mutable per-server state plus the inbound packet pipeline.

    Not thread-safe as a whole; callers serialize ``process`` per instance.
    """

    def __init__(
        self,
        config: ServerConfig,
        now: float = 0.0,
        ids: OwnIdentifiers | None = None,
        issuer: PuzzleIssuer | None = None,
    ) -> None:
        self.config = config
        self.own_ids = ids or OwnIdentifiers(config.rotation_period, config.overlap)
        self.own_ids.rotate(now)
        self.issuer = issuer or PuzzleIssuer(
            config.puzzle_rotation, config.puzzle_window, config.suite
        )
        self.whitelist = Whitelist()
        self.shaper = Shaper(config.shaper_config) if config.shaper_config else None
        self.counters: Counter[str] = Counter()
        self.delivered: deque[tuple[Identifier, bytes]] = deque(maxlen=1024)

    @property
    def id(self) -> Identifier:
        return self.own_ids.current

    def rotate_identifiers(self, now: float) -> set[Identifier]:
        return self.own_ids.rotate(now)

    def _count(self, decision: ServerDecision) -> ServerDecision:
        self.counters[decision.action.value] += 1
        self.counters[f"reason.{decision.reason.value}"] += 1
        return decision

    def _deliver(self, packet: Packet, reason: Reason) -> ServerDecision:
        e = packet.encap
        self.delivered.append((e.inner_src, packet.payload))
        answer = self.config.responder(packet.payload)
        if answer is None:
            return ServerDecision(Action.DELIVER, reason)
        sec = None if packet.legacy else SecurityHeader(MsgType.DATA_WHITELISTED, self.config.suite)
        reply = Packet(EncapHeader(self.config.locator, e.outer_src, e.inner_dst, e.inner_src), sec, answer)
        return ServerDecision(Action.REPLY, reason, reply)

    def _drop(self, reason: Reason) -> ServerDecision:
        return ServerDecision(Action.DROP, reason)

    def _puzzles_active(self, payload: bytes) -> bool:
        policy = self.config.puzzle_policy
        if policy is PuzzlePolicy.ALWAYS:
            return True
        if policy is PuzzlePolicy.NEVER:
            return False
        return self.config.amplification_estimate(payload) >= 1.0

    def process(self, packet: Packet, now: float) -> ServerDecision:
        return self._count(self._process(packet, now))

    def _process(self, packet: Packet, now: float) -> ServerDecision:
        e = packet.encap
        self.own_ids.rotate(now)
        if e.inner_dst not in self.own_ids:
            return self._drop(Reason.UNKNOWN_DESTINATION)

        if packet.legacy:
            if not self.config.legacy_allowed:
                return self._drop(Reason.LEGACY_REJECTED)
            if self.shaper is not None and not self.shaper.admit(BucketKey.for_locator(e.outer_src), now):
                return self._drop(Reason.SHAPED)
            return self._deliver(packet, Reason.OK)

        if self.whitelist.check(e.inner_src, now):
            if packet.msg_type in (MsgType.DATA_WITH_CERT, MsgType.DATA_WHITELISTED):
                self.counters["whitelist_hits"] += 1
                return self._deliver(packet, Reason.WHITELISTED)

        mtype = packet.msg_type
        if mtype == MsgType.DATA_WHITELISTED:
            return self._drop(Reason.NOT_WHITELISTED)
        if mtype == MsgType.CHALLENGE:
            return self._drop(Reason.UNEXPECTED_MESSAGE)

        body = packet.sec.body
        cert = body.cert if isinstance(body, SolutionRetry) else body
        if cert.loc_src != e.outer_src:
            return self._drop(Reason.LOCATOR_MISMATCH)
        verdict = verify(cert, e.inner_src, self.own_ids, now, self.config.clock_policy)
        if verdict in (Verdict.ACCEPT, Verdict.BAD_SIGNATURE):
            self.counters["signature_verifications"] += 1
        if not verdict:
            return self._drop(_VERDICT_REASON[verdict])
        if cert.id_dst != e.inner_dst:
            return self._drop(Reason.UNKNOWN_DESTINATION)

        if mtype == MsgType.SOLUTION_RETRY:
            return self._on_retry(packet, body, now)

        if not self._puzzles_active(packet.payload):
            return self._deliver(packet, Reason.OK)
        if self.shaper is not None and not self.shaper.admit(BucketKey.for_locator(e.outer_src), now):
            return self._drop(Reason.SHAPED)
        challenge = self.issuer.issue(e.inner_src, e.inner_dst, self.config.k_bm, self.config.l, now)
        out = Packet(
            EncapHeader(self.config.locator, e.outer_src, e.inner_dst, e.inner_src),
            SecurityHeader(MsgType.CHALLENGE, self.config.suite, challenge),
        )
        return ServerDecision(Action.SEND_CHALLENGE, Reason.CHALLENGED, out)

    def _on_retry(self, packet: Packet, retry: SolutionRetry, now: float) -> ServerDecision:
        e = packet.encap
        before = self.issuer.mac_computations
        ok = self.issuer.verify(retry.challenge, retry.solution, e.inner_src, e.inner_dst, now)
        self.counters["puzzle_mac_computations"] += self.issuer.mac_computations - before
        if not ok:
            return self._drop(Reason.BAD_SOLUTION)
        if self.shaper is not None:
            self.shaper.on_solution(BucketKey.for_locator(e.outer_src))
        self.whitelist.insert(e.inner_src, retry.cert, self.config.clock_policy)
        return self._deliver(packet, Reason.PUZZLE_SOLVED)


def server_process(server: Server, packet: Packet, now: float) -> ServerDecision:
    return server.process(packet, now)


class ClientState(enum.Enum):
    INIT = "init"
    SENT = "sent"
    CHALLENGED = "challenged"
    SOLVED_SENT = "solved-sent"
    ESTABLISHED = "established"
    FAILED = "failed"


TRANSITIONS: dict[ClientState, frozenset[ClientState]] = {
    ClientState.INIT: frozenset({ClientState.SENT}),
    ClientState.SENT: frozenset({ClientState.ESTABLISHED, ClientState.CHALLENGED}),
    ClientState.CHALLENGED: frozenset({ClientState.SOLVED_SENT, ClientState.FAILED}),
    ClientState.SOLVED_SENT: frozenset({ClientState.ESTABLISHED, ClientState.FAILED}),
    ClientState.ESTABLISHED: frozenset(),
    ClientState.FAILED: frozenset(),
}


class IllegalTransition(RuntimeError):
    pass


@dataclass
class ClientSession:
    keypair: KeyPair
    cert: Certificate
    id_src: Identifier
    id_dst: Identifier
    loc_src: Locator
    loc_dst: Locator
    pending_request: bytes
    state: ClientState = ClientState.INIT
    suite: SuiteId = SuiteId.HMAC_SHA3_256
    seen_challenges: set[bytes] = field(default_factory=set)
    trials: int = 0
    failure: str | None = None
    replies: list[bytes] = field(default_factory=list)

    def advance(self, new: ClientState) -> None:
        if new not in TRANSITIONS[self.state]:
            raise IllegalTransition(f"{self.state.name} -> {new.name}")
        self.state = new

    def encap(self) -> EncapHeader:
        return EncapHeader(self.loc_src, self.loc_dst, self.id_src, self.id_dst)

    def first_packet(self) -> Packet:
        return Packet(
            self.encap(), SecurityHeader(MsgType.DATA_WITH_CERT, self.suite, self.cert), self.pending_request
        )

    def data_packet(self, payload: bytes) -> Packet:
        """Follow-up request from an established (whitelisted) session."""
        return Packet(self.encap(), SecurityHeader(MsgType.DATA_WHITELISTED, self.suite), payload)


def client_initiate(
    keypair: KeyPair,
    loc_src: Locator,
    destination: tuple[Identifier, Locator],
    payload: bytes,
    now: float,
    duration: int = 1800,
    suite: SuiteId = SuiteId.HMAC_SHA3_256,
) -> tuple[ClientSession, Packet]:
    id_dst, loc_dst = destination
    cert, id_src = generate_certificate(keypair, loc_src, loc_dst, id_dst, duration, int(now), suite)
    session = ClientSession(keypair, cert, id_src, id_dst, loc_src, loc_dst, payload, suite=suite)
    session.advance(ClientState.SENT)
    return session, session.first_packet()


def client_on_challenge(session: ClientSession, packet: Packet) -> Packet | None:
    """Solve the challenge and build the retry; duplicates return ``None``."""
    challenge = packet.sec.body if packet.sec is not None else None
    if not isinstance(challenge, Challenge):
        raise ValueError("not a challenge packet")
    raw = challenge.to_bytes()
    if raw in session.seen_challenges or session.state is not ClientState.SENT:
        return None
    session.seen_challenges.add(raw)
    session.advance(ClientState.CHALLENGED)
    try:
        solution = puzzles.solve(challenge, session.id_src, session.id_dst)
    except SolverExhausted as exc:
        session.failure = str(exc)
        session.advance(ClientState.FAILED)
        log.info("session %s failed: %s", session.id_src, exc)
        return None
    session.trials += solution.trials
    session.advance(ClientState.SOLVED_SENT)
    retry = SolutionRetry(challenge, solution, session.cert)
    return Packet(
        session.encap(), SecurityHeader(MsgType.SOLUTION_RETRY, session.suite, retry), session.pending_request
    )


def client_on_reply(session: ClientSession, packet: Packet) -> None:
    if packet.encap.inner_dst != session.id_src:
        return
    if session.state in (ClientState.SENT, ClientState.SOLVED_SENT):
        session.advance(ClientState.ESTABLISHED)
    session.replies.append(packet.payload)
