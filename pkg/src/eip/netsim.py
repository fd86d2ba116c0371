"""Deterministic discrete-event simulation of reflection attacks through EIP reflectors.

Bots spoof the victim's locator and send requests to reflectors running the
real server pipeline. Reflector output travels to the victim, which sorts
every arriving packet by comparing its inner destination with the
identifiers it generated itself. Links are delay-only pipes with no
queueing. Bandwidth is accounted with the model's size constants, so the
closed-form model is directly comparable.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import enum
import heapq
import io
import random
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .crypto import KeyPair
from .endpoint import (
    Action,
    ClientSession,
    ClientState,
    OwnIdentifiers,
    PuzzlePolicy,
    Server,
    ServerConfig,
    client_initiate,
    client_on_challenge,
    client_on_reply,
)
from .identity import ClockPolicy, Identifier, Locator, generate_certificate
from .model import ModelParams, Scenario, victim_bandwidth
from .puzzle import PuzzleIssuer
from .shaper import ShaperConfig
from .wire import D_PUZ, D_REQ, D_REQ_CERT, EncapHeader, MsgType, Packet, SecurityHeader

T0 = 1_700_000_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    scenario: Scenario = Scenario.PUZZLES_PLUS_SHAPERS
    seed: int = 1
    duration: float = 60.0
    r_a: float = 10e6
    n_bots: int = 10
    n_reflectors: int = 100
    a_f: float = 1.0
    r_shap: float | None = 10.0
    k_bm: int = 8
    legit_clients: int = 0
    legit_rate: float = 1.0
    d_req: float = D_REQ
    d_req_cert: float = D_REQ_CERT
    d_puz: float = D_PUZ
    hop_delay: float = 0.005
    warmup_fraction: float = 0.1
    key_bits: int = 1024
    cert_duration: int = 3600
    victim_locator: str = "203.0.113.7"

    def validate(self) -> None:
        if self.duration <= 0 or self.r_a < 0 or self.hop_delay < 0:
            raise ConfigError("duration must be positive; r_a and hop_delay non-negative")
        if self.n_reflectors < 1 or (self.r_a > 0 and self.n_bots < 1):
            raise ConfigError("need at least one reflector, and a bot when r_a > 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.scenario is Scenario.PUZZLES_PLUS_SHAPERS and not self.r_shap:
            raise ConfigError("scenario 4 requires a positive r_shap")
        if self.legit_clients and self.legit_rate <= 0:
            raise ConfigError("legit_rate must be positive")
        if self.cert_duration < self.duration:
            raise ConfigError("cert_duration must cover the simulated duration")

    @property
    def model_params(self) -> ModelParams:
        return ModelParams(
            r_a=self.r_a, d_req=self.d_req, d_req_cert=self.d_req_cert, d_puz=self.d_puz,
            a_f=self.a_f, r=self.n_reflectors, r_shap=self.r_shap or 0.0,
        )

    def expected_victim_bps(self) -> float:
        return victim_bandwidth(self.model_params, self.scenario)


def load_config(path: str | Path, **overrides) -> SimConfig:
    """Read ``key = value`` lines (``#`` comments allowed) into a SimConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[sim]\n" + Path(path).read_text())
    raw = dict(parser["sim"])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_mapping(raw)


def config_from_mapping(raw: dict) -> SimConfig:
    fields = {f.name: f for f in dataclasses.fields(SimConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, value)
    cfg = SimConfig(**kwargs)
    cfg.validate()
    return cfg


def _coerce(key: str, value):
    if not isinstance(value, str):
        return Scenario.parse(value) if key == "scenario" else value
    text = value.strip()
    try:
        if key == "scenario":
            return Scenario.parse(text)
        if key == "victim_locator":
            Locator.parse(text)
            return text
        if key == "r_shap" and text.lower() in ("", "none"):
            return None
        if key in ("seed", "n_bots", "n_reflectors", "k_bm", "legit_clients", "key_bits", "cert_duration"):
            return int(text)
        return float(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


class Label(enum.Enum):
    ATTACK = "attack"
    LEGIT = "legit"


def classify_at_victim(packet: Packet, victim_ids) -> Label:
    """Unsolicited traffic is anything not addressed to one of our own identifiers."""
    return Label.LEGIT if packet.encap.inner_dst in victim_ids else Label.ATTACK


@lru_cache(maxsize=None)
def _keypair(bits: int, seed: int) -> KeyPair:
    return KeyPair.generate(bits, seed=seed)


@dataclass
class SimMetrics:
    config: SimConfig
    per_second: list[dict] = field(default_factory=list)
    victim_rx_bps: float = 0.0
    victim_rx_pps: float = 0.0
    victim_attack_bps: float = 0.0
    victim_classified_attack: int = 0
    victim_classified_legit: int = 0
    victim_false_positive: int = 0
    victim_false_negative: int = 0
    reflector: Counter = field(default_factory=Counter)
    bot_bits_sent: float = 0.0
    packets_sent: int = 0
    packets_terminated: int = 0
    packets_in_flight: int = 0
    legit_established: int = 0
    labels: list[tuple[float, str, str, str]] = field(default_factory=list)

    COLUMNS = (
        "second", "victim_rx_bits", "victim_rx_pkts", "attack_pkts", "legit_pkts",
        "bot_tx_bits", "challenges", "replies", "shaped",
    )

    @property
    def conserved(self) -> bool:
        return self.packets_sent == self.packets_terminated + self.packets_in_flight

    def summary(self) -> dict:
        return {
            "victim_rx_bps": self.victim_rx_bps,
            "victim_rx_pps": self.victim_rx_pps,
            "victim_attack_bps": self.victim_attack_bps,
            "expected_bps": self.config.expected_victim_bps(),
            "classified_attack": self.victim_classified_attack,
            "classified_legit": self.victim_classified_legit,
            "false_positive": self.victim_false_positive,
            "false_negative": self.victim_false_negative,
            "bot_bits_sent": self.bot_bits_sent,
            "packets_sent": self.packets_sent,
            "packets_terminated": self.packets_terminated,
            "packets_in_flight": self.packets_in_flight,
            "legit_established": self.legit_established,
            **{f"reflector_{k}": v for k, v in sorted(self.reflector.items())},
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.per_second:
            w.writerow([_cell(row[c]) for c in self.COLUMNS])
        w.writerow(["summary"] + [f"{k}={_cell(v)}" for k, v in self.summary().items()])
        return out.getvalue()

    def labels_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["time", "msg_type", "truth", "classified"])
        for t, mtype, truth, got in self.labels:
            w.writerow([f"{t:.6f}", mtype, truth, got])
        return out.getvalue()


def _cell(v) -> str:
    if isinstance(v, float):
        return str(int(v)) if v.is_integer() else f"{v:.6f}"
    return str(v)


# event kinds
_BOT, _LEGIT, _AT_REFLECTOR, _AT_VICTIM = range(4)


class _Sim:
    def __init__(self, cfg: SimConfig, keep_labels: bool) -> None:
        cfg.validate()
        self.cfg = cfg
        self.keep_labels = keep_labels
        self.rng = random.Random(cfg.seed)
        self.metrics = SimMetrics(cfg)
        self.heap: list = []
        self.seq = 0
        self.victim = Locator.parse(cfg.victim_locator)
        self.victim_ids: set[Identifier] = set()
        self.secs = [Counter() for _ in range(int(-(-cfg.duration // 1)))]
        self.reflectors = [self._make_reflector(i) for i in range(cfg.n_reflectors)]
        self.bot_keys = [_keypair(cfg.key_bits, cfg.seed * 1_000_003 + i) for i in range(cfg.n_bots)]
        self.bot_certs: dict[tuple[int, int], tuple] = {}
        self.bot_ids: dict[tuple[int, int], Identifier] = {}
        # bots start evenly around the reflector ring so every reflector sees a steady stream
        self.bot_next = [i * cfg.n_reflectors // max(cfg.n_bots, 1) for i in range(cfg.n_bots)]
        self.legit: list[ClientSession | None] = [None] * cfg.legit_clients
        self.legit_by_id: dict[Identifier, int] = {}
        self.legit_keys = [
            _keypair(cfg.key_bits, cfg.seed * 1_000_003 + 500_000 + i) for i in range(cfg.legit_clients)
        ]

    # -- construction -------------------------------------------------------

    def _make_reflector(self, i: int) -> Server:
        cfg, s = self.cfg, self.cfg.scenario
        loc = Locator.parse(f"10.{(i >> 8) & 0xFF}.{i & 0xFF}.1")
        rng = random.Random(self.rng.getrandbits(64))
        policy = PuzzlePolicy.NEVER if s in (Scenario.BASELINE, Scenario.CERT_CHECKS) else PuzzlePolicy.ALWAYS
        config = ServerConfig(
            locator=loc,
            clock_policy=ClockPolicy(clock_error=5, max_duration=max(cfg.cert_duration, 3600)),
            puzzle_policy=policy,
            k_bm=cfg.k_bm,
            shaper_config=ShaperConfig(cfg.r_shap) if s is Scenario.PUZZLES_PLUS_SHAPERS else None,
            legacy_allowed=s is Scenario.BASELINE,
            responder=lambda payload: b"",
        )
        ids = OwnIdentifiers(mint=lambda: Identifier.from_tag(rng.getrandbits(121)))
        issuer = PuzzleIssuer(config.puzzle_rotation, config.puzzle_window, keygen=lambda: rng.randbytes(32))
        return Server(config, now=T0, ids=ids, issuer=issuer)

    def _bot_packet(self, bot: int, refl: int) -> Packet:
        server = self.reflectors[refl]
        key = (bot, refl)
        if self.cfg.scenario is Scenario.BASELINE:
            ident = self.bot_ids.get(key)
            if ident is None:
                ident = self.bot_ids[key] = Identifier.from_tag(self.rng.getrandbits(121))
            return Packet(EncapHeader(self.victim, server.config.locator, ident, server.id))
        hit = self.bot_certs.get(key)
        if hit is None:
            hit = self.bot_certs[key] = generate_certificate(
                self.bot_keys[bot], self.victim, server.config.locator, server.id, self.cfg.cert_duration, T0
            )
        cert, ident = hit
        return Packet(
            EncapHeader(self.victim, server.config.locator, ident, server.id),
            SecurityHeader(MsgType.DATA_WITH_CERT, body=cert),
        )

    # -- accounting ---------------------------------------------------------

    def _bits(self, packet: Packet, reply: bool = False) -> float:
        cfg = self.cfg
        if reply:
            return cfg.d_req * cfg.a_f
        mtype = packet.msg_type
        if mtype is None or mtype == MsgType.DATA_WHITELISTED:
            return cfg.d_req
        if mtype == MsgType.DATA_WITH_CERT:
            return cfg.d_req_cert
        if mtype == MsgType.CHALLENGE:
            return cfg.d_puz
        return cfg.d_req_cert + cfg.d_puz

    def _push(self, t: float, kind: int, *data) -> None:
        heapq.heappush(self.heap, (t, self.seq, kind, data))
        self.seq += 1

    def _send(self, t: float, kind: int, packet: Packet, label: Label, bits: float, *dest) -> None:
        self.metrics.packets_sent += 1
        self._push(t + self.cfg.hop_delay, kind, packet, label, bits, *dest)

    # -- behaviour ----------------------------------------------------------

    def _on_bot(self, t: float, bot: int, interval: float) -> None:
        refl = self.bot_next[bot]
        self.bot_next[bot] = (refl + 1) % self.cfg.n_reflectors
        packet = self._bot_packet(bot, refl)
        bits = self._bits(packet)
        self.metrics.bot_bits_sent += bits
        self.secs[int(t)]["bot_tx_bits"] += bits
        self._send(t, _AT_REFLECTOR, packet, Label.ATTACK, bits, refl)
        self._push(t + interval, _BOT, bot, interval)

    def _on_legit(self, t: float, i: int, interval: float) -> None:
        cfg = self.cfg
        refl = i % cfg.n_reflectors
        server = self.reflectors[refl]
        session = self.legit[i]
        now = T0 + t
        if session is None or session.state is ClientState.FAILED:
            session, packet = client_initiate(
                self.legit_keys[i], self.victim, (server.id, server.config.locator),
                b"req", now, duration=cfg.cert_duration,
            )
            self.legit[i] = session
            self.legit_by_id[session.id_src] = i
            self.victim_ids.add(session.id_src)
        elif session.state is ClientState.ESTABLISHED and cfg.scenario in (
            Scenario.CERT_PLUS_PUZZLES, Scenario.PUZZLES_PLUS_SHAPERS
        ):
            packet = session.data_packet(b"req")
        elif session.state is ClientState.SOLVED_SENT:
            packet = None
        else:
            packet = session.first_packet()
        if cfg.scenario is Scenario.BASELINE and packet is not None:
            packet = Packet(packet.encap, None, packet.payload)
        if packet is not None:
            self._send(t, _AT_REFLECTOR, packet, Label.LEGIT, self._bits(packet), refl)
        self._push(t + interval, _LEGIT, i, interval)

    def _on_reflector(self, t: float, packet: Packet, label: Label, bits: float, refl: int) -> None:
        m = self.metrics
        m.packets_terminated += 1
        decision = self.reflectors[refl].process(packet, T0 + t)
        m.reflector[decision.action.value] += 1
        m.reflector[f"reason.{decision.reason.value}"] += 1
        sec = self.secs[int(t)]
        if decision.action is Action.SEND_CHALLENGE:
            sec["challenges"] += 1
        elif decision.action is Action.REPLY:
            sec["replies"] += 1
        elif decision.reason.value == "shaped":
            sec["shaped"] += 1
        out = decision.outbound
        if out is None:
            return
        out_bits = self._bits(out, reply=decision.action is Action.REPLY)
        if out.encap.outer_dst == self.victim:
            self._send(t, _AT_VICTIM, out, label, out_bits)
        else:
            # reflector output addressed elsewhere is not modelled further
            m.packets_sent += 1
            m.packets_terminated += 1

    def _on_victim(self, t: float, packet: Packet, truth: Label, bits: float) -> None:
        m = self.metrics
        m.packets_terminated += 1
        got = classify_at_victim(packet, self.victim_ids)
        sec = self.secs[int(t)]
        sec["victim_rx_bits"] += bits
        sec["victim_rx_pkts"] += 1
        if got is Label.ATTACK:
            m.victim_classified_attack += 1
            sec["attack_pkts"] += 1
            sec["attack_bits"] += bits
        else:
            m.victim_classified_legit += 1
            sec["legit_pkts"] += 1
        if truth is Label.LEGIT and got is Label.ATTACK:
            m.victim_false_positive += 1
        elif truth is Label.ATTACK and got is Label.LEGIT:
            m.victim_false_negative += 1
        if self.keep_labels:
            mtype = packet.msg_type.name if packet.msg_type else "LEGACY"
            m.labels.append((t, mtype, truth.value, got.value))
        if got is Label.LEGIT:
            self._legit_receive(t, packet)

    def _legit_receive(self, t: float, packet: Packet) -> None:
        i = self.legit_by_id.get(packet.encap.inner_dst)
        session = self.legit[i] if i is not None else None
        if session is None or session.id_src != packet.encap.inner_dst:
            return
        if packet.msg_type == MsgType.CHALLENGE:
            retry = client_on_challenge(session, packet)
            if retry is not None:
                refl = i % self.cfg.n_reflectors
                self._send(t, _AT_REFLECTOR, retry, Label.LEGIT, self._bits(retry), refl)
        else:
            was = session.state
            client_on_reply(session, packet)
            if was is not ClientState.ESTABLISHED and session.state is ClientState.ESTABLISHED:
                self.metrics.legit_established += 1

    # -- main loop ----------------------------------------------------------

    def run(self) -> SimMetrics:
        cfg = self.cfg
        if cfg.r_a > 0:
            bot_rate = cfg.r_a / cfg.n_bots
            bits = cfg.d_req if cfg.scenario is Scenario.BASELINE else cfg.d_req_cert
            interval = bits / bot_rate
            for b in range(cfg.n_bots):
                self._push(self.rng.uniform(0, interval), _BOT, b, interval)
        for i in range(cfg.legit_clients):
            interval = 1.0 / cfg.legit_rate
            self._push(self.rng.uniform(0, interval), _LEGIT, i, interval)

        handlers = {
            _BOT: self._on_bot,
            _LEGIT: self._on_legit,
            _AT_REFLECTOR: self._on_reflector,
            _AT_VICTIM: self._on_victim,
        }
        while self.heap and self.heap[0][0] < cfg.duration:
            t, _, kind, data = heapq.heappop(self.heap)
            handlers[kind](t, *data)
        self.metrics.packets_in_flight = sum(1 for e in self.heap if e[2] in (_AT_REFLECTOR, _AT_VICTIM))
        return self._finish()

    def _finish(self) -> SimMetrics:
        cfg, m = self.cfg, self.metrics
        for i, sec in enumerate(self.secs):
            row = {c: sec.get(c, 0) for c in SimMetrics.COLUMNS}
            row["second"] = i
            m.per_second.append(row)
        start = int(round(cfg.warmup_fraction * cfg.duration))
        window = self.secs[start:]
        span = cfg.duration - start
        m.victim_rx_bps = sum(s["victim_rx_bits"] for s in window) / span
        m.victim_attack_bps = sum(s["attack_bits"] for s in window) / span
        m.victim_rx_pps = sum(s["victim_rx_pkts"] for s in window) / span
        return m


def run(config: SimConfig, keep_labels: bool = False) -> SimMetrics:
    return _Sim(config, keep_labels).run()
