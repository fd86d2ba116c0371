"""Byte layouts for tunnelled EIP packets.

    packet  := encap || [security header] || u16 payload_len || payload
    encap   := flags || outer_src || outer_dst || inner_src(16) || inner_dst(16)
    sechdr  := version || msg_type || suite || u16 body_len || body

Locators are a family byte (4 or 6) followed by the packed address. Flag bit
0 marks the presence of a security header; packets without one are legacy
traffic accepted only where endpoint policy allows it.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

from .crypto import SuiteId
from .identity import (
    EIP_PREFIX,
    Certificate,
    CertificateError,
    Identifier,
    Locator,
    read_certificate,
)
from .puzzle import Challenge, PuzzleError, Solution, n_bytes

SEC_VERSION = 0x01
FLAG_SECURITY = 0x01
SEC_HEADER_SIZE = 5

# sizes used by the analytical model, in bits
D_REQ = 100 * 8
D_REQ_CERT = 450 * 8
D_PUZ = 272 * 8
D_PUZ_TABLE2 = 1276


class MalformedPacket(ValueError):
    pass


class MsgType(enum.IntEnum):
    DATA_WITH_CERT = 1
    DATA_WHITELISTED = 2
    CHALLENGE = 3
    SOLUTION_RETRY = 4


@dataclass(frozen=True)
class EncapHeader:
    outer_src: Locator
    outer_dst: Locator
    inner_src: Identifier
    inner_dst: Identifier

    def size(self) -> int:
        return 1 + len(self.outer_src.to_bytes()) + len(self.outer_dst.to_bytes()) + 32


@dataclass(frozen=True)
class SolutionRetry:
    challenge: Challenge
    solution: Solution
    cert: Certificate


Body = Union[Certificate, Challenge, SolutionRetry, None]


@dataclass(frozen=True)
class SecurityHeader:
    msg_type: MsgType
    suite: SuiteId = SuiteId.HMAC_SHA3_256
    body: Body = None
    version: int = SEC_VERSION

    def __post_init__(self) -> None:
        expected = {
            MsgType.DATA_WITH_CERT: Certificate,
            MsgType.DATA_WHITELISTED: type(None),
            MsgType.CHALLENGE: Challenge,
            MsgType.SOLUTION_RETRY: SolutionRetry,
        }[self.msg_type]
        if not isinstance(self.body, expected):
            raise ValueError(f"{self.msg_type.name} requires a {expected.__name__} body")


@dataclass(frozen=True)
class Packet:
    encap: EncapHeader
    sec: SecurityHeader | None = None
    payload: bytes = b""

    @property
    def msg_type(self) -> MsgType | None:
        return self.sec.msg_type if self.sec is not None else None

    @property
    def legacy(self) -> bool:
        return self.sec is None

    @property
    def size(self) -> int:
        return len(encode_packet(self))


def _encode_body(sec: SecurityHeader) -> bytes:
    body = sec.body
    if body is None:
        return b""
    if isinstance(body, Certificate):
        return body.encoded
    if isinstance(body, Challenge):
        return body.to_bytes()
    cert = body.cert.encoded
    return (
        body.challenge.to_bytes()
        + body.solution.to_bytes(body.challenge.l)
        + struct.pack(">H", len(cert))
        + cert
    )


def encode_packet(p: Packet) -> bytes:
    e = p.encap
    parts = [
        bytes((FLAG_SECURITY if p.sec is not None else 0,)),
        e.outer_src.to_bytes(),
        e.outer_dst.to_bytes(),
        e.inner_src.to_bytes(),
        e.inner_dst.to_bytes(),
    ]
    if p.sec is not None:
        body = _encode_body(p.sec)
        if len(body) > 0xFFFF:
            raise ValueError("security header body exceeds 65535 bytes")
        parts.append(struct.pack(">BBBH", p.sec.version, p.sec.msg_type, p.sec.suite, len(body)))
        parts.append(body)
    if len(p.payload) > 0xFFFF:
        raise ValueError("payload exceeds 65535 bytes")
    parts.append(struct.pack(">H", len(p.payload)))
    parts.append(p.payload)
    return b"".join(parts)


def _identifier(raw: bytes, prefix: int) -> Identifier:
    ident = Identifier.from_bytes(raw)
    if ident.prefix != prefix:
        raise MalformedPacket(f"identifier {ident} lacks the EIP prefix")
    return ident


def _decode_body(msg_type: MsgType, body: bytes) -> Body:
    if msg_type == MsgType.DATA_WHITELISTED:
        if body:
            raise MalformedPacket("DATA_WHITELISTED carries no body")
        return None
    if msg_type == MsgType.DATA_WITH_CERT:
        cert, end = read_certificate(body)
        if end != len(body):
            raise MalformedPacket("body length mismatch")
        return cert
    challenge, pos = Challenge.read(body)
    if msg_type == MsgType.CHALLENGE:
        if pos != len(body):
            raise MalformedPacket("body length mismatch")
        return challenge
    size = n_bytes(challenge.l)
    solution = Solution.from_bytes(body[pos : pos + size], challenge.l)
    pos += size
    if len(body) < pos + 2:
        raise MalformedPacket("solution retry truncated")
    (certlen,) = struct.unpack_from(">H", body, pos)
    pos += 2
    cert, end = read_certificate(body[pos : pos + certlen])
    if end != certlen or pos + certlen != len(body):
        raise MalformedPacket("body length mismatch")
    return SolutionRetry(challenge, solution, cert)


def decode_packet(buf: bytes, prefix: int = EIP_PREFIX) -> Packet:
    """Parse ``buf``; every malformation surfaces as :class:`MalformedPacket`."""
    try:
        return _decode(bytes(buf), prefix)
    except MalformedPacket:
        raise
    except (CertificateError, PuzzleError, ValueError, IndexError, struct.error) as exc:
        raise MalformedPacket(str(exc)) from None


def _decode(buf: bytes, prefix: int) -> Packet:
    if not buf:
        raise MalformedPacket("empty buffer")
    flags = buf[0]
    if flags & ~FLAG_SECURITY:
        raise MalformedPacket(f"unknown flags 0x{flags:02x}")
    outer_src, pos = Locator.read(buf, 1)
    outer_dst, pos = Locator.read(buf, pos)
    if len(buf) < pos + 32:
        raise MalformedPacket("encap header truncated")
    inner_src = _identifier(buf[pos : pos + 16], prefix)
    inner_dst = _identifier(buf[pos + 16 : pos + 32], prefix)
    pos += 32
    sec = None
    if flags & FLAG_SECURITY:
        if len(buf) < pos + SEC_HEADER_SIZE:
            raise MalformedPacket("security header truncated")
        version, mtype, suite, blen = struct.unpack_from(">BBBH", buf, pos)
        pos += SEC_HEADER_SIZE
        if version != SEC_VERSION:
            raise MalformedPacket(f"unsupported security header version {version}")
        try:
            msg_type = MsgType(mtype)
        except ValueError:
            raise MalformedPacket(f"unknown msg_type {mtype}") from None
        try:
            suite_id = SuiteId(suite)
        except ValueError:
            raise MalformedPacket(f"unknown suite {suite}") from None
        body = buf[pos : pos + blen]
        if len(body) != blen:
            raise MalformedPacket("security body truncated")
        pos += blen
        sec = SecurityHeader(msg_type, suite_id, _decode_body(msg_type, body))
    if len(buf) < pos + 2:
        raise MalformedPacket("payload length missing")
    (plen,) = struct.unpack_from(">H", buf, pos)
    pos += 2
    payload = buf[pos : pos + plen]
    if len(payload) != plen:
        raise MalformedPacket("payload truncated")
    if pos + plen != len(buf):
        raise MalformedPacket(f"{len(buf) - pos - plen} trailing bytes")
    return Packet(EncapHeader(outer_src, outer_dst, inner_src, inner_dst), sec, payload)


@dataclass(frozen=True)
class SizeConstants:
    """Packet sizes in bits fed to the attack model and the simulator."""

    d_req: int = D_REQ
    d_req_cert: int = D_REQ_CERT
    d_puz: int = D_PUZ

    def __post_init__(self) -> None:
        if min(self.d_req, self.d_req_cert, self.d_puz) <= 0:
            raise ValueError("size constants must be positive")


def size_constants(
    d_req: int | None = None, d_req_cert: int | None = None, d_puz: int | None = None
) -> SizeConstants:
    defaults = SizeConstants()
    return SizeConstants(
        d_req if d_req is not None else defaults.d_req,
        d_req_cert if d_req_cert is not None else defaults.d_req_cert,
        d_puz if d_puz is not None else defaults.d_puz,
    )

