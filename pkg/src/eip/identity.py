"""Self-certified ephemeral identifiers.

A client binds its locator, the destination, a validity window and its
public key into a signed certificate. The source identifier is a truncated
keyed MAC over that certificate, keyed by the hash of the public key, so a
receiver can check the binding without any third party.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
import threading
from dataclasses import dataclass, field
from functools import cached_property

from . import crypto
from .crypto import KeyPair, SuiteId

CERT_VERSION = 0x01
ID_BITS = 128
TAG_BITS = 121
PREFIX_BITS = ID_BITS - TAG_BITS
EIP_PREFIX = 0b0000001

_TAG_MASK = (1 << TAG_BITS) - 1


class CertificateError(ValueError):
    """Raised when certificate bytes cannot be decoded."""


@dataclass(frozen=True, order=True)
class Locator:
    """A routable IPv4 or IPv6 address."""

    address: ipaddress.IPv4Address | ipaddress.IPv6Address

    @classmethod
    def parse(cls, text: str) -> "Locator":
        return cls(ipaddress.ip_address(text))

    @property
    def family(self) -> int:
        return self.address.version

    def to_bytes(self) -> bytes:
        return bytes([self.family]) + self.address.packed

    @classmethod
    def read(cls, buf: bytes, off: int) -> tuple["Locator", int]:
        if off >= len(buf):
            raise CertificateError("locator truncated")
        family = buf[off]
        size = {4: 4, 6: 16}.get(family)
        if size is None:
            raise CertificateError(f"unknown address family {family}")
        raw = buf[off + 1 : off + 1 + size]
        if len(raw) != size:
            raise CertificateError("locator truncated")
        return cls(ipaddress.ip_address(raw)), off + 1 + size

    def __str__(self) -> str:
        return str(self.address)


@dataclass(frozen=True, order=True)
class Identifier:
    """128-bit ORCHID-style identifier: 7-bit prefix || 121-bit tag."""

    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value < 1 << ID_BITS:
            raise ValueError("identifier out of 128-bit range")

    @classmethod
    def from_tag(cls, tag: int, prefix: int = EIP_PREFIX) -> "Identifier":
        if not 0 <= tag <= _TAG_MASK or not 0 <= prefix < 1 << PREFIX_BITS:
            raise ValueError("tag must fit 121 bits and prefix 7 bits")
        return cls((prefix << TAG_BITS) | tag)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Identifier":
        if len(raw) != 16:
            raise ValueError("identifier must be 16 bytes")
        return cls(int.from_bytes(raw, "big"))

    @classmethod
    def parse(cls, text: str) -> "Identifier":
        """Parse IPv6 notation or 32 hex digits."""
        text = text.strip()
        if ":" in text:
            return cls(int(ipaddress.IPv6Address(text)))
        return cls(int(text, 16))

    @property
    def prefix(self) -> int:
        return self.value >> TAG_BITS

    @property
    def tag(self) -> int:
        return self.value & _TAG_MASK

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(16, "big")

    def __str__(self) -> str:
        return str(ipaddress.IPv6Address(self.value))


@dataclass(frozen=True)
class Certificate:
    loc_src: Locator
    loc_dst: Locator
    id_dst: Identifier
    duration: int
    time: int
    client_public_key: bytes
    suite: SuiteId = SuiteId.HMAC_SHA3_256
    sig: bytes = b""

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.duration < 1 << 32 or not 0 <= self.time < 1 << 64:
            raise ValueError("duration/time out of encodable range")

    @cached_property
    def signed_part(self) -> bytes:
        """Canonical encoding of every field that precedes ``sig``."""
        key = self.client_public_key
        return b"".join(
            (
                bytes((CERT_VERSION, self.suite)),
                self.loc_src.to_bytes(),
                self.loc_dst.to_bytes(),
                self.id_dst.to_bytes(),
                struct.pack(">IQH", self.duration, self.time, len(key)),
                key,
            )
        )

    @cached_property
    def encoded(self) -> bytes:
        return self.signed_part + struct.pack(">H", len(self.sig)) + self.sig

    @property
    def expiry(self) -> int:
        return self.time + self.duration


def canonical_encode(cert: Certificate) -> bytes:
    return cert.encoded


def read_certificate(buf: bytes, off: int = 0) -> tuple[Certificate, int]:
    """Decode a certificate starting at ``off``; returns it and the end offset."""
    if len(buf) < off + 2:
        raise CertificateError("certificate truncated")
    if buf[off] != CERT_VERSION:
        raise CertificateError(f"unsupported certificate version {buf[off]}")
    try:
        suite = SuiteId(buf[off + 1])
    except ValueError:
        raise CertificateError(f"unknown suite {buf[off + 1]}") from None
    loc_src, pos = Locator.read(buf, off + 2)
    loc_dst, pos = Locator.read(buf, pos)
    fixed = buf[pos : pos + 30]
    if len(fixed) != 30:
        raise CertificateError("certificate truncated")
    id_dst = Identifier.from_bytes(fixed[:16])
    duration, time, keylen = struct.unpack(">IQH", fixed[16:])
    pos += 30
    key = buf[pos : pos + keylen]
    pos += keylen
    if len(key) != keylen or len(buf) < pos + 2:
        raise CertificateError("certificate truncated")
    (siglen,) = struct.unpack_from(">H", buf, pos)
    pos += 2
    sig = buf[pos : pos + siglen]
    if len(sig) != siglen:
        raise CertificateError("certificate truncated")
    try:
        cert = Certificate(loc_src, loc_dst, id_dst, duration, time, bytes(key), suite, bytes(sig))
    except ValueError as exc:
        raise CertificateError(str(exc)) from None
    return cert, pos + siglen


def decode_certificate(buf: bytes) -> Certificate:
    cert, end = read_certificate(buf)
    if end != len(buf):
        raise CertificateError(f"{len(buf) - end} trailing bytes after certificate")
    return cert


def derive_identifier(cert: Certificate, prefix: int = EIP_PREFIX) -> Identifier:
    """Truncated MAC of the full certificate, keyed by H(public key)."""
    k = crypto.digest(cert.client_public_key)
    tag = crypto.lsb_truncate(crypto.mac(cert.suite, k, cert.encoded), TAG_BITS)
    return Identifier.from_tag(tag, prefix)


def generate_certificate(
    keypair: KeyPair,
    loc_src: Locator,
    loc_dst: Locator,
    id_dst: Identifier,
    duration: int,
    now: int,
    suite: SuiteId = SuiteId.HMAC_SHA3_256,
) -> tuple[Certificate, Identifier]:
    unsigned = Certificate(loc_src, loc_dst, id_dst, duration, int(now), keypair.public_key, suite)
    cert = Certificate(
        loc_src, loc_dst, id_dst, duration, int(now), keypair.public_key, suite,
        keypair.sign(unsigned.signed_part),
    )
    return cert, derive_identifier(cert)


@dataclass(frozen=True)
class ClockPolicy:
    clock_error: int = 5
    max_duration: int = 4 * 3600

    def __post_init__(self) -> None:
        if self.clock_error < 0 or self.max_duration < 0:
            raise ValueError("clock policy values must be non-negative")


class Verdict(enum.Enum):
    ACCEPT = "accept"
    UNKNOWN_DESTINATION = "unknown-destination"
    TEMPORALLY_INVALID = "temporally-invalid"
    DURATION_EXCEEDED = "duration-exceeded"
    IDENTIFIER_MISMATCH = "identifier-mismatch"
    BAD_SIGNATURE = "bad-signature"

    def __bool__(self) -> bool:
        return self is Verdict.ACCEPT


def temporally_valid(cert: Certificate, now: float, policy: ClockPolicy) -> bool:
    eps = policy.clock_error
    return cert.time <= now + eps and now <= cert.time + cert.duration + 2 * eps


def verify(
    cert: Certificate,
    claimed_id_src: Identifier,
    own_ids,
    now: float,
    policy: ClockPolicy,
    prefix: int = EIP_PREFIX,
) -> Verdict:
    """Receiver checks, cheapest first; returns the first failure."""
    if cert.id_dst not in own_ids:
        return Verdict.UNKNOWN_DESTINATION
    if not temporally_valid(cert, now, policy):
        return Verdict.TEMPORALLY_INVALID
    if cert.duration > policy.max_duration:
        return Verdict.DURATION_EXCEEDED
    if claimed_id_src != derive_identifier(cert, prefix):
        return Verdict.IDENTIFIER_MISMATCH
    if not crypto.verify(cert.client_public_key, cert.signed_part, cert.sig):
        return Verdict.BAD_SIGNATURE
    return Verdict.ACCEPT


@dataclass
class Whitelist:
    """Verified sender identifiers, each valid until its certificate expires.

    Internally locked: insert, check and expire are linearizable.
    """

    entries: dict[Identifier, float] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def insert(self, id_src: Identifier, cert: Certificate, policy: ClockPolicy) -> float:
        expiry = cert.time + cert.duration + 2 * policy.clock_error
        with self._lock:
            self.entries[id_src] = expiry
        return expiry

    def check(self, id_src: Identifier, now: float) -> bool:
        with self._lock:
            expiry = self.entries.get(id_src)
        return expiry is not None and now <= expiry

    def expire(self, now: float) -> int:
        with self._lock:
            stale = [i for i, exp in self.entries.items() if now > exp]
            for i in stale:
                del self.entries[i]
        return len(stale)

    def __len__(self) -> int:
        return len(self.entries)
