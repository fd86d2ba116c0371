"""Cryptographic primitives: SHA3-256, the two MAC suites, RSA signatures.

HMAC-SHA3-256 is the default suite; AES-GMAC-256 is the alternative. Both
produce 256-bit tags so identifier and puzzle derivation can truncate them
the same way.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import gmpy2
from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DIGEST_SIZE = 32
DEFAULT_RSA_BITS = 1024
RSA_EXPONENT = 65537


class SuiteId(enum.IntEnum):
    HMAC_SHA3_256 = 0x01
    AES_GMAC_256 = 0x02

    @classmethod
    def parse(cls, name: str) -> "SuiteId":
        """Accept CLI spellings (``hmac-sha3``, ``aes-gmac``) or enum names."""
        aliases = {"hmac-sha3": cls.HMAC_SHA3_256, "aes-gmac": cls.AES_GMAC_256}
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls[name.strip().upper().replace("-", "_")]
        except KeyError:
            raise ValueError(f"unknown suite {name!r}") from None


class SignatureScheme(enum.IntEnum):
    RSA_PKCS1V15_SHA3_256 = 0x01


def digest(data: bytes) -> bytes:
    """SHA3-256 of ``data``."""
    return hashlib.sha3_256(data).digest()


def _gmac_key(key: bytes) -> bytes:
    return key if len(key) == 32 else digest(key)


def _gmac_nonce(data_len: int, block: int) -> bytes:
    seed = struct.pack(">QBB", data_len, SuiteId.AES_GMAC_256, block)
    return digest(seed)[:12]


def mac(suite: SuiteId, key: bytes, data: bytes) -> bytes:
    """Keyed 256-bit tag of ``data`` under ``suite``.

    GMAC yields 128-bit tags, so the AES suite concatenates two GMAC tags
    computed under distinct deterministic nonces.
    """
    if not key:
        raise ValueError("MAC key must be non-empty")
    if suite == SuiteId.HMAC_SHA3_256:
        return hmac.digest(key, data, "sha3_256")
    if suite == SuiteId.AES_GMAC_256:
        aes = AESGCM(_gmac_key(key))
        n = len(data)
        return aes.encrypt(_gmac_nonce(n, 0), b"", data) + aes.encrypt(
            _gmac_nonce(n, 1), b"", data
        )
    raise ValueError(f"unknown suite {suite!r}")


def lsb_truncate(value: bytes, nbits: int) -> int:
    """The ``nbits`` least-significant bits of a big-endian 256-bit value."""
    if len(value) != DIGEST_SIZE:
        raise ValueError(f"expected a {DIGEST_SIZE}-byte digest, got {len(value)}")
    if not 1 <= nbits <= 8 * DIGEST_SIZE:
        raise ValueError(f"nbits must be in [1, 256], got {nbits}")
    return int.from_bytes(value, "big") & ((1 << nbits) - 1)


# -- public-key encoding -----------------------------------------------------


def _int_bytes(x: int) -> bytes:
    return x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")


def encode_public_key(n: int, e: int) -> bytes:
    """Canonical RSA public key: u16 len || modulus || u16 len || exponent."""
    nb, eb = _int_bytes(n), _int_bytes(e)
    return struct.pack(">H", len(nb)) + nb + struct.pack(">H", len(eb)) + eb


def decode_public_key(blob: bytes) -> tuple[int, int]:
    if len(blob) < 2:
        raise ValueError("public key truncated")
    (nlen,) = struct.unpack_from(">H", blob, 0)
    off = 2 + nlen
    if len(blob) < off + 2:
        raise ValueError("public key truncated")
    (elen,) = struct.unpack_from(">H", blob, off)
    if len(blob) != off + 2 + elen:
        raise ValueError("public key length mismatch")
    nb, eb = blob[2:off], blob[off + 2 :]
    if not nb or not eb or nb[0] == 0 or eb[0] == 0:
        raise ValueError("non-canonical public key integers")
    return int.from_bytes(nb, "big"), int.from_bytes(eb, "big")


@lru_cache(maxsize=4096)
def _load_public_key(blob: bytes) -> rsa.RSAPublicKey:
    n, e = decode_public_key(blob)
    return rsa.RSAPublicNumbers(e, n).public_key()


@dataclass(frozen=True)
class KeyPair:
    """An RSA key pair with its canonical public encoding.

    ``private_key`` holds PKCS#8 DER bytes; the parsed key object is cached.
    """

    public_key: bytes
    private_key: bytes
    scheme: SignatureScheme = SignatureScheme.RSA_PKCS1V15_SHA3_256
    _key: rsa.RSAPrivateKey | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_private(cls, key: rsa.RSAPrivateKey) -> "KeyPair":
        pub = key.public_key().public_numbers()
        der = key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        return cls(encode_public_key(pub.n, pub.e), der, _key=key)

    @classmethod
    def generate(cls, bits: int = DEFAULT_RSA_BITS, seed: int | None = None) -> "KeyPair":
        """Fresh key pair; with ``seed`` the primes are drawn from a seeded PRNG.

        Seeded keys are for reproducible simulations and tests only.
        """
        if seed is None:
            return cls.from_private(rsa.generate_private_key(RSA_EXPONENT, bits))
        return cls.from_private(_seeded_rsa(bits, random.Random(seed)))

    @property
    def key(self) -> rsa.RSAPrivateKey:
        if self._key is None:
            loaded = serialization.load_der_private_key(self.private_key, None)
            if not isinstance(loaded, rsa.RSAPrivateKey):
                raise ValueError("private key is not RSA")
            object.__setattr__(self, "_key", loaded)
        return self._key  # type: ignore[return-value]

    def sign(self, data: bytes) -> bytes:
        return self.key.sign(data, padding.PKCS1v15(), hashes.SHA3_256())

    def to_bytes(self) -> bytes:
        """Key file layout: scheme byte || u16 len || public || u32 len || private."""
        return (
            struct.pack(">BH", self.scheme, len(self.public_key))
            + self.public_key
            + struct.pack(">I", len(self.private_key))
            + self.private_key
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KeyPair":
        try:
            scheme, publen = struct.unpack_from(">BH", blob, 0)
            pub = blob[3 : 3 + publen]
            (privlen,) = struct.unpack_from(">I", blob, 3 + publen)
            start = 7 + publen
            priv = blob[start : start + privlen]
        except struct.error:
            raise ValueError("key file truncated") from None
        if len(pub) != publen or len(priv) != privlen or len(blob) != start + privlen:
            raise ValueError("key file length mismatch")
        kp = cls(pub, priv, SignatureScheme(scheme))
        pn = kp.key.public_key().public_numbers()
        if encode_public_key(pn.n, pn.e) != pub:
            raise ValueError("public and private halves do not match")
        return kp


def _seeded_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (0b11 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and gmpy2.gcd(p - 1, RSA_EXPONENT) == 1:
            return p


def _seeded_rsa(bits: int, rng: random.Random) -> rsa.RSAPrivateKey:
    half = bits // 2
    while True:
        p = _seeded_prime(half, rng)
        q = _seeded_prime(bits - half, rng)
        if p != q and (p * q).bit_length() == bits:
            break
    d = int(gmpy2.invert(RSA_EXPONENT, (p - 1) * (q - 1)))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(RSA_EXPONENT, p * q),
    )
    return numbers.private_key()


def sign(keypair: KeyPair, data: bytes) -> bytes:
    return keypair.sign(data)


def verify(public_key: bytes, data: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid; malformed inputs yield False."""
    try:
        key = _load_public_key(bytes(public_key))
        key.verify(signature, data, padding.PKCS1v15(), hashes.SHA3_256())
    except (InvalidSignature, UnsupportedAlgorithm, ValueError, TypeError):
        return False
    return True
