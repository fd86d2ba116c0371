"""Receiver-generated puzzles.

The receiver derives a secret number ``n`` of ``64 + 2**l`` bits from a
rotating PRF key and the identifier pair, hides its ``k_bm`` low bits and
publishes ``h = H(n || id_src || id_dst)``. The sender brute-forces the
hidden bits. Because ``n`` is a PRF output, the receiver can re-derive it on
the solution's return instead of storing issued challenges.
"""

from __future__ import annotations

import hashlib
import math
import secrets
import struct
from dataclasses import dataclass, field
from typing import Callable

from . import crypto
from .crypto import SuiteId
from .identity import Identifier

MAX_L = 6
H_SIZE = 32


class PuzzleError(ValueError):
    pass


class SolverExhausted(PuzzleError):
    """No candidate matched ``h``: the challenge was corrupted or forged."""


def n_bits(l: int) -> int:
    if not 0 <= l <= MAX_L:
        raise PuzzleError(f"l must be in [0, {MAX_L}], got {l}")
    return 64 + (1 << l)


def n_bytes(l: int) -> int:
    return (n_bits(l) + 7) // 8


@dataclass(frozen=True)
class Challenge:
    l: int
    n_prime: int
    k_bm: int
    h: bytes

    def __post_init__(self) -> None:
        bits = n_bits(self.l)
        if not 0 <= self.k_bm <= bits:
            raise PuzzleError(f"k_bm must be in [0, {bits}], got {self.k_bm}")
        if not 0 <= self.n_prime < 1 << bits:
            raise PuzzleError("n_prime wider than 64 + 2**l bits")
        if self.n_prime & ((1 << self.k_bm) - 1):
            raise PuzzleError("masked bits of n_prime must be zero")
        if len(self.h) != H_SIZE:
            raise PuzzleError("h must be 32 bytes")

    @property
    def wire_size(self) -> int:
        return 2 + n_bytes(self.l) + H_SIZE

    def to_bytes(self) -> bytes:
        return bytes((self.l, self.k_bm)) + self.n_prime.to_bytes(n_bytes(self.l), "big") + self.h

    @classmethod
    def read(cls, buf: bytes, off: int = 0) -> tuple["Challenge", int]:
        if len(buf) < off + 2:
            raise PuzzleError("challenge truncated")
        l, k_bm = buf[off], buf[off + 1]
        size = n_bytes(l)
        end = off + 2 + size + H_SIZE
        if len(buf) < end:
            raise PuzzleError("challenge truncated")
        n_prime = int.from_bytes(buf[off + 2 : off + 2 + size], "big")
        return cls(l, n_prime, k_bm, bytes(buf[off + 2 + size : end])), end

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Challenge":
        ch, end = cls.read(buf)
        if end != len(buf):
            raise PuzzleError("trailing bytes after challenge")
        return ch


@dataclass(frozen=True)
class Solution:
    c: int
    trials: int = field(default=0, compare=False)

    def to_bytes(self, l: int) -> bytes:
        return self.c.to_bytes(n_bytes(l), "big")

    @classmethod
    def from_bytes(cls, raw: bytes, l: int) -> "Solution":
        if len(raw) != n_bytes(l):
            raise PuzzleError("solution length does not match l")
        return cls(int.from_bytes(raw, "big"))


def puzzle_hash(c: int, l: int, id_src: Identifier, id_dst: Identifier) -> bytes:
    return crypto.digest(c.to_bytes(n_bytes(l), "big") + id_src.to_bytes() + id_dst.to_bytes())


def mask(n: int, k_bm: int) -> int:
    return n & ~((1 << k_bm) - 1)


@dataclass
class PuzzleIssuer:
    """Issues and verifies puzzles under a rotating ephemeral PRF key.

    ``store_challenges`` switches verification from re-deriving ``n`` to a
    lookup in a table of recently issued values.
    """

    rotation_period: float = 300.0
    accepted_epoch_window: int = 2
    suite: SuiteId = SuiteId.HMAC_SHA3_256
    store_challenges: bool = False
    keygen: Callable[[], bytes] = lambda: secrets.token_bytes(32)
    keys: dict[int, bytes] = field(default_factory=dict)
    issued: dict[tuple[Identifier, Identifier, int], int] = field(default_factory=dict)
    mac_computations: int = 0

    def __post_init__(self) -> None:
        if self.rotation_period <= 0 or self.accepted_epoch_window < 1:
            raise ValueError("rotation_period > 0 and accepted_epoch_window >= 1 required")

    def epoch(self, now: float) -> int:
        return int(now // self.rotation_period)

    def rotate(self, now: float) -> None:
        """Create the current epoch's key and forget keys outside the window."""
        current = self.epoch(now)
        if current not in self.keys:
            self.keys[current] = self.keygen()
        oldest = current - self.accepted_epoch_window + 1
        for e in [e for e in self.keys if e < oldest]:
            del self.keys[e]
        if self.issued:
            self.issued = {k: v for k, v in self.issued.items() if k[2] >= oldest}

    def secret(self, id_src: Identifier, id_dst: Identifier, epoch: int, l: int) -> int:
        self.mac_computations += 1
        data = id_src.to_bytes() + id_dst.to_bytes() + struct.pack(">q", epoch)
        return crypto.lsb_truncate(crypto.mac(self.suite, self.keys[epoch], data), n_bits(l))

    def issue(
        self, id_src: Identifier, id_dst: Identifier, k_bm: int, l: int, now: float
    ) -> Challenge:
        bits = n_bits(l)
        if not 1 <= k_bm <= bits:
            raise PuzzleError(f"k_bm must be in [1, {bits}], got {k_bm}")
        self.rotate(now)
        epoch = self.epoch(now)
        n = self.secret(id_src, id_dst, epoch, l)
        if self.store_challenges:
            self.issued[(id_src, id_dst, epoch)] = n
        return Challenge(l, mask(n, k_bm), k_bm, puzzle_hash(n, l, id_src, id_dst))

    def verify(
        self,
        challenge: Challenge,
        solution: Solution,
        id_src: Identifier,
        id_dst: Identifier,
        now: float,
    ) -> bool:
        """Check ``solution`` against every epoch still inside the window."""
        if solution.c >> n_bits(challenge.l):
            return False
        if mask(solution.c, challenge.k_bm) != challenge.n_prime:
            return False
        self.rotate(now)
        current = self.epoch(now)
        for epoch in range(current, current - self.accepted_epoch_window, -1):
            if self.store_challenges:
                n = self.issued.get((id_src, id_dst, epoch))
            elif epoch in self.keys:
                n = self.secret(id_src, id_dst, epoch, challenge.l)
            else:
                n = None
            if n is not None and n == solution.c:
                return puzzle_hash(solution.c, challenge.l, id_src, id_dst) == challenge.h
        return False


def issue_challenge(issuer, id_src, id_dst, k_bm, l, now) -> Challenge:
    return issuer.issue(id_src, id_dst, k_bm, l, now)


def verify_solution(issuer, challenge, solution, id_src, id_dst, now) -> bool:
    return issuer.verify(challenge, solution, id_src, id_dst, now)


def solve(challenge: Challenge, id_src: Identifier, id_dst: Identifier) -> Solution:
    """Enumerate the hidden bits as 0, 1, 2, ... and return the first match.

    ``Solution.trials`` counts hash evaluations.
    """
    size = n_bytes(challenge.l)
    # bytes of c wholly above the mask never change; hash them once
    var_bytes = min(size, (challenge.k_bm + 7) // 8)
    fixed_len = size - var_bytes
    prefix_bytes = challenge.n_prime.to_bytes(size, "big")[:fixed_len]
    base = hashlib.sha3_256(prefix_bytes)
    low_fixed = challenge.n_prime & ((1 << (8 * var_bytes)) - 1)
    suffix = id_src.to_bytes() + id_dst.to_bytes()
    target = challenge.h
    for x in range(1 << challenge.k_bm):
        hasher = base.copy()
        hasher.update((low_fixed | x).to_bytes(var_bytes, "big") + suffix)
        if hasher.digest() == target:
            return Solution(challenge.n_prime | x, trials=x + 1)
    raise SolverExhausted(f"no candidate among 2**{challenge.k_bm} matches h")


def expected_trials(k_bm: int) -> float:
    """Mean hash evaluations to hit one uniformly placed target: 2**(k_bm - 1)."""
    if k_bm < 0:
        raise ValueError("k_bm must be non-negative")
    return 2.0 ** (k_bm - 1)


def birthday_trials(k_bm: int) -> float:
    """The birthday-bound figure 2**(k_bm / 2), kept for comparison reports."""
    if k_bm < 0:
        raise ValueError("k_bm must be non-negative")
    return math.pow(2.0, k_bm / 2)
