import random

import pytest

from eip.crypto import KeyPair
from eip.identity import Identifier, Locator


@pytest.fixture(scope="session")
def keypair() -> KeyPair:
    return KeyPair.generate(1024, seed=11)


@pytest.fixture(scope="session")
def other_keypair() -> KeyPair:
    return KeyPair.generate(1024, seed=12)


@pytest.fixture(scope="session")
def small_keys() -> list[KeyPair]:
    return [KeyPair.generate(512, seed=100 + i) for i in range(4)]


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


@pytest.fixture
def loc_src() -> Locator:
    return Locator.parse("192.0.2.10")


@pytest.fixture
def loc_dst() -> Locator:
    return Locator.parse("198.51.100.20")


@pytest.fixture
def id_dst() -> Identifier:
    return Identifier.from_tag(0x1F2E3D4C5B6A79880123456789ABCDE)
