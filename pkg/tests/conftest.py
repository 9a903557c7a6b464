from __future__ import annotations

import random

import pytest

from zonocrypt import phe


@pytest.fixture(scope="session")
def keypair():
    # one 512-bit test key for the whole run; keygen is deterministic here
    return phe.keygen(512, rng=random.Random(20250817), safe_primes=True)


@pytest.fixture(scope="session")
def pk(keypair):
    return keypair.public


@pytest.fixture(scope="session")
def sk(keypair):
    return keypair.private


@pytest.fixture(scope="session")
def codec(pk):
    return phe.FixedPointCodec(n=pk.n, frac_bits=48)
