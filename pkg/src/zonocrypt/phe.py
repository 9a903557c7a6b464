"""Paillier cryptosystem with a fixed-point codec for signed reals.

Additively homomorphic: multiplying ciphertexts adds plaintexts, raising a
ciphertext to a plain integer multiplies the plaintext by it.  Keys use the
g = n + 1 construction, so decryption only needs lambda and mu = lambda^-1.

Real numbers ride on top as base-2 fixed-point integers.  Every ciphertext
carries a scale exponent: fresh encodings sit at scale 1, and each
plain-factor multiplication stacks one more scale level on the result.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import gmpy2

DEFAULT_KEY_BITS = 2048
MIN_KEY_BITS = 512
DEFAULT_FRAC_BITS = 48
DEFAULT_MAGNITUDE_BITS = 32

_SMALL_PRIMES = []
_sieve = bytearray([1]) * 1000
for _i in range(2, 1000):
    if _sieve[_i]:
        _SMALL_PRIMES.append(_i)
        for _j in range(_i * _i, 1000, _i):
            _sieve[_j] = 0
del _sieve, _i


class PheError(Exception):
    pass


class ScaleMismatchError(PheError):
    """Ciphertext addition with unequal scale exponents."""


class ScaleOverflowError(PheError):
    """A multiplication would push the scale exponent past the codec budget."""


class CodecError(PheError):
    pass


def is_probable_prime(n: int) -> bool:
    return bool(gmpy2.is_prime(n, 30))


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int

    @property
    def g(self) -> int:
        return self.n + 1

    @property
    def n_sq(self) -> int:
        return self.n * self.n


@dataclass(frozen=True)
class PaillierPrivateKey:
    p: int
    q: int
    lam: int
    mu: int

    @property
    def public(self) -> PaillierPublicKey:
        return PaillierPublicKey(self.p * self.q)


@dataclass(frozen=True)
class PaillierKeyPair:
    public: PaillierPublicKey
    private: PaillierPrivateKey


def keypair_from_primes(p: int, q: int) -> PaillierKeyPair:
    """Assemble a key pair from given primes (no size floor; test use)."""
    if p == q:
        raise ValueError("p and q must differ")
    n = p * q
    lam = math.lcm(p - 1, q - 1)
    mu = int(gmpy2.invert(lam, n))
    return PaillierKeyPair(PaillierPublicKey(n), PaillierPrivateKey(p, q, lam, mu))


def _random_prime(bits: int, rng, safe: bool) -> int:
    # top two bits forced so p*q always reaches the requested modulus width
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    while True:
        cand = rng.getrandbits(bits) | top | 1
        if safe:
            if cand % 4 != 3:
                continue
            half = cand >> 1
            if any(cand % s == 0 or half % s == 0 for s in _SMALL_PRIMES):
                continue
            if gmpy2.is_prime(half, 30) and gmpy2.is_prime(cand, 30):
                return cand
        else:
            if any(cand % s == 0 for s in _SMALL_PRIMES if cand > s):
                continue
            if gmpy2.is_prime(cand, 30):
                return cand


def keygen(bits: int = DEFAULT_KEY_BITS, rng: random.Random | None = None,
           safe_primes: bool = True) -> PaillierKeyPair:
    """Generate a key pair whose modulus has exactly `bits` bits.

    With `safe_primes` (the default) both factors p satisfy p = 2p' + 1
    with p' prime.  Pass a seeded `random.Random` for reproducible keys.
    """
    if bits < MIN_KEY_BITS:
        raise ValueError(f"key size {bits} below minimum {MIN_KEY_BITS}")
    if rng is None:
        rng = random.SystemRandom()
    while True:
        p = _random_prime(bits // 2, rng, safe_primes)
        q = _random_prime(bits - bits // 2, rng, safe_primes)
        if p == q:
            continue
        if (p * q).bit_length() == bits:
            return keypair_from_primes(p, q)


def _draw_obfuscator(n: int, rng) -> int:
    while True:
        r = rng.randrange(1, n)
        if math.gcd(r, n) == 1:
            return r


def raw_encrypt(pk: PaillierPublicKey, m: int, r: int | None = None,
                rng: random.Random | None = None) -> int:
    """Encrypt an integer in [0, n); returns the bare ciphertext integer."""
    if not 0 <= m < pk.n:
        raise ValueError("plaintext outside [0, n)")
    if r is None:
        r = _draw_obfuscator(pk.n, rng if rng is not None else random.SystemRandom())
    # g = n + 1 makes g^m collapse to 1 + n*m (mod n^2)
    return (1 + pk.n * m) * int(gmpy2.powmod(r, pk.n, pk.n_sq)) % pk.n_sq


def raw_decrypt(sk: PaillierPrivateKey, ct: int) -> int:
    n = sk.p * sk.q
    n_sq = n * n
    if not 0 < ct < n_sq:
        raise ValueError("ciphertext outside (0, n^2)")
    u = int(gmpy2.powmod(ct, sk.lam, n_sq))
    return (u - 1) // n * sk.mu % n


@dataclass(frozen=True)
class EncScalar:
    """One Paillier ciphertext plus the fixed-point scale it carries."""
    ct: int
    scale_exp: int

    def to_bytes(self) -> bytes:
        width = max(1, (self.ct.bit_length() + 7) // 8)
        return (width.to_bytes(4, "big") + self.ct.to_bytes(width, "big")
                + self.scale_exp.to_bytes(2, "big"))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncScalar":
        width = int.from_bytes(blob[:4], "big")
        if len(blob) != 4 + width + 2:
            raise ValueError("ciphertext blob length mismatch")
        ct = int.from_bytes(blob[4:4 + width], "big")
        return cls(ct=ct, scale_exp=int.from_bytes(blob[4 + width:], "big"))


@dataclass(frozen=True)
class EncVector:
    """A vector of ciphertexts sharing one scale exponent."""
    cts: tuple[int, ...]
    scale_exp: int

    def __len__(self) -> int:
        return len(self.cts)

    def scalar(self, i: int) -> EncScalar:
        return EncScalar(self.cts[i], self.scale_exp)


def encrypt(pk: PaillierPublicKey, m: int, rng: random.Random | None = None,
            scale_exp: int = 1) -> EncScalar:
    return EncScalar(ct=raw_encrypt(pk, m, rng=rng), scale_exp=scale_exp)


def decrypt(sk: PaillierPrivateKey, e: EncScalar) -> int:
    return raw_decrypt(sk, e.ct)


def add_ct(pk: PaillierPublicKey, a: EncScalar, b: EncScalar) -> EncScalar:
    if a.scale_exp != b.scale_exp:
        raise ScaleMismatchError(
            f"cannot add ciphertexts at scales {a.scale_exp} and {b.scale_exp}")
    return EncScalar(ct=a.ct * b.ct % pk.n_sq, scale_exp=a.scale_exp)


def neg_ct(pk: PaillierPublicKey, a: EncScalar) -> EncScalar:
    return EncScalar(ct=int(gmpy2.invert(a.ct, pk.n_sq)), scale_exp=a.scale_exp)


def sub_ct(pk: PaillierPublicKey, a: EncScalar, b: EncScalar) -> EncScalar:
    return add_ct(pk, a, neg_ct(pk, b))


def mul_plain(pk: PaillierPublicKey, k: int, b: EncScalar, k_scale: int = 1,
              max_scale_exp: int | None = None) -> EncScalar:
    """Multiply a ciphertext by an encoded plain factor k in [0, n).

    The result's scale exponent grows by the factor's own scale.  Exponents
    in the upper half of [0, n) encode negatives; those are folded down to
    a small inverse power, which keeps the modular exponent short.
    """
    if not 0 <= k < pk.n:
        raise ValueError("plain factor outside [0, n)")
    out_scale = b.scale_exp + k_scale
    if max_scale_exp is not None and out_scale > max_scale_exp:
        raise ScaleOverflowError(
            f"scale {out_scale} exceeds budget {max_scale_exp}; refresh required")
    if k > pk.n // 2:
        base, e = int(gmpy2.invert(b.ct, pk.n_sq)), pk.n - k
    else:
        base, e = b.ct, k
    return EncScalar(ct=int(gmpy2.powmod(base, e, pk.n_sq)), scale_exp=out_scale)


class FixedPointCodec:
    """Signed reals as integers mod n, with `frac_bits` fractional bits.

    encode(1.5) with frac_bits=4 is 24; encode(-1.5) is n - 24.  A value
    multiplied s times sits at scale s+1 and decodes by 2^(frac_bits*(s+1)).

    >>> codec = FixedPointCodec(n=1 << 61, frac_bits=4)
    >>> codec.encode(1.5)
    24
    >>> codec.decode(24, 1)
    1.5
    """

    def __init__(self, n: int, frac_bits: int = DEFAULT_FRAC_BITS,
                 magnitude_bits: int = DEFAULT_MAGNITUDE_BITS):
        if frac_bits < 1:
            raise CodecError("frac_bits must be positive")
        # room for three stacked scale levels plus the magnitude budget
        if 3 * frac_bits + magnitude_bits >= n.bit_length() - 1:
            raise CodecError(
                f"modulus of {n.bit_length()} bits too small for "
                f"frac_bits={frac_bits}, magnitude_bits={magnitude_bits}")
        self.n = n
        self.frac_bits = frac_bits
        self.magnitude_bits = magnitude_bits
        self._unit = 1 << frac_bits
        self._limit = 2.0 ** (n.bit_length() // 2 - frac_bits)

    @property
    def max_scale_exp(self) -> int:
        return (self.n.bit_length() - 2 - self.magnitude_bits) // self.frac_bits

    def encode(self, x: float) -> int:
        x = float(x)
        if not math.isfinite(x):
            raise CodecError(f"cannot encode {x!r}")
        if abs(x) >= self._limit:
            raise CodecError(f"magnitude {abs(x):g} outside codec range")
        # exact: double -> rational -> rounded integer, so the round-trip
        # error never exceeds half a quantum even when x * 2^f overflows
        # the double significand
        return round(Fraction(x) * self._unit) % self.n

    def decode(self, m: int, scale_exp: int) -> float:
        if scale_exp < 1:
            raise CodecError("scale_exp must be >= 1 to decode")
        if not 0 <= m < self.n:
            raise CodecError("encoded value outside [0, n)")
        signed = m - self.n if m > self.n // 2 else m
        return signed / (1 << (self.frac_bits * scale_exp))

    def one(self) -> int:
        return self._unit

    def align_factor(self) -> int:
        """Encoded 1.0, used to lift a ciphertext by one scale level."""
        return self._unit


def save_public_key(pk: PaillierPublicKey, path: str | Path) -> None:
    Path(path).write_text(f"n = {pk.n}\n")


def save_private_key(sk: PaillierPrivateKey, path: str | Path) -> None:
    Path(path).write_text(f"n = {sk.p * sk.q}\np = {sk.p}\nq = {sk.q}\n")


def _parse_key_file(path: str | Path) -> dict[str, int]:
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, value = line.partition("=")
        fields[name.strip()] = int(value.strip())
    return fields


def load_public_key(path: str | Path) -> PaillierPublicKey:
    fields = _parse_key_file(path)
    if "n" not in fields:
        raise ValueError(f"{path}: missing field 'n'")
    return PaillierPublicKey(fields["n"])


def load_private_key(path: str | Path) -> PaillierPrivateKey:
    fields = _parse_key_file(path)
    missing = {"p", "q"} - fields.keys()
    if missing:
        raise ValueError(f"{path}: missing fields {sorted(missing)}")
    return keypair_from_primes(fields["p"], fields["q"]).private
