"""Additively homomorphic public-key cryptosystem (Paillier, g = n + 1).

Plaintexts are signed integers in the centered representation: a value v < 0
is stored as n - |v|, and decryption maps anything above n/2 back to the
negative range.  This matters because cost differences inside the comparison
protocol are signed.

Supported homomorphic operations (no interaction, no secret key):

* ``add`` / ``sub``          — ciphertext (+/-) ciphertext
* ``add_plain``              — ciphertext + known constant (two bigint muls)
* ``scalar_mul``             — known constant * ciphertext
* ``rerandomize``            — fresh randomness, same plaintext

Randomness uses the short-exponent variant: the public key carries
``h_n = h^n mod n^2`` for a random quadratic non-residue-style base h, and an
encryption of zero is ``h_n^e`` for a short random exponent e.  A windowed
fixed-base table for h_n makes fresh randomization two orders of magnitude
cheaper than a full r^n exponentiation, which is what keeps the interactive
decoding protocol inside its latency envelope.  Decryption uses the standard
CRT split over p and q; all optimizations are bit-exact.
"""

from __future__ import annotations

import json
import random
from typing import Optional, Sequence, Union

import gmpy2
from gmpy2 import mpz, powmod

from .fixedpoint import DEFAULT_L_COST, EncodingRangeError

ALLOWED_KEY_BITS = (1024, 2048, 3072)

# Bit length of the short randomizer exponent e in h_n^e.  Fresh randomness
# is computational (subgroup indistinguishability), not statistical; 256 bits
# leaves a wide margin over the 112-bit level of a 2048-bit modulus.
RANDOMIZER_BITS = 256

RngLike = Union[random.Random, random.SystemRandom]

_SYSTEM_RNG = random.SystemRandom()


class CryptoError(ValueError):
    """Malformed key material, ciphertext, or plaintext out of range."""


def _default_rng(rng: Optional[RngLike]) -> RngLike:
    return _SYSTEM_RNG if rng is None else rng


class _FixedBasePow:
    """Windowed fixed-base modular exponentiation.

    Precomputes base^(j * 2^(w*i)) for every window digit position so that a
    single exponentiation costs one modular multiply per non-zero digit
    (~exp_bits/w muls) and no squarings.
    """

    def __init__(self, base: mpz, modulus: mpz, exp_bits: int, window: int = 5):
        self.modulus = modulus
        self.window = window
        self.exp_bits = exp_bits
        self.mask = (1 << window) - 1
        n_digits = -(-exp_bits // window)
        table = []
        g = mpz(base) % modulus
        for _ in range(n_digits):
            row = [g]
            acc = g
            for _ in range(2, 1 << window):
                acc = acc * g % modulus
                row.append(acc)
            table.append(row)
            for _ in range(window):
                g = g * g % modulus
        self.table = table

    def pow(self, e: int) -> mpz:
        if e < 0 or e >> self.exp_bits:
            raise ValueError("exponent outside precomputed range")
        acc = mpz(1)
        mod = self.modulus
        mask = self.mask
        w = self.window
        for row in self.table:
            digit = e & mask
            if digit:
                acc = acc * row[digit - 1] % mod
            e >>= w
            if not e:
                break
        return acc


class PublicKey:
    """Modulus n plus the precomputed randomizer base h_n = h^n mod n^2."""

    __slots__ = ("n", "n2", "key_bits", "h_n", "half_n", "_rand_pow")

    def __init__(self, n: int, h_n: int, key_bits: Optional[int] = None):
        self.n = mpz(n)
        self.n2 = self.n * self.n
        self.key_bits = key_bits if key_bits is not None else self.n.bit_length()
        self.h_n = mpz(h_n)
        self.half_n = self.n // 2
        self._rand_pow: Optional[_FixedBasePow] = None

    def __eq__(self, other) -> bool:
        return isinstance(other, PublicKey) and self.n == other.n

    def __hash__(self) -> int:
        return hash(self.n)

    def __repr__(self) -> str:
        return f"<PublicKey {self.key_bits} bits>"

    def _encode_signed(self, m: int) -> mpz:
        # Centered representation: negatives live in the top half of the ring.
        m = mpz(m)
        if abs(m) > self.half_n:
            raise CryptoError("plaintext magnitude exceeds n/2")
        return m % self.n

    def random_zero_factor(self, rng: Optional[RngLike] = None) -> mpz:
        """Fresh encryption of zero, i.e. h_n^e for a short random e."""
        if self._rand_pow is None:
            self._rand_pow = _FixedBasePow(self.h_n, self.n2, RANDOMIZER_BITS)
        e = _default_rng(rng).getrandbits(RANDOMIZER_BITS)
        return self._rand_pow.pow(e)

    def encrypt(
        self,
        m: int,
        rng: Optional[RngLike] = None,
        l_cost: Optional[int] = DEFAULT_L_COST,
    ) -> "Ciphertext":
        """Probabilistic encryption of the signed integer ``m``.

        ``l_cost`` bounds the accepted magnitude (pass ``None`` to allow any
        plaintext up to n/2, used internally for blinded protocol values).
        """
        if l_cost is not None and abs(m) >= (1 << l_cost):
            raise EncodingRangeError(
                f"plaintext magnitude {m} exceeds the 2^{l_cost} bound"
            )
        g_m = (1 + self.n * self._encode_signed(m)) % self.n2
        return Ciphertext(self, g_m * self.random_zero_factor(rng) % self.n2)

    def encrypt_deterministic(self, m: int) -> "Ciphertext":
        """Encryption with unit randomness; only safe folded into other
        ciphertexts that carry fresh randomness of their own."""
        return Ciphertext(self, (1 + self.n * self._encode_signed(m)) % self.n2)

    def to_json_dict(self) -> dict:
        return {
            "n": format(int(self.n), "x"),
            "key_bits": self.key_bits,
            "h_n": format(int(self.h_n), "x"),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PublicKey":
        try:
            n = int(data["n"], 16)
            key_bits = int(data["key_bits"])
            h_n = int(data["h_n"], 16)
        except (KeyError, ValueError, TypeError) as exc:
            raise CryptoError(f"malformed public key data: {exc}") from exc
        if n.bit_length() != key_bits:
            raise CryptoError("public key bit length does not match key_bits")
        return cls(n, h_n, key_bits)


class PrivateKey:
    """Factorization of n with the usual CRT decryption precomputations."""

    __slots__ = ("public_key", "p", "q", "p2", "q2", "hp", "hq", "q_inv_p")

    def __init__(self, public_key: PublicKey, p: int, q: int):
        p, q = mpz(p), mpz(q)
        if p * q != public_key.n:
            raise CryptoError("factors do not match the public modulus")
        self.public_key = public_key
        self.p = p
        self.q = q
        self.p2 = p * p
        self.q2 = q * q
        n = public_key.n
        # g = n + 1, so g^(p-1) mod p^2 = 1 + n*(p-1) and L_p of it is
        # invertible mod p; hp/hq are the inverses used per decryption.
        self.hp = gmpy2.invert((powmod(n + 1, p - 1, self.p2) - 1) // p % p, p)
        self.hq = gmpy2.invert((powmod(n + 1, q - 1, self.q2) - 1) // q % q, q)
        self.q_inv_p = gmpy2.invert(q, p)

    def __repr__(self) -> str:
        return f"<PrivateKey {self.public_key.key_bits} bits>"

    def decrypt(self, c: "Ciphertext") -> int:
        """Decrypt to the centered representative in (-n/2, n/2]."""
        pk = self.public_key
        if c.public_key != pk:
            raise CryptoError("ciphertext does not belong to this key")
        raw = c.value
        if not 0 < raw < pk.n2:
            raise CryptoError("ciphertext outside the ring")
        if gmpy2.gcd(raw, pk.n) != 1:
            raise CryptoError("ciphertext not invertible modulo n")
        m_p = (powmod(raw, self.p - 1, self.p2) - 1) // self.p * self.hp % self.p
        m_q = (powmod(raw, self.q - 1, self.q2) - 1) // self.q * self.hq % self.q
        m = ((m_p - m_q) * self.q_inv_p % self.p) * self.q + m_q
        if m > pk.half_n:
            m -= pk.n
        return int(m)

    def to_json_dict(self) -> dict:
        data = self.public_key.to_json_dict()
        data["p"] = format(int(self.p), "x")
        data["q"] = format(int(self.q), "x")
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "PrivateKey":
        pk = PublicKey.from_json_dict(data)
        try:
            p = int(data["p"], 16)
            q = int(data["q"], 16)
        except (KeyError, ValueError, TypeError) as exc:
            raise CryptoError(f"malformed private key data: {exc}") from exc
        return cls(pk, p, q)


class Ciphertext:
    """An element of the ciphertext ring Z_{n^2}, always kept reduced."""

    __slots__ = ("public_key", "value")

    def __init__(self, public_key: PublicKey, value: mpz):
        self.public_key = public_key
        self.value = value

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        return add(self, other)

    def __sub__(self, other: "Ciphertext") -> "Ciphertext":
        return sub(self, other)

    def __rmul__(self, k: int) -> "Ciphertext":
        return scalar_mul(k, self)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Ciphertext)
            and self.value == other.value
            and self.public_key == other.public_key
        )

    def __hash__(self) -> int:
        return hash(int(self.value))

    def __repr__(self) -> str:
        return f"<Ciphertext {int(self.value) % 10**6:06d}...>"

    def to_bytes(self) -> bytes:
        length = (int(self.value).bit_length() + 7) // 8
        return int(self.value).to_bytes(length, "big")

    @classmethod
    def from_bytes(cls, public_key: PublicKey, data: bytes) -> "Ciphertext":
        value = mpz(int.from_bytes(data, "big"))
        if not 0 < value < public_key.n2:
            raise CryptoError("ciphertext bytes outside the ring")
        return cls(public_key, value)


def _check_same_key(c1: Ciphertext, c2: Ciphertext) -> PublicKey:
    if c1.public_key != c2.public_key:
        raise CryptoError("ciphertexts belong to different public keys")
    return c1.public_key


def add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    pk = _check_same_key(c1, c2)
    return Ciphertext(pk, c1.value * c2.value % pk.n2)


def sub(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    pk = _check_same_key(c1, c2)
    return Ciphertext(pk, c1.value * gmpy2.invert(c2.value, pk.n2) % pk.n2)


def add_plain(c: Ciphertext, k: int) -> Ciphertext:
    """Homomorphic addition of a known constant: c * (1 + n*k)."""
    pk = c.public_key
    g_k = (1 + pk.n * pk._encode_signed(k)) % pk.n2
    return Ciphertext(pk, c.value * g_k % pk.n2)


def scalar_mul(k: int, c: Ciphertext) -> Ciphertext:
    """Homomorphic product by a known signed constant: c^k."""
    pk = c.public_key
    if k == 0:
        return Ciphertext(pk, mpz(1))
    if k < 0:
        return Ciphertext(pk, powmod(gmpy2.invert(c.value, pk.n2), -k, pk.n2))
    return Ciphertext(pk, powmod(c.value, k, pk.n2))


def rerandomize(
    pk: PublicKey, c: Ciphertext, rng: Optional[RngLike] = None
) -> Ciphertext:
    """Same plaintext under fresh randomness (byte representation changes)."""
    if c.public_key != pk:
        raise CryptoError("ciphertext does not belong to this key")
    return Ciphertext(pk, c.value * pk.random_zero_factor(rng) % pk.n2)


class MultiExp:
    """Simultaneous product of c_i^(k_i) with a shared squaring chain.

    Precomputes per-base window tables once; each :meth:`combine` then costs
    one squaring run plus roughly one multiply per base per window digit.
    This is the server's emission-cost hot loop, where one observation
    ciphertext vector is raised to per-state model constants for every state,
    so reusing the tables across states beats independent exponentiations by
    a wide margin.  Scalars must be non-negative.
    """

    def __init__(self, ciphertexts: Sequence[Ciphertext], window: int = 4):
        if not ciphertexts:
            raise ValueError("empty base list")
        pk = ciphertexts[0].public_key
        n2 = pk.n2
        tables = []
        for c in ciphertexts:
            if c.public_key != pk:
                raise CryptoError("ciphertexts belong to different public keys")
            row = [c.value]
            acc = c.value
            for _ in range(2, 1 << window):
                acc = acc * c.value % n2
                row.append(acc)
            tables.append(row)
        self.pk = pk
        self.window = window
        self.tables = tables

    def combine(self, scalars: Sequence[int]) -> Ciphertext:
        if len(scalars) != len(self.tables):
            raise ValueError("scalar count does not match base count")
        max_bits = 0
        for k in scalars:
            if k < 0:
                raise ValueError("negative scalar in MultiExp.combine")
            max_bits = max(max_bits, int(k).bit_length())
        pk = self.pk
        if max_bits == 0:
            return Ciphertext(pk, mpz(1))
        n2 = pk.n2
        window = self.window
        n_digits = -(-max_bits // window)
        mask = (1 << window) - 1
        acc = mpz(1)
        for pos in range(n_digits - 1, -1, -1):
            if acc != 1:
                for _ in range(window):
                    acc = acc * acc % n2
            shift = pos * window
            for row, k in zip(self.tables, scalars):
                digit = (int(k) >> shift) & mask
                if digit:
                    acc = acc * row[digit - 1] % n2
        return Ciphertext(pk, acc)


def multi_scalar_mul(
    ciphertexts: Sequence[Ciphertext], scalars: Sequence[int], window: int = 4
) -> Ciphertext:
    """One-shot product of c_i^(k_i); see :class:`MultiExp`."""
    return MultiExp(ciphertexts, window).combine(scalars)


def _random_prime(bits: int, rng: RngLike) -> mpz:
    # Force the top two bits so the product of two such primes has exactly
    # 2*bits bits.
    candidate = mpz(rng.getrandbits(bits) | (3 << (bits - 2)) | 1)
    return gmpy2.next_prime(candidate)


def generate_keypair(
    key_bits: int = 2048, rng: Optional[RngLike] = None
) -> tuple[PublicKey, PrivateKey]:
    """Generate a fresh key pair; ``key_bits`` must be 1024, 2048, or 3072."""
    if key_bits not in ALLOWED_KEY_BITS:
        raise CryptoError(f"key_bits must be one of {ALLOWED_KEY_BITS}")
    rng = _default_rng(rng)
    half = key_bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() == key_bits:
            break
    x = mpz(rng.randrange(1, int(n)))
    h = (-(x * x)) % n
    h_n = powmod(h, n, n * n)
    pk = PublicKey(n, h_n, key_bits)
    return pk, PrivateKey(pk, p, q)


def save_key_file(path: str, key: Union[PublicKey, PrivateKey]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(key.to_json_dict(), fh, indent=2)
        fh.write("\n")


def load_key_file(path: str) -> Union[PublicKey, PrivateKey]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if "p" in data:
        return PrivateKey.from_json_dict(data)
    return PublicKey.from_json_dict(data)
