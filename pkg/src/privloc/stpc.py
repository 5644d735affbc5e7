"""Interactive two-party building blocks over the homomorphic layer.

The server holds ciphertexts under the client's key and wants minima and
argminima of values it cannot read; the client holds the key and must learn
nothing about the values beyond what the protocol output reveals.

Compare-and-select (one round trip per pair)
--------------------------------------------

For a pair ((x, idx_x), (y, idx_y)) the server draws a fresh multiplicative
blind s in [1, 2^kappa] and additive blinds rho_x, rho_y in
[0, 2^(l_cost+kappa)) (plus sigma_x, sigma_y in [0, 2^(16+kappa)) when
indices ride along) and forms, homomorphically, a single packed ciphertext
whose plaintext carries bit-disjoint slots::

    [ idx_x + sigma_x | idx_y + sigma_y | s*(x-y) + OFF | x + rho_x + V | y + rho_y + V ]

(low slots first; OFF and V are public offsets keeping every slot
non-negative).  The client decrypts once, reads the sign of the token slot
(b = 1 iff x <= y, so ties pick the first element), and answers with three
fresh encryptions: [b], the chosen blinded value, and the chosen blinded
index.  The server unblinds locally::

    [min]    = [m_blind] - rho_y - [b]*(rho_x - rho_y)
    [argidx] = [i_blind] - sigma_y - [b]*(sigma_x - sigma_y)

The client's view per pair is exactly {sign-bearing blinded difference,
additively blinded value, additively blinded index}; every blind is single
use and every outbound ciphertext carries fresh randomness.

Tournaments
-----------

Min/argmin over k elements runs as a pairwise tree: ceil(log2 k) rounds,
k - 1 comparisons.  Inputs are permuted once per tournament so the comparison
bits the client sees cannot be mapped to specific model states.  Independent
tournaments advance in lockstep and all their pairs for one round travel in a
single protocol message, so a whole decoding step costs
ceil(log2 max_pred) + ceil(log2 n_states) round trips.

Interactive multiplication (not on the decoding hot path, but part of the
protocol surface) blinds both factors additively, has the client return the
product of the blinded values, and corrects locally.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

from gmpy2 import mpz, powmod

from .fixedpoint import DEFAULT_PARAMS, FixedPointParams
from .paillier import (
    Ciphertext,
    CryptoError,
    PrivateKey,
    PublicKey,
    RngLike,
    add,
    add_plain,
    scalar_mul,
)

# Bit width reserved for tournament index payloads (state ids).
IDX_BITS = 16

_SYSTEM_RNG = random.SystemRandom()


class StpcError(ValueError):
    """Protocol precondition or message-consistency violation."""


@dataclass(frozen=True)
class PairLayout:
    """Bit positions of the packed comparison slots for one pair kind."""

    has_index: bool
    ix_shift: int
    iy_shift: int
    token_shift: int
    x_shift: int
    y_shift: int
    token_slot_bits: int
    value_slot_bits: int
    idx_slot_bits: int
    token_offset: int
    value_offset: int
    total_bits: int


def make_layout(params: FixedPointParams, has_index: bool) -> PairLayout:
    s_bits = params.kappa
    value_blind_bits = params.l_cost + params.kappa
    idx_blind_bits = IDX_BITS + params.kappa
    token_mag_bits = params.l_cost + 1 + s_bits
    token_slot_bits = token_mag_bits + 4
    value_slot_bits = value_blind_bits + 3
    idx_slot_bits = idx_blind_bits + 3
    if has_index:
        ix_shift = 0
        iy_shift = idx_slot_bits
        token_shift = 2 * idx_slot_bits
    else:
        ix_shift = iy_shift = -1
        token_shift = 0
    x_shift = token_shift + token_slot_bits
    y_shift = x_shift + value_slot_bits
    return PairLayout(
        has_index=has_index,
        ix_shift=ix_shift,
        iy_shift=iy_shift,
        token_shift=token_shift,
        x_shift=x_shift,
        y_shift=y_shift,
        token_slot_bits=token_slot_bits,
        value_slot_bits=value_slot_bits,
        idx_slot_bits=idx_slot_bits,
        token_offset=1 << (token_mag_bits + 1),
        value_offset=1 << params.l_cost,
        total_bits=y_shift + value_slot_bits,
    )


def min_key_bits_for(params: FixedPointParams) -> int:
    """Smallest key size whose plaintext ring fits the packed slots and the
    blinded-product bound of the interactive multiplication."""
    packed = make_layout(params, has_index=True).total_bits + 2
    blinded_product = 2 * (params.l_cost + params.kappa) + 2 + 2
    return max(packed, blinded_product)


@dataclass
class PairRequest:
    """Server -> client: one packed comparison ciphertext."""

    has_index: bool
    combined: Ciphertext


@dataclass
class PairReply:
    """Client -> server: encrypted comparison bit plus chosen blinded slots."""

    chosen_flag: Ciphertext
    blinded_value: Ciphertext
    blinded_index: Optional[Ciphertext] = None


@dataclass
class PairSecrets:
    """Server-side single-use blinding record for one pair."""

    s: int
    rho_x: int
    rho_y: int
    sigma_x: int = 0
    sigma_y: int = 0


@dataclass
class MulSecrets:
    r1: int
    r2: int


class BlindingAudit:
    """Test-build instrumentation: records every blinding draw of a session."""

    def __init__(self):
        self.draws: list[tuple[str, int]] = []

    def record(self, kind: str, value: int) -> None:
        self.draws.append((kind, value))

    def values(self, kind: Optional[str] = None) -> list[int]:
        return [v for k, v in self.draws if kind is None or k == kind]


class RoundExecutor(Protocol):
    """One batched protocol round trip to the key holder."""

    def compare_round(self, requests: Sequence[PairRequest]) -> list[PairReply]:
        ...

    def multiply_round(
        self, requests: Sequence[tuple[Ciphertext, Ciphertext]]
    ) -> list[Ciphertext]:
        ...


IndexInput = Union[int, Ciphertext, None]


class CompareEngine:
    """Server-side blinding and unblinding for compare-and-select pairs."""

    def __init__(
        self,
        public_key: PublicKey,
        params: FixedPointParams = DEFAULT_PARAMS,
        rng: Optional[RngLike] = None,
        audit: Optional[BlindingAudit] = None,
    ):
        if public_key.key_bits < min_key_bits_for(params):
            raise StpcError(
                f"{public_key.key_bits}-bit key too small for the blinded "
                f"slot layout (need >= {min_key_bits_for(params)})"
            )
        self.pk = public_key
        self.params = params
        self.rng = rng if rng is not None else _SYSTEM_RNG
        self.audit = audit
        self.value_layout = make_layout(params, has_index=False)
        self.index_layout = make_layout(params, has_index=True)
        self.comparisons = 0
        self.multiplications = 0

    def _draw(self, kind: str, bits: int) -> int:
        value = self.rng.getrandbits(bits)
        if self.audit is not None:
            self.audit.record(kind, value)
        return value

    def build_pair(
        self,
        x: Ciphertext,
        y: Ciphertext,
        idx_x: IndexInput = None,
        idx_y: IndexInput = None,
    ) -> tuple[PairRequest, PairSecrets]:
        """Blind one ((x, idx_x), (y, idx_y)) pair into a packed request."""
        has_index = idx_x is not None
        if has_index != (idx_y is not None):
            raise StpcError("both or neither index must be supplied")
        layout = self.index_layout if has_index else self.value_layout
        params = self.params
        pk = self.pk
        n2 = pk.n2

        # s uniform in [1, 2^kappa]; rho uniform in [0, 2^(l_cost+kappa)).
        s = self.rng.getrandbits(params.kappa) + 1
        if self.audit is not None:
            self.audit.record("s", s)
        rho_x = self._draw("rho", params.l_cost + params.kappa)
        rho_y = self._draw("rho", params.l_cost + params.kappa)
        secrets = PairSecrets(s=s, rho_x=rho_x, rho_y=rho_y)

        # Plaintext-side constant of the packed value; encrypted operands
        # contribute through their exponents.
        const = layout.token_offset << layout.token_shift
        const += (rho_x + layout.value_offset) << layout.x_shift
        const += (rho_y + layout.value_offset) << layout.y_shift

        e_x = (s << layout.token_shift) + (1 << layout.x_shift)
        e_y = (1 << layout.y_shift) - (s << layout.token_shift)
        acc = powmod(x.value, e_x, n2) * powmod(y.value, e_y, n2) % n2

        if has_index:
            sigma_x = self._draw("sigma", IDX_BITS + params.kappa)
            sigma_y = self._draw("sigma", IDX_BITS + params.kappa)
            secrets.sigma_x = sigma_x
            secrets.sigma_y = sigma_y
            const += sigma_x << layout.ix_shift
            const += sigma_y << layout.iy_shift
            for idx, shift in ((idx_x, layout.ix_shift), (idx_y, layout.iy_shift)):
                if isinstance(idx, Ciphertext):
                    acc = acc * powmod(idx.value, 1 << shift, n2) % n2
                else:
                    if not 0 <= int(idx) < (1 << IDX_BITS):
                        raise StpcError(f"index {idx} outside {IDX_BITS}-bit range")
                    const += int(idx) << shift

        acc = acc * ((1 + pk.n * mpz(const)) % n2) % n2
        acc = acc * pk.random_zero_factor(self.rng) % n2
        self.comparisons += 1
        return PairRequest(has_index, Ciphertext(pk, acc)), secrets

    def unblind(
        self, reply: PairReply, secrets: PairSecrets, has_index: bool
    ) -> tuple[Ciphertext, Optional[Ciphertext]]:
        """Recover [min] (and [argmin index]) from a client reply."""
        b = reply.chosen_flag
        minimum = add_plain(reply.blinded_value, -secrets.rho_y)
        minimum = add(minimum, scalar_mul(secrets.rho_y - secrets.rho_x, b))
        index = None
        if has_index:
            if reply.blinded_index is None:
                raise StpcError("reply missing the blinded index")
            index = add_plain(reply.blinded_index, -secrets.sigma_y)
            index = add(index, scalar_mul(secrets.sigma_y - secrets.sigma_x, b))
        return minimum, index

    def build_mul_pair(
        self, x: Ciphertext, y: Ciphertext
    ) -> tuple[tuple[Ciphertext, Ciphertext], MulSecrets]:
        bits = self.params.l_cost + self.params.kappa
        r1 = self._draw("r", bits)
        r2 = self._draw("r", bits)
        cx = add_plain(x, r1)
        cy = add_plain(y, r2)
        cx = Ciphertext(self.pk, cx.value * self.pk.random_zero_factor(self.rng) % self.pk.n2)
        cy = Ciphertext(self.pk, cy.value * self.pk.random_zero_factor(self.rng) % self.pk.n2)
        self.multiplications += 1
        return (cx, cy), MulSecrets(r1=r1, r2=r2)

    def unblind_mul(
        self, z: Ciphertext, secrets: MulSecrets, x: Ciphertext, y: Ciphertext
    ) -> Ciphertext:
        # z = (x + r1)(y + r2); subtract r1*y, r2*x and r1*r2.
        out = add(z, scalar_mul(-secrets.r1, y))
        out = add(out, scalar_mul(-secrets.r2, x))
        return add_plain(out, -(secrets.r1 * secrets.r2))


def interactive_multiply(
    engine: CompareEngine,
    x: Ciphertext,
    y: Ciphertext,
    executor: RoundExecutor,
) -> Ciphertext:
    """Exact [x*y] in one round trip via additive blinding of both factors."""
    (cx, cy), secrets = engine.build_mul_pair(x, y)
    (z,) = executor.multiply_round([(cx, cy)])
    return engine.unblind_mul(z, secrets, x, y)


# --------------------------------------------------------------------------
# Key-holder side
# --------------------------------------------------------------------------


def answer_compare(
    private_key: PrivateKey,
    request: PairRequest,
    params: FixedPointParams = DEFAULT_PARAMS,
    rng: Optional[RngLike] = None,
) -> PairReply:
    """Decrypt one packed pair, pick the smaller side, re-encrypt the blinds."""
    layout = make_layout(params, request.has_index)
    m = private_key.decrypt(request.combined)
    if m < 0 or m >> layout.total_bits:
        raise StpcError("packed comparison plaintext outside the slot layout")
    pk = private_key.public_key

    def slot(shift: int, bits: int) -> int:
        return (m >> shift) & ((1 << bits) - 1)

    token = slot(layout.token_shift, layout.token_slot_bits) - layout.token_offset
    b = 1 if token <= 0 else 0
    value_shift = layout.x_shift if b else layout.y_shift
    blinded_value = slot(value_shift, layout.value_slot_bits) - layout.value_offset
    reply = PairReply(
        chosen_flag=pk.encrypt(b, rng=rng),
        blinded_value=pk.encrypt(blinded_value, rng=rng, l_cost=None),
    )
    if request.has_index:
        idx_shift = layout.ix_shift if b else layout.iy_shift
        blinded_index = slot(idx_shift, layout.idx_slot_bits)
        reply.blinded_index = pk.encrypt(blinded_index, rng=rng, l_cost=None)
    return reply


def answer_compare_batch(
    private_key: PrivateKey,
    requests: Sequence[PairRequest],
    params: FixedPointParams = DEFAULT_PARAMS,
    rng: Optional[RngLike] = None,
) -> list[PairReply]:
    return [answer_compare(private_key, req, params, rng) for req in requests]


def answer_multiply(
    private_key: PrivateKey,
    cx: Ciphertext,
    cy: Ciphertext,
    rng: Optional[RngLike] = None,
) -> Ciphertext:
    """Decrypt both blinded factors and return their product, encrypted."""
    x = private_key.decrypt(cx)
    y = private_key.decrypt(cy)
    return private_key.public_key.encrypt(x * y, rng=rng, l_cost=None)


def answer_multiply_batch(
    private_key: PrivateKey,
    requests: Sequence[tuple[Ciphertext, Ciphertext]],
    rng: Optional[RngLike] = None,
) -> list[Ciphertext]:
    return [answer_multiply(private_key, cx, cy, rng) for cx, cy in requests]


class LocalRoundExecutor:
    """In-process executor: answers rounds directly with the private key.

    Used by unit tests and the plaintext-free parts of the benchmark; the
    wire-backed executor in the server module has the same interface.
    """

    def __init__(
        self,
        private_key: PrivateKey,
        params: FixedPointParams = DEFAULT_PARAMS,
        rng: Optional[RngLike] = None,
    ):
        self.private_key = private_key
        self.params = params
        self.rng = rng
        self.rounds = 0
        self.pairs = 0

    def compare_round(self, requests: Sequence[PairRequest]) -> list[PairReply]:
        self.rounds += 1
        self.pairs += len(requests)
        return answer_compare_batch(self.private_key, requests, self.params, self.rng)

    def multiply_round(
        self, requests: Sequence[tuple[Ciphertext, Ciphertext]]
    ) -> list[Ciphertext]:
        self.rounds += 1
        return answer_multiply_batch(self.private_key, requests, self.rng)


# --------------------------------------------------------------------------
# Tournaments
# --------------------------------------------------------------------------


Entry = tuple[Ciphertext, IndexInput]


def run_tournaments(
    engine: CompareEngine,
    tournaments: Sequence[Sequence[Entry]],
    executor: RoundExecutor,
) -> list[Entry]:
    """Run independent min/argmin tournaments in lockstep.

    Each tournament is a non-empty list of (value ciphertext, index) entries;
    an index of ``None`` requests a value-only minimum.  Entries of every
    tournament are permuted once up front; each round pairs adjacent
    survivors and ships all pairs of all tournaments as one batch.  Returns
    one (value, index) winner per tournament, where the index (when
    requested) is a ciphertext of the winning entry's original index.
    """
    survivors: list[list[Entry]] = []
    for entries in tournaments:
        if not entries:
            raise StpcError("empty tournament input")
        mixed = list(entries)
        _shuffle(mixed, engine.rng)
        survivors.append(mixed)

    while any(len(s) > 1 for s in survivors):
        requests: list[PairRequest] = []
        secrets: list[PairSecrets] = []
        slots: list[tuple[int, int]] = []  # (tournament, winner position)
        next_rounds: list[list[Entry]] = []
        for ti, entries in enumerate(survivors):
            nxt: list[Entry] = []
            for k in range(0, len(entries) - 1, 2):
                (xv, xi), (yv, yi) = entries[k], entries[k + 1]
                req, sec = engine.build_pair(xv, yv, xi, yi)
                requests.append(req)
                secrets.append(sec)
                slots.append((ti, len(nxt)))
                nxt.append((None, None))  # placeholder for the winner
            if len(entries) % 2:
                nxt.append(entries[-1])
            next_rounds.append(nxt)
        replies = executor.compare_round(requests)
        if len(replies) != len(requests):
            raise StpcError(
                f"round reply count {len(replies)} != request count {len(requests)}"
            )
        for req, sec, reply, (ti, pos) in zip(requests, secrets, replies, slots):
            winner = engine.unblind(reply, sec, req.has_index)
            next_rounds[ti][pos] = winner
        survivors = next_rounds

    results: list[Entry] = []
    for entries in survivors:
        value, idx = entries[0]
        if isinstance(idx, int):
            # Single-entry tournament: materialize the index under encryption.
            idx = engine.pk.encrypt(idx, rng=engine.rng, l_cost=None)
        results.append((value, idx))
    return results


def min_argmin_tournament(
    engine: CompareEngine,
    values: Sequence[Ciphertext],
    indices: Sequence[int],
    executor: RoundExecutor,
) -> tuple[Ciphertext, Ciphertext]:
    """Minimum and (encrypted) original index of the minimum of one list."""
    if len(values) != len(indices):
        raise StpcError("values and indices differ in length")
    entries: list[Entry] = list(zip(values, indices))
    ((minimum, index),) = run_tournaments(engine, [entries], executor)
    return minimum, index


def min_tournament(
    engine: CompareEngine,
    values: Sequence[Ciphertext],
    executor: RoundExecutor,
) -> Ciphertext:
    """Value-only minimum of one list."""
    entries: list[Entry] = [(v, None) for v in values]
    ((minimum, _),) = run_tournaments(engine, [entries], executor)
    return minimum


def tournament_rounds(width: int) -> int:
    """Round trips consumed by a tournament over ``width`` entries."""
    if width < 1:
        raise StpcError("tournament width must be >= 1")
    rounds = 0
    while width > 1:
        width = (width + 1) // 2
        rounds += 1
    return rounds


def _shuffle(items: list, rng: RngLike) -> None:
    for i in range(len(items) - 1, 0, -1):
        j = rng.randrange(i + 1)
        items[i], items[j] = items[j], items[i]
