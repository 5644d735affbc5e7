"""The user agent.

Generates the key pair, encrypts measurement vectors (values and squares,
squared before encryption so the server never needs an interactive squaring),
plays the key-holder role in comparison and multiplication rounds, and
decrypts the per-step position reports.  The private key never leaves this
side: outbound frames carry only the public modulus and ciphertexts.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .fixedpoint import DEFAULT_PARAMS, FixedPointParams
from .hmm import ModelError, Observation
from .paillier import Ciphertext, CryptoError, PrivateKey, RngLike
from .stpc import (
    PairRequest,
    StpcError,
    answer_compare_batch,
    answer_multiply_batch,
    min_key_bits_for,
)
from .wire import (
    Bye,
    ErrorCode,
    ErrorMsg,
    Hello,
    HelloAck,
    MulReply,
    MulRequest,
    ObservationMsg,
    PositionMsg,
    ProtocolError,
    RoundReply,
    RoundRequest,
    TrafficStats,
    Transport,
    WireReply,
    PROTOCOL_VERSION,
)

_SYSTEM_RNG = random.SystemRandom()


class ClientError(RuntimeError):
    """Protocol failure observed by the client, tagged with the step index."""

    def __init__(self, message: str, t: Optional[int] = None, code: Optional[int] = None):
        super().__init__(message)
        self.t = t
        self.code = code


@dataclass
class PositionRecord:
    t: int
    state: int
    room: int


@dataclass
class StepStats:
    t: int
    wall_ms: float
    bytes_up: int
    bytes_down: int
    round_trips: int
    cmp_ops: int
    timed_out: bool = False


class LocalizationClient:
    """One localization session against a server, over a framed transport."""

    def __init__(
        self,
        private_key: PrivateKey,
        params: FixedPointParams = DEFAULT_PARAMS,
        rng: Optional[RngLike] = None,
    ):
        pk = private_key.public_key
        if pk.key_bits < min_key_bits_for(params):
            raise ClientError(
                f"{pk.key_bits}-bit key too small for these protocol parameters"
            )
        self.private_key = private_key
        self.public_key = pk
        self.params = params
        self.rng = rng if rng is not None else _SYSTEM_RNG
        self.session_id = self.rng.randbytes(16)
        self.transport: Optional[Transport] = None
        self.ack: Optional[HelloAck] = None
        self.positions: list[PositionRecord] = []
        self.step_rows: list[StepStats] = []
        self._next_t = 0
        self._stats = TrafficStats()

    # ------------------------------------------------------------------
    # Session lifecycle
    # ------------------------------------------------------------------

    def connect(self, transport: Transport) -> HelloAck:
        """Handshake: offer the public key and parameters, learn the model
        commitment and the public state-id map."""
        self.transport = transport
        hello = Hello(
            version=PROTOCOL_VERSION,
            key_bits=self.public_key.key_bits,
            n=int(self.public_key.n),
            h_n=int(self.public_key.h_n),
            measurement_scale=self.params.measurement_scale,
            l_cost=self.params.l_cost,
            kappa=self.params.kappa,
        )
        transport.send(self.session_id, hello)
        sid, msg = transport.recv()
        if isinstance(msg, ErrorMsg):
            raise ClientError(f"handshake rejected: {msg.text}", code=msg.code)
        if not isinstance(msg, HelloAck) or sid != self.session_id:
            raise ClientError("malformed handshake reply")
        self.ack = msg
        return msg

    def close(self) -> None:
        if self.transport is not None:
            try:
                self.transport.send(self.session_id, Bye())
            except OSError:
                pass
            self.transport.close()
            self.transport = None

    # ------------------------------------------------------------------
    # Observations and positions
    # ------------------------------------------------------------------

    def encrypt_observation(self, t: int, rssi: Sequence[float]) -> ObservationMsg:
        """Fixed-point encode, square exactly, and encrypt one RSSI vector."""
        obs = Observation.from_rssi(t, rssi, self.params)
        pk = self.public_key
        values = [pk.encrypt(r, rng=self.rng) for r in obs.r]
        squares = [pk.encrypt(sq, rng=self.rng) for sq in obs.r_sq]
        return ObservationMsg(
            t=t,
            values=[int(c.value) for c in values],
            squares=[int(c.value) for c in squares],
        )

    def _bind(self, raw: int, t: Optional[int] = None) -> Ciphertext:
        if not 0 < raw < self.public_key.n2:
            self._send_error(ErrorCode.MALFORMED, "ciphertext outside the ring")
            raise ClientError("server ciphertext outside the ring", t=t)
        return Ciphertext(self.public_key, raw)

    def _send_error(self, code: ErrorCode, text: str) -> None:
        if self.transport is not None:
            try:
                self.transport.send(self.session_id, ErrorMsg(code, text))
            except OSError:
                pass

    def answer_round(self, msg: RoundRequest, t: Optional[int] = None) -> RoundReply:
        """Serve one batched comparison round (the key-holder role)."""
        requests = [
            PairRequest(pair.has_index, self._bind(pair.combined, t))
            for pair in msg.pairs
        ]
        try:
            replies = answer_compare_batch(
                self.private_key, requests, self.params, self.rng
            )
        except (CryptoError, StpcError) as exc:
            self._send_error(ErrorCode.MALFORMED, str(exc))
            raise ClientError(f"cannot answer comparison round: {exc}", t=t) from exc
        return RoundReply(
            [
                WireReply(
                    chosen_flag=int(rep.chosen_flag.value),
                    blinded_value=int(rep.blinded_value.value),
                    blinded_index=(
                        int(rep.blinded_index.value)
                        if rep.blinded_index is not None
                        else None
                    ),
                )
                for rep in replies
            ]
        )

    def answer_multiply(self, msg: MulRequest, t: Optional[int] = None) -> MulReply:
        pairs = [(self._bind(cx, t), self._bind(cy, t)) for cx, cy in msg.pairs]
        try:
            products = answer_multiply_batch(self.private_key, pairs, self.rng)
        except CryptoError as exc:
            self._send_error(ErrorCode.MALFORMED, str(exc))
            raise ClientError(f"cannot answer multiplication: {exc}", t=t) from exc
        return MulReply([int(c.value) for c in products])

    def localize(self, rssi: Sequence[float]) -> PositionRecord:
        """Send one measurement, serve the protocol rounds, decrypt the
        resulting position."""
        if self.transport is None or self.ack is None:
            raise ClientError("session not connected")
        t = self._next_t
        transport = self.transport
        bytes_up0 = transport.bytes_sent
        bytes_down0 = transport.bytes_received
        rounds = 0
        pairs = 0
        started = time.perf_counter()
        try:
            msg = self.encrypt_observation(t, rssi)
        except ModelError as exc:
            raise ClientError(str(exc), t=t) from exc
        transport.send(self.session_id, msg)
        while True:
            sid, incoming = transport.recv()
            if sid != self.session_id:
                raise ClientError("session id changed mid-step", t=t)
            if isinstance(incoming, RoundRequest):
                reply = self.answer_round(incoming, t)
                pairs += len(incoming.pairs)
                rounds += 1
                transport.send(self.session_id, reply)
            elif isinstance(incoming, MulRequest):
                reply = self.answer_multiply(incoming, t)
                rounds += 1
                transport.send(self.session_id, reply)
            elif isinstance(incoming, PositionMsg):
                if incoming.t != t:
                    raise ClientError(
                        f"position for step {incoming.t}, expected {t}", t=t
                    )
                state = self.private_key.decrypt(self._bind(incoming.state, t))
                break
            elif isinstance(incoming, ErrorMsg):
                raise ClientError(
                    f"server error at step {t}: {incoming.text}",
                    t=t,
                    code=incoming.code,
                )
            else:
                raise ClientError(
                    f"unexpected {type(incoming).__name__} during step", t=t
                )
        if not 0 <= state < self.ack.n_states:
            raise ClientError(f"position id {state} outside the state map", t=t)
        wall_ms = (time.perf_counter() - started) * 1e3
        room = self.ack.states[state].room
        record = PositionRecord(t=t, state=state, room=room)
        self.positions.append(record)
        self.step_rows.append(
            StepStats(
                t=t,
                wall_ms=wall_ms,
                bytes_up=transport.bytes_sent - bytes_up0,
                bytes_down=transport.bytes_received - bytes_down0,
                round_trips=rounds,
                cmp_ops=pairs,
            )
        )
        self._stats.bytes_up += transport.bytes_sent - bytes_up0
        self._stats.bytes_down += transport.bytes_received - bytes_down0
        self._stats.round_trips += rounds
        self._stats.cmp_ops += pairs
        self._stats.wall_time_s += wall_ms / 1e3
        self._next_t += 1
        return record

    def run_trace(self, vectors: Sequence[Sequence[float]]) -> list[PositionRecord]:
        """Localize every measurement vector in order."""
        return [self.localize(rssi) for rssi in vectors]

    def traffic_stats(self) -> TrafficStats:
        return self._stats


# ----------------------------------------------------------------------
# Trace and result files (JSON lines)
# ----------------------------------------------------------------------


def load_trace_jsonl(path: str) -> list[list[float]]:
    """Read a measurement trace: one ``{"t":..., "rssi":[...]}`` per line."""
    vectors = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                vectors.append((int(row["t"]), [float(v) for v in row["rssi"]]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ClientError(f"bad trace line {lineno + 1}: {exc}") from exc
    vectors.sort(key=lambda tv: tv[0])
    return [rssi for _, rssi in vectors]


def save_positions_jsonl(path: str, records: Sequence[PositionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps({"t": rec.t, "state": rec.state, "room": rec.room}) + "\n"
            )
