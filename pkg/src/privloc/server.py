"""The localization provider.

Holds the secret HMM, computes encrypted emission costs locally (zero round
trips), runs the encrypted Viterbi recursion through batched comparison
tournaments, and reports positions as ciphertexts of state ids.  This module
deliberately has no private-key capability: it never imports or touches
decryption material, which is what makes the user's measurements and
positions invisible to it.
"""

from __future__ import annotations

import json
import logging
import math
import random
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .fixedpoint import FixedPointParams
from .hmm import HmmModel
from .paillier import (
    ALLOWED_KEY_BITS,
    Ciphertext,
    MultiExp,
    PublicKey,
    RngLike,
    add,
    add_plain,
    rerandomize,
)
from .stpc import (
    BlindingAudit,
    CompareEngine,
    PairReply,
    PairRequest,
    StpcError,
    min_key_bits_for,
    run_tournaments,
)
from .wire import (
    Bye,
    ConnectionClosedError,
    ErrorCode,
    ErrorMsg,
    FrameDecodeError,
    Hello,
    HelloAck,
    MessageType,
    ObservationMsg,
    PositionMsg,
    ProtocolError,
    RoundReply,
    RoundRequest,
    StateInfo,
    TrafficStats,
    Transport,
    WirePair,
    PROTOCOL_VERSION,
    DEFAULT_PORT,
)

logger = logging.getLogger("privloc.server")

DEFAULT_T_MAX = 1000


@dataclass
class EncryptedObservation:
    """D measurement ciphertexts plus their D square ciphertexts."""

    t: int
    values: list[Ciphertext]
    squares: list[Ciphertext]


class _WireRoundExecutor:
    """Drives batched tournament rounds over the session transport."""

    def __init__(self, transport: Transport, session_id: bytes, pk: PublicKey):
        self.transport = transport
        self.session_id = session_id
        self.pk = pk
        self.round_trips = 0

    def _bind(self, raw: int) -> Ciphertext:
        if not 0 < raw < self.pk.n2:
            raise ProtocolError(ErrorCode.MALFORMED, "reply ciphertext outside the ring")
        return Ciphertext(self.pk, raw)

    def compare_round(self, requests: Sequence[PairRequest]) -> list[PairReply]:
        msg = RoundRequest(
            [WirePair(req.has_index, int(req.combined.value)) for req in requests]
        )
        self.transport.send(self.session_id, msg)
        sid, reply = self.transport.recv()
        self.round_trips += 1
        if sid != self.session_id:
            raise ProtocolError(ErrorCode.BAD_SESSION, "session id changed mid-round")
        if isinstance(reply, ErrorMsg):
            raise ProtocolError(ErrorCode(reply.code), f"client error: {reply.text}")
        if not isinstance(reply, RoundReply):
            raise ProtocolError(
                ErrorCode.MALFORMED, f"expected ROUND_REPLY, got {type(reply).__name__}"
            )
        if len(reply.replies) != len(requests):
            raise ProtocolError(
                ErrorCode.COUNT_MISMATCH,
                f"round reply carries {len(reply.replies)} pairs, expected {len(requests)}",
            )
        out = []
        for req, rep in zip(requests, reply.replies):
            if req.has_index and rep.blinded_index is None:
                raise ProtocolError(ErrorCode.COUNT_MISMATCH, "reply missing index part")
            out.append(
                PairReply(
                    chosen_flag=self._bind(rep.chosen_flag),
                    blinded_value=self._bind(rep.blinded_value),
                    blinded_index=(
                        self._bind(rep.blinded_index) if rep.blinded_index is not None else None
                    ),
                )
            )
        return out

    def multiply_round(self, requests):
        from .wire import MulReply, MulRequest

        msg = MulRequest([(int(cx.value), int(cy.value)) for cx, cy in requests])
        self.transport.send(self.session_id, msg)
        sid, reply = self.transport.recv()
        self.round_trips += 1
        if isinstance(reply, ErrorMsg):
            raise ProtocolError(ErrorCode(reply.code), f"client error: {reply.text}")
        if not isinstance(reply, MulReply) or len(reply.products) != len(requests):
            raise ProtocolError(ErrorCode.COUNT_MISMATCH, "bad multiplication reply")
        return [self._bind(v) for v in reply.products]


class ServerSession:
    """Per-client decoding state: the running encrypted cost vector."""

    def __init__(
        self,
        model: HmmModel,
        tables: "ModelTables",
        public_key: PublicKey,
        session_id: bytes,
        rng: RngLike,
        t_max: int = DEFAULT_T_MAX,
        audit: Optional[BlindingAudit] = None,
        capture_min_costs: bool = False,
    ):
        self.model = model
        self.tables = tables
        self.pk = public_key
        self.session_id = session_id
        self.rng = rng
        self.t_max = t_max
        self.engine = CompareEngine(public_key, model.params, rng, audit)
        self.theta: Optional[list[Ciphertext]] = None
        self.t = -1
        self.steps_since_reset = 0
        self.capture_min_costs = capture_min_costs
        self.captured_min_costs: list[tuple[int, Ciphertext]] = []
        self.stats = TrafficStats()

    def traffic_stats(self) -> TrafficStats:
        return self.stats

    def compute_emission_costs(self, enc_obs: EncryptedObservation) -> list[Ciphertext]:
        """[e_i] = sum_d [r_d^2] - 2 mu_id [r_d] + mu_id^2 for every state.

        Local homomorphic arithmetic only; no protocol round trips.
        """
        model = self.model
        if len(enc_obs.values) != model.n_aps or len(enc_obs.squares) != model.n_aps:
            raise ProtocolError(
                ErrorCode.COUNT_MISMATCH,
                f"observation carries {len(enc_obs.values)} APs, model has {model.n_aps}",
            )
        n2 = self.pk.n2
        acc = enc_obs.squares[0].value
        for c in enc_obs.squares[1:]:
            acc = acc * c.value % n2
        squares_sum = Ciphertext(self.pk, acc)
        multi = MultiExp(enc_obs.values)
        out = []
        for i in range(model.n_states):
            e = add(squares_sum, multi.combine(self.tables.neg2mu[i]))
            out.append(add_plain(e, self.tables.mu_sq_sum[i]))
        return out

    def viterbi_step(
        self, enc_obs: EncryptedObservation, executor
    ) -> Ciphertext:
        """Advance one decoding step; returns the encrypted argmin state id."""
        model = self.model
        if enc_obs.t != self.t + 1:
            raise ProtocolError(
                ErrorCode.OUT_OF_ORDER,
                f"observation t={enc_obs.t}, expected {self.t + 1}",
            )
        fresh = self.theta is None or self.steps_since_reset >= self.t_max
        projected_steps = 1 if fresh else self.steps_since_reset + 1
        if projected_steps * self.tables.max_increment >= model.params.max_magnitude:
            raise ProtocolError(
                ErrorCode.COST_OVERFLOW,
                "accumulated cost bound would overflow; re-key or reset the session",
            )
        emissions = self.compute_emission_costs(enc_obs)
        if fresh:
            theta = [
                add_plain(emissions[i], model.pi_cost[i])
                for i in range(model.n_states)
            ]
            self.steps_since_reset = 1
        else:
            tournaments = [
                [
                    (add_plain(self.theta[j], a), None)
                    for j, a in zip(model.pred[i], model.a_cost[i])
                ]
                for i in range(model.n_states)
            ]
            winners = run_tournaments(self.engine, tournaments, executor)
            theta = [
                add(value, emissions[i]) for i, (value, _) in enumerate(winners)
            ]
            self.steps_since_reset += 1
        self.theta = theta

        entries = [(theta[i], i) for i in range(model.n_states)]
        ((min_cost, idx_ct),) = run_tournaments(self.engine, [entries], executor)
        if self.capture_min_costs:
            self.captured_min_costs.append((enc_obs.t, min_cost))
        self.t = enc_obs.t
        return rerandomize(self.pk, idx_ct, self.rng)


class ModelTables:
    """Per-model constants shared read-only across sessions."""

    def __init__(self, model: HmmModel):
        self.neg2mu = tuple(
            tuple(-2 * m for m in row) for row in model.mu
        )
        self.mu_sq_sum = tuple(sum(m * m for m in row) for row in model.mu)
        self.max_increment = model.max_step_increment()


def expected_cmp_ops(model: HmmModel, fresh_step: bool) -> int:
    """Comparison budget of one step: sum(|pred|-1) + (N-1); fresh steps skip
    the predecessor phase."""
    n = model.n_states
    if fresh_step:
        return n - 1
    return sum(len(p) - 1 for p in model.pred) + (n - 1)


def expected_round_trips(model: HmmModel, fresh_step: bool) -> int:
    """ceil(log2 max_pred) + ceil(log2 N) for recursion steps; fresh steps
    run only the argmin tournament."""
    argmin_rounds = math.ceil(math.log2(model.n_states)) if model.n_states > 1 else 0
    if fresh_step:
        return argmin_rounds
    pred_rounds = math.ceil(math.log2(model.max_pred)) if model.max_pred > 1 else 0
    return pred_rounds + argmin_rounds


class LocalizationServer:
    """Accepts sessions, enforces the wire state machine, serves positions."""

    def __init__(
        self,
        model: HmmModel,
        t_max: int = DEFAULT_T_MAX,
        rng: Optional[RngLike] = None,
        stats_writer: Optional[Callable[[dict], None]] = None,
        capture_min_costs: bool = False,
        audit_factory: Optional[Callable[[], BlindingAudit]] = None,
    ):
        self.model = model.validate()
        self.tables = ModelTables(model)
        self.t_max = t_max
        self.rng = rng if rng is not None else random.SystemRandom()
        self.stats_writer = stats_writer
        self.capture_min_costs = capture_min_costs
        self.audit_factory = audit_factory
        self.sessions: dict[bytes, ServerSession] = {}
        self.bound_port: Optional[int] = None

    def _validate_hello(self, hello: Hello) -> Optional[ErrorMsg]:
        params = self.model.params
        if hello.version != PROTOCOL_VERSION:
            return ErrorMsg(
                ErrorCode.VERSION_MISMATCH,
                f"protocol version {hello.version}, server speaks {PROTOCOL_VERSION}",
            )
        if hello.key_bits not in ALLOWED_KEY_BITS:
            return ErrorMsg(ErrorCode.WEAK_KEY, f"key size {hello.key_bits} not allowed")
        if hello.n.bit_length() != hello.key_bits:
            return ErrorMsg(ErrorCode.WEAK_KEY, "modulus length does not match key_bits")
        # Blinded comparison arithmetic must fit the plaintext ring.
        if hello.key_bits // 2 <= 2 * (hello.l_cost + hello.kappa) + 2:
            return ErrorMsg(ErrorCode.WEAK_KEY, "key too small for the blinding bound")
        if hello.key_bits < min_key_bits_for(params):
            return ErrorMsg(ErrorCode.WEAK_KEY, "key too small for the packed slots")
        if (
            hello.measurement_scale != params.measurement_scale
            or hello.l_cost != params.l_cost
            or hello.kappa != params.kappa
        ):
            return ErrorMsg(
                ErrorCode.MALFORMED,
                "fixed-point parameters do not match the server model",
            )
        return None

    def _hello_ack(self) -> HelloAck:
        return HelloAck(
            model_digest=self.model.digest(),
            n_states=self.model.n_states,
            n_aps=self.model.n_aps,
            max_pred=self.model.max_pred,
            t_max=self.t_max,
            states=[
                StateInfo(s.x, s.y, s.room) for s in self.model.states
            ],
        )

    def _bind_observation(
        self, pk: PublicKey, msg: ObservationMsg
    ) -> EncryptedObservation:
        def bind(raw: int) -> Ciphertext:
            if not 0 < raw < pk.n2:
                raise ProtocolError(
                    ErrorCode.MALFORMED, "observation ciphertext outside the ring"
                )
            return Ciphertext(pk, raw)

        return EncryptedObservation(
            t=msg.t,
            values=[bind(v) for v in msg.values],
            squares=[bind(v) for v in msg.squares],
        )

    def handle_transport(self, transport: Transport) -> Optional[ServerSession]:
        """Run one full session on an established transport."""
        try:
            session_id, msg = transport.recv()
        except (FrameDecodeError, ConnectionClosedError) as exc:
            logger.warning("handshake failed: %s", exc)
            return None
        if not isinstance(msg, Hello):
            transport.send(session_id, ErrorMsg(ErrorCode.MALFORMED, "expected HELLO"))
            return None
        problem = self._validate_hello(msg)
        if problem is not None:
            transport.send(session_id, problem)
            return None
        if session_id in self.sessions:
            transport.send(
                session_id, ErrorMsg(ErrorCode.BAD_SESSION, "session id already in use")
            )
            return None
        pk = PublicKey(msg.n, msg.h_n, msg.key_bits)
        audit = self.audit_factory() if self.audit_factory else None
        session = ServerSession(
            self.model,
            self.tables,
            pk,
            session_id,
            self.rng,
            self.t_max,
            audit=audit,
            capture_min_costs=self.capture_min_costs,
        )
        self.sessions[session_id] = session
        transport.send(session_id, self._hello_ack())
        executor = _WireRoundExecutor(transport, session_id, pk)
        try:
            self._session_loop(session, transport, executor)
        finally:
            self.sessions.pop(session_id, None)
        return session

    def _session_loop(
        self, session: ServerSession, transport: Transport, executor: _WireRoundExecutor
    ) -> None:
        while True:
            try:
                sid, msg = transport.recv()
            except ConnectionClosedError:
                return
            except FrameDecodeError as exc:
                transport.send(session.session_id, ErrorMsg(ErrorCode.MALFORMED, str(exc)))
                return
            if sid != session.session_id:
                transport.send(sid, ErrorMsg(ErrorCode.BAD_SESSION, "unknown session id"))
                return
            if isinstance(msg, Bye):
                return
            if isinstance(msg, ErrorMsg):
                logger.warning("client error %s: %s", msg.code, msg.text)
                return
            if not isinstance(msg, ObservationMsg):
                transport.send(
                    sid,
                    ErrorMsg(
                        ErrorCode.MALFORMED,
                        f"unexpected {type(msg).__name__} in the observation loop",
                    ),
                )
                return
            bytes_up0 = transport.bytes_received
            bytes_down0 = transport.bytes_sent
            rounds0 = executor.round_trips
            cmps0 = session.engine.comparisons
            started = time.perf_counter()
            try:
                enc_obs = self._bind_observation(session.pk, msg)
                position = session.viterbi_step(enc_obs, executor)
            except ProtocolError as exc:
                transport.send(sid, ErrorMsg(exc.code, str(exc)))
                return
            except StpcError as exc:
                transport.send(sid, ErrorMsg(ErrorCode.COUNT_MISMATCH, str(exc)))
                return
            except ConnectionClosedError:
                return
            transport.send(sid, PositionMsg(msg.t, int(position.value)))
            wall_ms = (time.perf_counter() - started) * 1e3
            row = {
                "t": msg.t,
                "wall_ms": wall_ms,
                "bytes_up": transport.bytes_received - bytes_up0,
                "bytes_down": transport.bytes_sent - bytes_down0,
                "round_trips": executor.round_trips - rounds0,
                "cmp_ops": session.engine.comparisons - cmps0,
            }
            session.stats.bytes_up += row["bytes_up"]
            session.stats.bytes_down += row["bytes_down"]
            session.stats.round_trips += row["round_trips"]
            session.stats.cmp_ops += row["cmp_ops"]
            session.stats.wall_time_s += wall_ms / 1e3
            if self.stats_writer is not None:
                self.stats_writer(row)

    def serve(
        self,
        host: str = "",
        port: int = DEFAULT_PORT,
        *,
        ready: Optional[threading.Event] = None,
        stop: Optional[threading.Event] = None,
        latency_s: float = 0.0,
    ) -> None:
        """Accept and serve sessions until ``stop`` is set."""
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host or "0.0.0.0", port))
        except OSError as exc:
            listener.close()
            raise RuntimeError(f"cannot bind {host}:{port}: {exc}") from exc
        listener.listen()
        listener.settimeout(0.2)
        self.bound_port = listener.getsockname()[1]
        logger.info(
            "ready: n_states=%d n_aps=%d max_pred=%d port=%d t_max=%d",
            self.model.n_states,
            self.model.n_aps,
            self.model.max_pred,
            self.bound_port,
            self.t_max,
        )
        if ready is not None:
            ready.set()
        threads: list[threading.Thread] = []
        try:
            while stop is None or not stop.is_set():
                try:
                    conn, peer = listener.accept()
                except socket.timeout:
                    continue
                logger.info("session from %s", peer)
                thread = threading.Thread(
                    target=self._serve_connection,
                    args=(conn, latency_s),
                    daemon=True,
                )
                thread.start()
                threads.append(thread)
        finally:
            listener.close()
            for thread in threads:
                thread.join(timeout=5.0)

    def _serve_connection(self, conn: socket.socket, latency_s: float) -> None:
        transport = Transport(conn, latency_s=latency_s)
        try:
            self.handle_transport(transport)
        except Exception:
            logger.exception("session failed")
        finally:
            transport.close()


def jsonl_stats_writer(fh) -> Callable[[dict], None]:
    """Stats callback emitting one JSON object per localization step."""

    lock = threading.Lock()

    def write(row: dict) -> None:
        with lock:
            fh.write(json.dumps(row) + "\n")
            fh.flush()

    return write
