"""Hidden Markov Model over floor positions, in negative-log fixed point.

The model is the localization provider's secret: states are grid cells, the
transition structure encodes admissible movement (predecessor lists), and the
emission model is a mean RSSI vector per state.  Probabilities are stored as
integer costs ``round(-ln(p) * cost_scale)``, which turns the Viterbi max
into a min over sums of non-negative integers, so the plaintext decoder here
computes exactly the same integers as the encrypted pipeline and serves as
its bit-exact oracle.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence, Union

import mpmath

from .fixedpoint import (
    DEFAULT_PARAMS,
    EncodingRangeError,
    FixedPointParams,
    RSSI_MAX_DBM,
    RSSI_MIN_DBM,
    fp_encode,
)

MODEL_FORMAT_VERSION = 1

# Transition probabilities below this floor are clamped (then the row is
# renormalized) before the negative-log transform, keeping costs finite.
PROBABILITY_FLOOR = 1e-9

ROW_SUM_TOLERANCE = 1e-9


class ModelError(ValueError):
    """Model construction, validation, or (de)serialization failure."""


def neg_log_cost(p: float, scale: int) -> int:
    """``round(-ln(p) * scale)`` computed in high precision.

    ``p`` must lie in (0, 1]; callers clamp near-zero probabilities with
    :data:`PROBABILITY_FLOOR` at model build time.
    """
    if not 0.0 < p <= 1.0:
        raise ModelError(f"probability {p} outside (0, 1]")
    with mpmath.workdps(50):
        return int(mpmath.nint(-mpmath.ln(mpmath.mpf(p)) * scale))


@dataclass(frozen=True)
class StateMeta:
    """Grid placement of one model state."""

    id: int
    x: float
    y: float
    room: int


@dataclass(frozen=True)
class Observation:
    """One fixed-point RSSI measurement vector with exact integer squares."""

    t: int
    r: tuple[int, ...]
    r_sq: tuple[int, ...]

    def __post_init__(self):
        if len(self.r) != len(self.r_sq):
            raise ModelError("observation value/square length mismatch")
        for v, sq in zip(self.r, self.r_sq):
            if sq != v * v:
                raise ModelError("observation squares are not exact")

    @classmethod
    def from_rssi(
        cls,
        t: int,
        rssi: Sequence[float],
        params: FixedPointParams = DEFAULT_PARAMS,
    ) -> "Observation":
        for value in rssi:
            if not RSSI_MIN_DBM <= value <= RSSI_MAX_DBM:
                raise ModelError(
                    f"RSSI {value} dBm outside [{RSSI_MIN_DBM}, {RSSI_MAX_DBM}]"
                )
        r = tuple(fp_encode(v, params.measurement_scale, params.l_cost) for v in rssi)
        return cls(t=t, r=r, r_sq=tuple(v * v for v in r))


@dataclass
class HmmModel:
    """States, predecessor lists, transition/initial costs, emission means.

    ``a_cost[i][k]`` is the cost of the transition ``pred[i][k] -> i``; the
    two lists are index-aligned.  ``mu[i][d]`` is the mean RSSI of access
    point ``d`` at state ``i`` at measurement scale; costs are at cost scale.
    """

    states: tuple[StateMeta, ...]
    pred: tuple[tuple[int, ...], ...]
    a_cost: tuple[tuple[int, ...], ...]
    mu: tuple[tuple[int, ...], ...]
    pi_cost: tuple[int, ...]
    params: FixedPointParams = field(default_factory=FixedPointParams)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_aps(self) -> int:
        return len(self.mu[0]) if self.mu else 0

    @property
    def max_pred(self) -> int:
        return max(len(row) for row in self.pred)

    def max_step_increment(self) -> int:
        """Upper bound on the cost added per decoding step.

        Used to project when accumulated path costs would overrun the
        2^l_cost envelope; assumes measurements respect the RSSI range.
        """
        span = round(abs(RSSI_MIN_DBM) * self.params.measurement_scale)
        max_emission = self.n_aps * span * span
        max_trans = max(max(row) for row in self.a_cost)
        return max_emission + max(max_trans, max(self.pi_cost))

    def validate(self) -> "HmmModel":
        n = self.n_states
        if n == 0:
            raise ModelError("model has no states")
        if not (len(self.pred) == len(self.a_cost) == len(self.mu) == n):
            raise ModelError("per-state field lengths disagree")
        if len(self.pi_cost) != n:
            raise ModelError("initial cost vector length mismatch")
        d = self.n_aps
        if d == 0:
            raise ModelError("model has no access points")
        limit = self.params.max_magnitude
        mu_floor = round(RSSI_MIN_DBM * self.params.measurement_scale)
        for i, meta in enumerate(self.states):
            if meta.id != i:
                raise ModelError(f"state {i} has id {meta.id}")
        scale = self.params.cost_scale
        for i in range(n):
            preds = self.pred[i]
            if not preds:
                raise ModelError(f"state {i} has an empty predecessor list")
            if len(set(preds)) != len(preds):
                raise ModelError(f"state {i} has duplicate predecessors")
            if len(self.a_cost[i]) != len(preds):
                raise ModelError(f"state {i}: a_cost row not aligned with pred")
            for j in preds:
                if not 0 <= j < n:
                    raise ModelError(f"state {i}: predecessor {j} out of range")
            for c in self.a_cost[i]:
                if not 0 <= c < limit:
                    raise ModelError(f"state {i}: transition cost {c} out of range")
            if len(self.mu[i]) != d:
                raise ModelError(f"state {i}: mu row has wrong AP count")
            for m in self.mu[i]:
                if not mu_floor <= m <= 0:
                    raise ModelError(f"state {i}: mean RSSI {m} implausible")
            if not 0 <= self.pi_cost[i] < limit:
                raise ModelError(f"state {i}: initial cost out of range")
        # Outgoing probabilities must form a distribution: for each source j,
        # sum over rows i with j in pred(i) of exp(-cost/scale) must be 1.
        out_sums = [0.0] * n
        for i in range(n):
            for j, c in zip(self.pred[i], self.a_cost[i]):
                out_sums[j] += math.exp(-c / scale)
        for j, total in enumerate(out_sums):
            if abs(total - 1.0) > ROW_SUM_TOLERANCE + 1e-10 * n:
                raise ModelError(
                    f"state {j}: outgoing transition probabilities sum to {total}"
                )
        return self

    def to_json_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "N": self.n_states,
            "D": self.n_aps,
            "states": [
                {"id": s.id, "x": s.x, "y": s.y, "room": s.room} for s in self.states
            ],
            "pred": [list(row) for row in self.pred],
            "A_cost": [[str(c) for c in row] for row in self.a_cost],
            "mu": [[str(m) for m in row] for row in self.mu],
            "pi_cost": [str(c) for c in self.pi_cost],
            "scale_f": self.params.measurement_scale,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "HmmModel":
        try:
            if data["version"] != MODEL_FORMAT_VERSION:
                raise ModelError(f"unsupported model version {data['version']}")
            states = tuple(
                StateMeta(int(s["id"]), float(s["x"]), float(s["y"]), int(s["room"]))
                for s in data["states"]
            )
            model = cls(
                states=states,
                pred=tuple(tuple(int(j) for j in row) for row in data["pred"]),
                a_cost=tuple(
                    tuple(int(c) for c in row) for row in data["A_cost"]
                ),
                mu=tuple(tuple(int(m) for m in row) for row in data["mu"]),
                pi_cost=tuple(int(c) for c in data["pi_cost"]),
                params=FixedPointParams(measurement_scale=int(data["scale_f"])),
            )
        except ModelError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ModelError(f"malformed model document: {exc}") from exc
        if model.n_states != int(data["N"]) or model.n_aps != int(data["D"]):
            raise ModelError("declared N/D disagree with field lengths")
        return model.validate()

    def digest(self) -> bytes:
        """SHA-256 over the canonical JSON encoding (handshake commitment)."""
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


def save_model(model: HmmModel, sink: Union[str, IO[str]]) -> None:
    if isinstance(sink, str):
        with open(sink, "w", encoding="utf-8") as fh:
            json.dump(model.to_json_dict(), fh)
            fh.write("\n")
    else:
        json.dump(model.to_json_dict(), sink)


def load_model(source: Union[str, IO[str]]) -> HmmModel:
    try:
        if isinstance(source, str):
            with open(source, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        else:
            data = json.load(source)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read model: {exc}") from exc
    return HmmModel.from_json_dict(data)


def emission_cost_plain(model: HmmModel, i: int, obs: Observation) -> int:
    """Squared distance between the observation and state ``i``'s means.

    Exact integer arithmetic at cost scale; identical bit-for-bit to the
    expanded form r^2 - 2*mu*r + mu^2 used under encryption.
    """
    if len(obs.r) != model.n_aps:
        raise ModelError(
            f"observation has {len(obs.r)} APs, model expects {model.n_aps}"
        )
    mu_row = model.mu[i]
    total = 0
    for r, m in zip(obs.r, mu_row):
        diff = r - m
        total += diff * diff
    if total >= model.params.max_magnitude:
        raise EncodingRangeError(f"emission cost {total} exceeds the cost bound")
    return total


@dataclass
class DecodeResult:
    """Per-step most likely state and minimal accumulated cost.

    ``unique[t]`` records whether the step-t minimizer was unique, which is
    what decides whether the encrypted pipeline (whose tie-breaking depends
    on a hidden permutation) must agree on the state.  ``path`` is the full
    backtracked most-likely path, available from the plaintext decoder only.
    """

    states: list[int]
    costs: list[int]
    unique: list[bool]
    path: list[int]
    trellis: list[list[int]]


def viterbi_plain(model: HmmModel, observations: Sequence[Observation]) -> DecodeResult:
    """Exact integer Viterbi decoding; ties break toward the lowest state id."""
    if not observations:
        raise ModelError("empty observation sequence")
    n = model.n_states
    theta = [
        model.pi_cost[i] + emission_cost_plain(model, i, observations[0])
        for i in range(n)
    ]
    trellis = [theta]
    backptr: list[list[int]] = []
    states: list[int] = []
    costs: list[int] = []
    unique: list[bool] = []

    def record_step(row: list[int]) -> None:
        best = min(row)
        states.append(row.index(best))
        costs.append(best)
        unique.append(row.count(best) == 1)

    record_step(theta)
    for obs in observations[1:]:
        prev = theta
        theta = []
        back_row = []
        for i in range(n):
            best_cost = None
            best_j = -1
            for j, a in zip(model.pred[i], model.a_cost[i]):
                c = prev[j] + a
                if best_cost is None or c < best_cost or (c == best_cost and j < best_j):
                    best_cost = c
                    best_j = j
            theta.append(best_cost + emission_cost_plain(model, i, obs))
            back_row.append(best_j)
        trellis.append(theta)
        backptr.append(back_row)
        record_step(theta)

    path = [states[-1]]
    for back_row in reversed(backptr):
        path.append(back_row[path[-1]])
    path.reverse()
    return DecodeResult(states=states, costs=costs, unique=unique, path=path, trellis=trellis)
