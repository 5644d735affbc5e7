"""Synthetic indoor worlds: floor plans, radio propagation, movement traces.

Stands in for a surveyed building: a rectangular grid of cells tiled into
rooms, walls on room boundaries with one door per adjacent room pair, and
access points scattered round-robin across rooms.  Mean RSSI follows the
log-distance path-loss model with per-wall attenuation; movement is a lazy
random walk over the cell adjacency graph (never through walls).  Worlds are
deterministic functions of their seed.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .fixedpoint import FixedPointParams, RSSI_MAX_DBM, RSSI_MIN_DBM, fp_encode
from .hmm import HmmModel, Observation, PROBABILITY_FLOOR, StateMeta, neg_log_cost

# Candidate movement offsets, nearest first; a movement model with
# max_pred = k uses the first k-1 of them (plus staying put).
NEIGHBOR_OFFSETS = (
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
    (2, 0),
    (-2, 0),
    (0, 2),
    (0, -2),
)


class SimError(ValueError):
    """Degenerate world specification or inconsistent simulator inputs."""


@dataclass(frozen=True)
class RadioParams:
    """Log-distance path loss: P(d) = p0 - 10*gamma*log10(d/d0) - walls*att."""

    p0_dbm: float = -40.0
    d0_m: float = 1.0
    gamma: float = 3.0
    wall_attenuation_db: float = 5.0


@dataclass(frozen=True)
class MovementParams:
    """Lazy random walk: stay with p_stay, else uniform over neighbors."""

    p_stay: float = 0.4
    max_pred: int = 5


@dataclass
class FloorPlan:
    """Grid world: cells, room labels, wall edges, AP positions."""

    cols: int
    rows: int
    cell_size: float
    room_of: tuple[int, ...]
    walls: frozenset[tuple[int, int]]
    aps: tuple[tuple[float, float], ...]
    wrap: bool = False
    seed: int = 0

    @property
    def n_cells(self) -> int:
        return self.cols * self.rows

    @property
    def n_rooms(self) -> int:
        return max(self.room_of) + 1

    def cell_index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell_rc(self, i: int) -> tuple[int, int]:
        return divmod(i, self.cols)

    def cell_center(self, i: int) -> tuple[float, float]:
        r, c = self.cell_rc(i)
        return ((c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size)

    def is_wall(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.walls

    def neighbors(self, i: int, offsets: Sequence[tuple[int, int]]) -> list[int]:
        """Reachable neighbor cells of ``i`` under the given offset set.

        Unit moves are blocked by wall edges; longer moves additionally
        require both endpoints to share a room (no tunneling past corners).
        """
        r, c = self.cell_rc(i)
        out = []
        for dx, dy in offsets:
            c2, r2 = c + dx, r + dy
            if self.wrap:
                c2 %= self.cols
                r2 %= self.rows
            elif not (0 <= c2 < self.cols and 0 <= r2 < self.rows):
                continue
            j = self.cell_index(r2, c2)
            if j == i or j in out:
                continue
            if abs(dx) + abs(dy) == 1:
                if self.is_wall(i, j):
                    continue
            elif self.room_of[i] != self.room_of[j]:
                continue
            out.append(j)
        return out

    def to_json_dict(self) -> dict:
        return {
            "cols": self.cols,
            "rows": self.rows,
            "cell_size": self.cell_size,
            "wrap": self.wrap,
            "seed": self.seed,
            "room_of": list(self.room_of),
            "walls": sorted(list(edge) for edge in self.walls),
            "aps": [list(p) for p in self.aps],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "FloorPlan":
        try:
            return cls(
                cols=int(data["cols"]),
                rows=int(data["rows"]),
                cell_size=float(data["cell_size"]),
                room_of=tuple(int(r) for r in data["room_of"]),
                walls=frozenset((int(a), int(b)) for a, b in data["walls"]),
                aps=tuple((float(x), float(y)) for x, y in data["aps"]),
                wrap=bool(data.get("wrap", False)),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SimError(f"malformed floor plan document: {exc}") from exc

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "FloorPlan":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _split(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + 1] * rem + [base] * (parts - rem)


def _room_tiling(n_rooms: int, cols: int, rows: int) -> tuple[int, int]:
    best = None
    for rx in range(1, n_rooms + 1):
        if n_rooms % rx:
            continue
        ry = n_rooms // rx
        if rx > cols or ry > rows:
            continue
        score = abs(cols / rx - rows / ry)
        if best is None or score < best[0]:
            best = (score, rx, ry)
    if best is None:
        raise SimError(f"cannot tile {n_rooms} rooms onto a {cols}x{rows} grid")
    return best[1], best[2]


def generate_world(
    n_rooms: int,
    cols: int,
    rows: int,
    n_aps: int,
    seed: int = 0,
    cell_size: float = 2.0,
    wrap: bool = False,
) -> FloorPlan:
    """Deterministically build a floor plan for the given seed."""
    if n_rooms < 1 or cols < 1 or rows < 1 or n_aps < 1:
        raise SimError("world spec must have >= 1 room, cell, and access point")
    if wrap and n_rooms != 1:
        raise SimError("wrapped (toroidal) worlds must be single-room")
    rx, ry = _room_tiling(n_rooms, cols, rows)
    col_sizes = _split(cols, rx)
    row_sizes = _split(rows, ry)
    col_room = []
    for idx, size in enumerate(col_sizes):
        col_room += [idx] * size
    row_room = []
    for idx, size in enumerate(row_sizes):
        row_room += [idx] * size
    room_of = tuple(
        row_room[r] * rx + col_room[c] for r in range(rows) for c in range(cols)
    )

    def edge(a: int, b: int) -> tuple[int, int]:
        return (min(a, b), max(a, b))

    walls: set[tuple[int, int]] = set()
    boundary: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for r2, c2 in ((r, c + 1), (r + 1, c)):
                if r2 >= rows or c2 >= cols:
                    continue
                j = r2 * cols + c2
                if room_of[i] != room_of[j]:
                    e = edge(i, j)
                    walls.add(e)
                    pair = (
                        min(room_of[i], room_of[j]),
                        max(room_of[i], room_of[j]),
                    )
                    boundary.setdefault(pair, []).append(e)
    # One door per adjacent room pair: open the middle edge of the boundary.
    for edges in boundary.values():
        edges.sort()
        walls.discard(edges[len(edges) // 2])

    rng = random.Random(seed)
    room_bounds: dict[int, tuple[float, float, float, float]] = {}
    x0 = 0.0
    for cx, csize in enumerate(col_sizes):
        y0 = 0.0
        for cy, rsize in enumerate(row_sizes):
            room = cy * rx + cx
            room_bounds[room] = (
                x0,
                y0,
                x0 + csize * cell_size,
                y0 + rsize * cell_size,
            )
            y0 += rsize * cell_size
        x0 += csize * cell_size
    aps = []
    for d in range(n_aps):
        bx0, by0, bx1, by1 = room_bounds[d % n_rooms]
        aps.append((rng.uniform(bx0, bx1), rng.uniform(by0, by1)))

    return FloorPlan(
        cols=cols,
        rows=rows,
        cell_size=cell_size,
        room_of=room_of,
        walls=frozenset(walls),
        aps=tuple(aps),
        wrap=wrap,
        seed=seed,
    )


def count_wall_crossings(
    plan: FloorPlan, p0: tuple[float, float], p1: tuple[float, float]
) -> int:
    """Wall edges intersected by the open segment from p0 to p1."""
    if not plan.walls:
        return 0
    (x0, y0), (x1, y1) = p0, p1
    cs = plan.cell_size
    crossings = 0
    for m in range(1, plan.cols):
        gx = m * cs
        if (x0 - gx) * (x1 - gx) < 0:
            t = (gx - x0) / (x1 - x0)
            y = y0 + t * (y1 - y0)
            r = min(max(int(y // cs), 0), plan.rows - 1)
            if plan.is_wall(plan.cell_index(r, m - 1), plan.cell_index(r, m)):
                crossings += 1
    for m in range(1, plan.rows):
        gy = m * cs
        if (y0 - gy) * (y1 - gy) < 0:
            t = (gy - y0) / (y1 - y0)
            x = x0 + t * (x1 - x0)
            c = min(max(int(x // cs), 0), plan.cols - 1)
            if plan.is_wall(plan.cell_index(m - 1, c), plan.cell_index(m, c)):
                crossings += 1
    return crossings


@lru_cache(maxsize=8192)
def _cached_cost(p: float, scale: int) -> int:
    return neg_log_cost(p, scale)


def mean_rssi_dbm(
    plan: FloorPlan, cell: int, ap: tuple[float, float], radio: RadioParams
) -> float:
    """Path-loss mean RSSI of one AP at one cell center, clamped to the
    plausible dBm range."""
    cx, cy = plan.cell_center(cell)
    dist = max(radio.d0_m, math.hypot(cx - ap[0], cy - ap[1]))
    level = radio.p0_dbm - 10.0 * radio.gamma * math.log10(dist / radio.d0_m)
    level -= radio.wall_attenuation_db * count_wall_crossings(plan, (cx, cy), ap)
    return min(RSSI_MAX_DBM, max(RSSI_MIN_DBM, level))


def build_model(
    plan: FloorPlan,
    movement: Optional[MovementParams] = None,
    radio: Optional[RadioParams] = None,
    sigma_rssi: float = 2.0,
    params: Optional[FixedPointParams] = None,
) -> HmmModel:
    """Derive the localization HMM from a floor plan.

    ``sigma_rssi`` is the measurement noise the model is intended for; the
    emission model itself is the unnormalized squared distance (shared
    variance dropped), so the value only documents the operating point.
    """
    movement = movement or MovementParams()
    radio = radio or RadioParams()
    params = params or FixedPointParams()
    if not 0.0 < movement.p_stay < 1.0:
        raise SimError("p_stay must lie strictly between 0 and 1")
    if movement.max_pred < 1 or movement.max_pred - 1 > len(NEIGHBOR_OFFSETS):
        raise SimError(
            f"max_pred must be in [1, {len(NEIGHBOR_OFFSETS) + 1}]"
        )
    del sigma_rssi  # not a model parameter; see docstring
    n = plan.n_cells
    offsets = NEIGHBOR_OFFSETS[: movement.max_pred - 1]
    scale = params.cost_scale

    # Transition structure: trans[i][j] = P(j -> i).
    trans: list[dict[int, float]] = [dict() for _ in range(n)]
    for j in range(n):
        nbrs = plan.neighbors(j, offsets)
        if nbrs:
            probs = {j: movement.p_stay}
            share = (1.0 - movement.p_stay) / len(nbrs)
            for k in nbrs:
                probs[k] = share
        else:
            probs = {j: 1.0}
        floored = {k: max(p, PROBABILITY_FLOOR) for k, p in probs.items()}
        total = sum(floored.values())
        for k, p in floored.items():
            trans[k][j] = p / total

    pred = tuple(tuple(sorted(trans[i])) for i in range(n))
    a_cost = tuple(
        tuple(_cached_cost(trans[i][j], scale) for j in pred[i]) for i in range(n)
    )
    pi_cost = tuple([_cached_cost(1.0 / n, scale)] * n)

    mu = tuple(
        tuple(
            fp_encode(
                mean_rssi_dbm(plan, i, ap, radio), params.measurement_scale, params.l_cost
            )
            for ap in plan.aps
        )
        for i in range(n)
    )
    states = tuple(
        StateMeta(i, *plan.cell_center(i), room=plan.room_of[i]) for i in range(n)
    )
    return HmmModel(
        states=states,
        pred=pred,
        a_cost=a_cost,
        mu=mu,
        pi_cost=pi_cost,
        params=params,
    ).validate()


@dataclass
class TraceStep:
    t: int
    cell: int
    rssi: tuple[float, ...]


@dataclass
class GroundTruthTrace:
    """True cell sequence with the noisy measurements taken along it."""

    steps: list[TraceStep] = field(default_factory=list)

    def rssi_vectors(self) -> list[list[float]]:
        return [list(s.rssi) for s in self.steps]

    def cells(self) -> list[int]:
        return [s.cell for s in self.steps]

    def save_jsonl(self, path: str, include_truth: bool = True) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                row = {"t": s.t, "rssi": list(s.rssi)}
                if include_truth:
                    row["cell"] = s.cell
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load_jsonl(cls, path: str) -> "GroundTruthTrace":
        steps = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                steps.append(
                    TraceStep(
                        t=int(row["t"]),
                        cell=int(row.get("cell", -1)),
                        rssi=tuple(float(v) for v in row["rssi"]),
                    )
                )
        steps.sort(key=lambda s: s.t)
        return cls(steps)


def generate_trace(
    plan: FloorPlan,
    model: HmmModel,
    n_steps: int,
    sigma_rssi: float = 2.0,
    seed: int = 0,
) -> GroundTruthTrace:
    """Random walk sampled from the model's own transition distribution,
    with Gaussian measurement noise on the path-loss means."""
    if n_steps < 1:
        raise SimError("trace length must be >= 1")
    if plan.n_cells != model.n_states:
        raise SimError("floor plan and model disagree on the state count")
    n = model.n_states
    scale = model.params.cost_scale
    f = model.params.measurement_scale

    # Reconstruct outgoing distributions from the stored integer costs.
    out_edges: list[list[int]] = [[] for _ in range(n)]
    out_probs: list[list[float]] = [[] for _ in range(n)]
    for i in range(n):
        for j, cost in zip(model.pred[i], model.a_cost[i]):
            out_edges[j].append(i)
            out_probs[j].append(math.exp(-cost / scale))
    for j in range(n):
        total = sum(out_probs[j])
        out_probs[j] = [p / total for p in out_probs[j]]

    rng = np.random.default_rng(seed)
    pi_probs = np.array([math.exp(-c / scale) for c in model.pi_cost])
    pi_probs /= pi_probs.sum()
    cell = int(rng.choice(n, p=pi_probs))
    steps = []
    for t in range(n_steps):
        if t > 0:
            cell = int(
                rng.choice(out_edges[cell], p=np.asarray(out_probs[cell]))
            )
        means = np.array([m / f for m in model.mu[cell]])
        if sigma_rssi > 0:
            noisy = means + rng.normal(0.0, sigma_rssi, size=means.shape)
            rssi = np.clip(noisy, RSSI_MIN_DBM, RSSI_MAX_DBM)
        else:
            rssi = means
        steps.append(TraceStep(t=t, cell=cell, rssi=tuple(float(v) for v in rssi)))
    return GroundTruthTrace(steps)


def observations_from_trace(
    trace: GroundTruthTrace, params: Optional[FixedPointParams] = None
) -> list[Observation]:
    """The exact fixed-point observations a client would encrypt."""
    params = params or FixedPointParams()
    return [
        Observation.from_rssi(s.t, s.rssi, params) for s in trace.steps
    ]


def evaluate_accuracy(
    decoded: Sequence[int], truth: GroundTruthTrace, plan: FloorPlan
) -> dict:
    """State hit rate, room hit rate, and mean cell-center distance (m)."""
    if len(decoded) != len(truth.steps):
        raise SimError(
            f"decoded {len(decoded)} steps, ground truth has {len(truth.steps)}"
        )
    state_hits = 0
    room_hits = 0
    dist_sum = 0.0
    for est, step in zip(decoded, truth.steps):
        if est == step.cell:
            state_hits += 1
        if plan.room_of[est] == plan.room_of[step.cell]:
            room_hits += 1
        ex, ey = plan.cell_center(est)
        tx, ty = plan.cell_center(step.cell)
        dist_sum += math.hypot(ex - tx, ey - ty)
    count = len(truth.steps)
    return {
        "state_hit": state_hits / count,
        "room_hit": room_hits / count,
        "mean_cell_dist": dist_sum / count,
    }
