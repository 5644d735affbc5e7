"""End-to-end benchmark harness for the encrypted localization pipeline.

Each run builds a synthetic world at the requested operating point
(state count, predecessor count, AP count), spins the server up on an
in-process socket pair with injected symmetric link latency, drives a client
trace through the full encrypted protocol, and records per-step wall time,
exact transcript bytes, round trips, and comparison counts.  Every run also
re-decodes the trace with the plaintext decoder and verifies the encrypted
pipeline against it bit-exactly (costs always; positions whenever the
minimizer is unique).

Reports are machine-readable JSON; stored aggregates are recomputed from the
raw rows on load and must match.
"""

from __future__ import annotations

import json
import math
import platform
import random
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import gmpy2

from .client import LocalizationClient
from .hmm import viterbi_plain
from .paillier import generate_keypair
from .server import LocalizationServer
from .sim import (
    GroundTruthTrace,
    MovementParams,
    build_model,
    evaluate_accuracy,
    generate_trace,
    generate_world,
    observations_from_trace,
)
from .wire import Transport

DEFAULT_LATENCY_MS = 1.0
DEFAULT_STEP_TIMEOUT_S = 120.0


class BenchError(RuntimeError):
    """Benchmark run or report-integrity failure."""


@dataclass
class BenchConfig:
    """One benchmark operating point."""

    n_states: int
    max_pred: int = 5
    n_aps: int = 20
    n_steps: int = 4
    key_bits: int = 2048
    latency_ms: float = DEFAULT_LATENCY_MS
    sigma_rssi: float = 2.0
    seed: int = 0
    timeout_s: float = DEFAULT_STEP_TIMEOUT_S
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise BenchError(f"unknown benchmark config keys: {sorted(unknown)}")
        return cls(**data)


def grid_dims(n_states: int) -> tuple[int, int]:
    """Near-square cols x rows factorization of the state count."""
    if n_states < 1:
        raise BenchError("state count must be >= 1")
    for r in range(int(math.isqrt(n_states)), 0, -1):
        if n_states % r == 0:
            return n_states // r, r
    raise BenchError("unreachable")


def compute_aggregates(rows: Sequence[dict]) -> dict:
    """Derived summary of the per-step rows (recomputable on load)."""
    complete = [r for r in rows if not r.get("timed_out")]
    if not complete:
        return {"steps": 0}
    steady = [r for r in complete if r["t"] > 0] or complete

    def mean(key: str, rs: Sequence[dict]) -> float:
        return sum(r[key] for r in rs) / len(rs)

    return {
        "steps": len(complete),
        "mean_wall_ms": mean("wall_ms", complete),
        "mean_wall_ms_steady": mean("wall_ms", steady),
        "max_wall_ms": max(r["wall_ms"] for r in complete),
        "mean_bytes_per_step": mean("bytes_total", complete),
        "max_bytes_per_step": max(r["bytes_total"] for r in complete),
        "mean_round_trips_steady": mean("round_trips", steady),
        "total_cmp_ops": sum(r["cmp_ops"] for r in complete),
    }


@dataclass
class BenchReport:
    """Raw per-step rows plus derived aggregates for one configuration."""

    config: dict
    rows: list[dict]
    aggregates: dict
    accuracy: dict
    oracle: dict
    env: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": self.rows,
            "aggregates": self.aggregates,
            "accuracy": self.accuracy,
            "oracle": self.oracle,
            "env": self.env,
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, data: dict) -> "BenchReport":
        report = cls(
            config=data["config"],
            rows=data["rows"],
            aggregates=data["aggregates"],
            accuracy=data["accuracy"],
            oracle=data["oracle"],
            env=data.get("env", {}),
        )
        recomputed = compute_aggregates(report.rows)
        for key, value in recomputed.items():
            stored = report.aggregates.get(key)
            ok = (
                stored == value
                if isinstance(value, int)
                else isinstance(stored, (int, float))
                and math.isclose(stored, value, rel_tol=1e-9, abs_tol=1e-9)
            )
            if not ok:
                raise BenchError(
                    f"stored aggregate {key}={stored} disagrees with rows ({value})"
                )
        return report

    @classmethod
    def load(cls, path: str) -> "BenchReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def csv_rows(self) -> list[dict]:
        base = {f"cfg_{k}": v for k, v in self.config.items()}
        return [{**base, **row} for row in self.rows]


def _env_info() -> dict:
    return {
        "python": platform.python_version(),
        "gmpy2": gmpy2.version(),
        "machine": platform.machine(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def bench(config: BenchConfig) -> BenchReport:
    """Run the full encrypted pipeline at one operating point."""
    cols, rows_n = grid_dims(config.n_states)
    plan = generate_world(
        1, cols, rows_n, config.n_aps, seed=config.seed, wrap=True
    )
    model = build_model(
        plan,
        MovementParams(max_pred=config.max_pred),
        sigma_rssi=config.sigma_rssi,
    )
    truth = generate_trace(
        plan, model, config.n_steps, config.sigma_rssi, seed=config.seed + 1
    )
    pk, sk = generate_keypair(config.key_bits, rng=random.Random(config.seed + 2))

    server_sock, client_sock = socket.socketpair()
    latency_s = config.latency_ms / 1e3
    server = LocalizationServer(
        model,
        rng=random.Random(config.seed + 3),
        capture_min_costs=True,
    )
    server_transport = Transport(server_sock, latency_s=latency_s)
    finished_sessions = []
    thread = threading.Thread(
        target=lambda: finished_sessions.append(
            server.handle_transport(server_transport)
        ),
        daemon=True,
    )
    thread.start()

    client_sock.settimeout(config.timeout_s)
    client = LocalizationClient(sk, model.params, rng=random.Random(config.seed + 4))
    client_transport = Transport(client_sock, latency_s=latency_s)

    rows: list[dict] = []
    timed_out_at: Optional[int] = None
    try:
        client.connect(client_transport)
        for step in truth.steps:
            try:
                client.localize(step.rssi)
            except TimeoutError:
                timed_out_at = step.t
                rows.append({"t": step.t, "timed_out": True})
                break
            s = client.step_rows[-1]
            rows.append(
                {
                    "t": s.t,
                    "wall_ms": s.wall_ms,
                    "bytes_up": s.bytes_up,
                    "bytes_down": s.bytes_down,
                    "bytes_total": s.bytes_up + s.bytes_down,
                    "round_trips": s.round_trips,
                    "cmp_ops": s.cmp_ops,
                }
            )
    finally:
        client.close()
        thread.join(timeout=10.0)
        server_transport.close()

    decoded = [rec.state for rec in client.positions]
    steps_done = len(decoded)

    # Plaintext oracle over the identical fixed-point observations.
    observations = observations_from_trace(truth, model.params)
    oracle = viterbi_plain(model, observations[: max(steps_done, 1)])
    session = finished_sessions[0] if finished_sessions else None
    costs_exact = None
    if session is not None and session.captured_min_costs:
        costs_exact = all(
            sk.decrypt(ct) == oracle.costs[t]
            for t, ct in session.captured_min_costs[:steps_done]
        )
    unique_steps = [t for t in range(steps_done) if oracle.unique[t]]
    positions_match = all(decoded[t] == oracle.states[t] for t in unique_steps)

    accuracy = (
        evaluate_accuracy(
            decoded, GroundTruthTrace(truth.steps[:steps_done]), plan
        )
        if steps_done
        else {}
    )
    report = BenchReport(
        config=config.to_dict(),
        rows=rows,
        aggregates=compute_aggregates(rows),
        accuracy=accuracy,
        oracle={
            "steps_verified": steps_done,
            "costs_exact": costs_exact,
            "positions_match_on_unique": positions_match,
            "tie_steps": steps_done - len(unique_steps),
            "timed_out_at": timed_out_at,
        },
        env=_env_info(),
    )
    return report


def default_sweep() -> list[BenchConfig]:
    """One-factor-at-a-time sweep around the 160-state operating point."""
    configs = [BenchConfig(n_states=160, label="base-160")]
    for n in (40, 80, 320):
        configs.append(BenchConfig(n_states=n, label=f"n-{n}"))
    for n_pred in (3, 8):
        configs.append(BenchConfig(n_states=160, max_pred=n_pred, label=f"pred-{n_pred}"))
    for d in (10, 40):
        configs.append(BenchConfig(n_states=160, n_aps=d, label=f"aps-{d}"))
    return configs


def load_sweep(path: str) -> list[BenchConfig]:
    """Sweep file: ``{"defaults": {...}, "configs": [{...}, ...]}``."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or "configs" not in data:
        raise BenchError("sweep file must be an object with a 'configs' list")
    defaults = data.get("defaults", {})
    configs = []
    for entry in data["configs"]:
        merged = {**defaults, **entry}
        configs.append(BenchConfig.from_dict(merged))
    return configs


def run_sweep(
    configs: Sequence[BenchConfig], progress=None
) -> list[BenchReport]:
    reports = []
    for config in configs:
        if progress is not None:
            progress(config)
        reports.append(bench(config))
    return reports


def save_sweep_reports(path: str, reports: Sequence[BenchReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"reports": [r.to_json_dict() for r in reports]}, fh, indent=2)
        fh.write("\n")


def save_sweep_csv(path: str, reports: Sequence[BenchReport]) -> None:
    rows = [row for report in reports for row in report.csv_rows()]
    if not rows:
        raise BenchError("no rows to write")
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(col, "")) for col in columns) + "\n")
