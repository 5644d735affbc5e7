"""Command-line entry points.

privloc-server        serve a model over TCP
privloc-client        run a measurement trace against a server
privloc-sim           generate worlds, models, and traces
privloc-bench         run benchmark sweeps
privloc-decode-plain  plaintext oracle decoding of a trace
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from . import bench as bench_mod
from .client import (
    ClientError,
    LocalizationClient,
    load_trace_jsonl,
    save_positions_jsonl,
)
from .hmm import ModelError, load_model, viterbi_plain
from .paillier import PrivateKey, generate_keypair, load_key_file, save_key_file
from .server import DEFAULT_T_MAX, LocalizationServer, jsonl_stats_writer
from .sim import (
    FloorPlan,
    GroundTruthTrace,
    MovementParams,
    RadioParams,
    SimError,
    build_model,
    evaluate_accuracy,
    generate_trace,
    generate_world,
    observations_from_trace,
)
from .wire import DEFAULT_PORT, Transport
import socket


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def server_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="privloc-server", description="Serve encrypted localization."
    )
    parser.add_argument("--model", required=True, help="model JSON file")
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--host", default="")
    parser.add_argument("--t-max", type=int, default=DEFAULT_T_MAX)
    parser.add_argument("--log-level", default="info")
    parser.add_argument("--stats-out", help="JSONL per-step stats file")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        model = load_model(args.model)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    stats_fh = None
    stats_writer = None
    if args.stats_out:
        stats_fh = open(args.stats_out, "w", encoding="utf-8")
        stats_writer = jsonl_stats_writer(stats_fh)
    server = LocalizationServer(model, t_max=args.t_max, stats_writer=stats_writer)
    try:
        server.serve(args.host, args.port)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        pass
    finally:
        if stats_fh is not None:
            stats_fh.close()
    return 0


def _load_or_create_key(path: str, key_bits: int) -> PrivateKey:
    if os.path.exists(path):
        key = load_key_file(path)
        if not isinstance(key, PrivateKey):
            raise ClientError(f"{path} holds a public key; a private key is needed")
        return key
    key = generate_keypair(key_bits)[1]
    save_key_file(path, key)
    logging.getLogger("privloc.client").info(
        "generated a fresh %d-bit key pair at %s", key_bits, path
    )
    return key


def client_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="privloc-client", description="Localize a measurement trace."
    )
    parser.add_argument("--server", required=True, help="HOST:PORT")
    parser.add_argument("--keyfile", required=True, help="key JSON (created if absent)")
    parser.add_argument("--trace", required=True, help="JSONL trace file")
    parser.add_argument("--out", required=True, help="JSONL positions output")
    parser.add_argument("--key-bits", type=int, default=2048)
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    host, _, port_text = args.server.partition(":")
    try:
        port = int(port_text or DEFAULT_PORT)
        key = _load_or_create_key(args.keyfile, args.key_bits)
        vectors = load_trace_jsonl(args.trace)
        sock = socket.create_connection((host, port))
        client = LocalizationClient(key)
        client.connect(Transport(sock))
        records = client.run_trace(vectors)
        client.close()
        save_positions_jsonl(args.out, records)
    except (ClientError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"localized {len(records)} steps -> {args.out}")
    return 0


def sim_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="privloc-sim", description="Synthetic world tooling."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a floor plan")
    gen.add_argument("--rooms", type=int, required=True)
    gen.add_argument("--cols", type=int, required=True)
    gen.add_argument("--rows", type=int, required=True)
    gen.add_argument("--aps", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--cell-size", type=float, default=2.0)
    gen.add_argument("--wrap", action="store_true")
    gen.add_argument("--out", required=True)

    mdl = sub.add_parser("model", help="build the HMM for a plan")
    mdl.add_argument("--plan", required=True)
    mdl.add_argument("--out", required=True)
    mdl.add_argument("--p-stay", type=float, default=0.4)
    mdl.add_argument("--max-pred", type=int, default=5)
    mdl.add_argument("--p0", type=float, default=-40.0)
    mdl.add_argument("--gamma", type=float, default=3.0)
    mdl.add_argument("--wall-db", type=float, default=5.0)

    trc = sub.add_parser("trace", help="sample a movement trace")
    trc.add_argument("--plan", required=True)
    trc.add_argument("--model", required=True)
    trc.add_argument("--steps", type=int, required=True)
    trc.add_argument("--sigma", type=float, default=2.0)
    trc.add_argument("--seed", type=int, default=0)
    trc.add_argument("--out", required=True, help="client trace JSONL (t, rssi)")
    trc.add_argument("--truth-out", help="ground-truth JSONL (adds true cell)")

    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            plan = generate_world(
                args.rooms,
                args.cols,
                args.rows,
                args.aps,
                seed=args.seed,
                cell_size=args.cell_size,
                wrap=args.wrap,
            )
            plan.save(args.out)
            print(
                f"plan: {plan.cols}x{plan.rows} cells, {plan.n_rooms} rooms, "
                f"{len(plan.aps)} APs -> {args.out}"
            )
        elif args.command == "model":
            plan = FloorPlan.load(args.plan)
            model = build_model(
                plan,
                MovementParams(p_stay=args.p_stay, max_pred=args.max_pred),
                RadioParams(
                    p0_dbm=args.p0,
                    gamma=args.gamma,
                    wall_attenuation_db=args.wall_db,
                ),
            )
            from .hmm import save_model

            save_model(model, args.out)
            print(
                f"model: N={model.n_states} D={model.n_aps} "
                f"max_pred={model.max_pred} -> {args.out}"
            )
        elif args.command == "trace":
            plan = FloorPlan.load(args.plan)
            model = load_model(args.model)
            trace = generate_trace(plan, model, args.steps, args.sigma, args.seed)
            trace.save_jsonl(args.out, include_truth=False)
            if args.truth_out:
                trace.save_jsonl(args.truth_out, include_truth=True)
            print(f"trace: {args.steps} steps -> {args.out}")
    except (SimError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def bench_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="privloc-bench", description="Encrypted-pipeline benchmark sweeps."
    )
    parser.add_argument("--sweep", help="sweep JSON file (defaults + configs)")
    parser.add_argument("--out", required=True, help="report JSON output")
    parser.add_argument("--csv", help="also write a flat CSV table")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        configs = (
            bench_mod.load_sweep(args.sweep)
            if args.sweep
            else bench_mod.default_sweep()
        )
        reports = bench_mod.run_sweep(
            configs,
            progress=lambda c: print(
                f"bench: N={c.n_states} N'={c.max_pred} D={c.n_aps} "
                f"key={c.key_bits} T={c.n_steps}",
                flush=True,
            ),
        )
        bench_mod.save_sweep_reports(args.out, reports)
        if args.csv:
            bench_mod.save_sweep_csv(args.csv, reports)
    except (bench_mod.BenchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for report in reports:
        agg = report.aggregates
        print(
            f"N={report.config['n_states']:4d} N'={report.config['max_pred']:2d} "
            f"D={report.config['n_aps']:2d}: "
            f"mean {agg.get('mean_wall_ms_steady', float('nan')):8.1f} ms/step, "
            f"{agg.get('mean_bytes_per_step', 0) / 2**20:6.2f} MiB/step"
        )
    return 0


def decode_plain_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="privloc-decode-plain",
        description="Plaintext oracle decoding of a trace.",
    )
    parser.add_argument("--model", required=True)
    parser.add_argument("--trace", required=True, help="JSONL trace (t, rssi[, cell])")
    parser.add_argument("--out", help="JSONL decode output (default: stdout)")
    parser.add_argument("--plan", help="floor plan; enables accuracy summary")
    args = parser.parse_args(argv)
    try:
        model = load_model(args.model)
        trace = GroundTruthTrace.load_jsonl(args.trace)
        observations = observations_from_trace(trace, model.params)
        result = viterbi_plain(model, observations)
    except (ModelError, SimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = [
        {
            "t": trace.steps[t].t,
            "state": result.states[t],
            "room": model.states[result.states[t]].room,
            "cost": str(result.costs[t]),
            "unique": result.unique[t],
        }
        for t in range(len(trace.steps))
    ]
    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for row in rows:
            out_fh.write(json.dumps(row) + "\n")
    finally:
        if args.out:
            out_fh.close()
    if args.plan and all(s.cell >= 0 for s in trace.steps):
        plan = FloorPlan.load(args.plan)
        summary = evaluate_accuracy(result.states, trace, plan)
        print(json.dumps({"accuracy": summary}), file=sys.stderr)
    return 0
