"""Command-line front end: trace generation, simulation runs and sweeps,
and a built-in scenario checker.

Exit codes: 0 success, 2 argument error, 3 trace parse failure, 4 fatal
authentication failure during a run.  Set SPECPIPE_LOG to a level name
(e.g. DEBUG) for verbose logging.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .channel import AuthError, Direction, new_channel
from .engine import CopyRequest, Engine, EngineConfig
from .memory import HostMemory, prng_fill, ModelLayer
from .predictor import Prediction, SwapHistory, TransferClass, predict_next
from .simulator import Metrics, SimConfig, SystemKind, run_detailed
from .validator import RecordState
from .workload import (
    TraceFormatError,
    gen_adversarial_trace,
    gen_kvswap_trace,
    gen_offload_trace,
    load_trace,
    save_trace,
)

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "schema_version", "config_hash", "trace", "system", "workers", "window",
    "leeway", "seed", "throughput_bytes_per_s", "normalized_latency_s",
    "hit_rate", "nop_count", "relinquish_count", "gpu_idle_fraction",
]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRACE = 3
EXIT_AUTH = 4


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def _config_hash(fields: dict) -> str:
    blob = json.dumps(fields, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- gen ---------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    if args.workload == "offload":
        trace = gen_offload_trace(
            layers=args.layers,
            offload_set=[int(x) for x in args.offload.split(",") if x],
            iterations=args.iters,
            layer_bytes=args.layer_bytes,
            compute_per_layer=args.compute_ns,
            seed=args.seed,
        )
    elif args.workload == "kvswap":
        trace = gen_kvswap_trace(
            requests=args.requests,
            policy=args.policy,
            kv_block_bytes=args.kv_block_bytes,
            request_rate=args.rate,
            parallel_size=args.parallel,
            small_io_size=args.small_io_size,
            seed=args.seed,
        )
    else:  # adversarial
        try:
            base = load_trace(args.base)
        except TraceFormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_TRACE
        trace = gen_adversarial_trace(base, args.rate, seed=args.seed)
    out = save_trace(trace, args.out)
    print(f"wrote {out} ({len(trace.events)} events)")
    return EXIT_OK


# -- sim ---------------------------------------------------------------------


def _parse_sweep(specs: list[str]) -> list[dict]:
    """Expand ``key=a..b`` / ``key=v1,v2`` specs into a cartesian grid."""
    axes: list[tuple[str, list[int]]] = []
    for spec in specs:
        key, _, rhs = spec.partition("=")
        if not rhs:
            raise ValueError(f"bad sweep spec {spec!r}")
        if ".." in rhs:
            lo, hi = rhs.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in rhs.split(",")]
        axes.append((key, values))
    grid: list[dict] = [{}]
    for key, values in axes:
        grid = [dict(pt, **{key: v}) for pt in grid for v in values]
    return grid


def cmd_sim(args: argparse.Namespace) -> int:
    systems = []
    for name in args.systems.split(","):
        try:
            systems.append(SystemKind(name.strip()))
        except ValueError:
            print(f"error: unknown system {name!r}", file=sys.stderr)
            return EXIT_USAGE
    try:
        grid = _parse_sweep(args.sweep or [])
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    rows = []
    event_log: list[dict] = []
    for trace_path in args.trace:
        try:
            trace = load_trace(trace_path)
        except TraceFormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_TRACE
        for point in grid:
            for system in systems:
                cfg = SimConfig(
                    system=system,
                    workers=point.get("workers", args.workers),
                    window=point.get("window", args.window),
                    leeway=point.get("leeway", args.leeway),
                    depth=point.get("depth", args.depth),
                    seed=point.get("seed", args.seed),
                    record_events=args.event_log is not None,
                )
                try:
                    result = run_detailed(trace, cfg)
                except AuthError as exc:
                    print(f"error: channel authentication failure: {exc}", file=sys.stderr)
                    return EXIT_AUTH
                rows.append(_metrics_row(trace_path, cfg, result.metrics))
                event_log.extend(result.events)

    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    finally:
        if out is not sys.stdout:
            out.close()
            print(f"wrote {args.out} ({len(rows)} rows)")
    if args.event_log:
        with open(args.event_log, "w") as fh:
            for entry in event_log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        print(f"wrote {args.event_log} ({len(event_log)} events)")
    return EXIT_OK


def _metrics_row(trace_path: str, cfg: SimConfig, m: Metrics) -> dict:
    cfg_fields = {
        "system": cfg.system.value, "workers": cfg.workers, "window": cfg.window,
        "leeway": cfg.leeway, "depth": cfg.depth, "seed": cfg.seed,
        "trace": str(trace_path),
    }
    return {
        "schema_version": CSV_SCHEMA_VERSION,
        "config_hash": _config_hash(cfg_fields),
        "trace": str(trace_path),
        "system": m.system,
        "workers": cfg.workers,
        "window": cfg.window,
        "leeway": cfg.leeway,
        "seed": cfg.seed,
        "throughput_bytes_per_s": m.throughput_bytes_per_s,
        "normalized_latency_s": m.normalized_latency_s,
        "hit_rate": m.hit_rate,
        "nop_count": m.nop_count,
        "relinquish_count": m.relinquish_count,
        "gpu_idle_fraction": m.gpu_idle_fraction,
    }


# -- verify ---------------------------------------------------------------------


def _scenario_counter_bookkeeping() -> tuple[bool, str]:
    cpu, gpu = new_channel(seed=1, initial_iv_h2d=1, initial_iv_d2h=5)
    for payload in (b"a", b"b"):
        cpu.send(cpu.encrypt_next(payload))
        gpu.recv()
    for payload in (b"c", b"d"):
        gpu.send(gpu.encrypt_next(payload))
        cpu.recv()
    ok = cpu.send_iv == 3 and gpu.send_iv == 7
    return ok, f"cpu send counter {cpu.send_iv} (want 3), gpu send counter {gpu.send_iv} (want 7)"


def _scenario_repetitive_prediction() -> tuple[bool, str]:
    history = SwapHistory()
    for b in (1, 3, 4):
        history.observe_swap_out(b)
    for b in (1, 3, 4, 1):
        history.observe_swap_in([b])
        history.observe_swap_out(b)
    preds = predict_next(history, history.outstanding, current_iv=10, leeway=0, depth=1)
    ok = [p.block for p in preds] == [3]
    return ok, f"predicted {[p.block for p in preds]} (want [3])"


def _scenario_lifo_prediction() -> tuple[bool, str]:
    history = SwapHistory()
    for r in (1, 2, 3):
        history.observe_swap_out(r)
    history.observe_swap_in([3])
    history.observe_swap_out(3)
    history.observe_swap_in([3])
    preds = predict_next(history, history.outstanding, current_iv=0, leeway=0, depth=3)
    ok = [p.block for p in preds] == [2, 1]
    return ok, f"predicted {[p.block for p in preds]} (want [2, 1])"


class _ScriptedPredictor:
    """Fixed prediction schedule for scenario construction."""

    def __init__(self, batches: list[list[Prediction]], outstanding: set[int]) -> None:
        self._batches = batches
        self.outstanding = frozenset(outstanding)

    def predict_batches(self, current_iv: int, leeway: int, depth: int = 1):
        batches, self._batches = self._batches, []
        return batches

    def observe_swap_out(self, block: int) -> None:
        pass

    def observe_swap_in(self, blocks) -> None:
        pass

    def observe_sync(self) -> None:
        pass


def _scenario_nop_padding() -> tuple[bool, str]:
    memory = HostMemory()
    cpu, gpu = new_channel(seed=2, initial_iv_h2d=1)
    blocks = {
        name: memory.alloc(ModelLayer(i), 4096, prng_fill(i))
        for i, name in enumerate(("data1", "data2", "data3"), start=1)
    }
    schedule = [
        [Prediction(blocks["data1"].id, 1, 0)],
        [Prediction(blocks["data2"].id, 2, 0)],
        [Prediction(blocks["data3"].id, 3, 0)],
    ]
    predictor = _ScriptedPredictor(schedule, {b.id for b in blocks.values()})
    engine = Engine(memory, cpu, gpu, predictor, EngineConfig(speculate=True, leeway=0))
    engine.speculate_tick()

    def request(b):
        return CopyRequest("h2d", b.base, b.len, TransferClass.MODEL_WEIGHTS, block_id=b.id)

    engine.copy_h2d(request(blocks["data3"]))
    engine.copy_h2d(request(blocks["data1"]))
    engine.sync()
    log = cpu.channel.sent_log(Direction.HOST_TO_DEVICE)
    shape = [("nop" if nop else "data") for _, nop, _ in log]
    data2_rec = next(
        r for r in engine.validator.records.values()
        if r.block_id == blocks["data2"].id
    )
    ok = shape == ["data", "nop", "data"] and data2_rec.state is RecordState.INVALIDATED
    return ok, f"message sequence {shape} (want [data, nop, data]); data2 {data2_rec.state.value}"


def _scenario_replay_rejection() -> tuple[bool, str]:
    # duplicated, reordered, and corrupted messages must all fail to
    # authenticate; this scenario passes when every injection raises
    cpu, gpu = new_channel(seed=3, test_hooks=True)
    chan = cpu.channel
    failures = []

    msg = cpu.encrypt_next(b"payload-0")
    cpu.send(msg)
    gpu.recv()
    chan.hook_resend_raw(Direction.HOST_TO_DEVICE, msg)  # replay without advance
    try:
        gpu.recv()
        failures.append("replayed message was accepted")
    except AuthError:
        pass

    cpu2, gpu2 = new_channel(seed=4, test_hooks=True)
    cpu2.send(cpu2.encrypt_next(b"first"))
    cpu2.send(cpu2.encrypt_next(b"second"))
    cpu2.channel.hook_swap_in_flight(Direction.HOST_TO_DEVICE, 0, 1)
    try:
        gpu2.recv()
        failures.append("reordered message was accepted")
    except AuthError:
        pass

    cpu3, gpu3 = new_channel(seed=5, test_hooks=True)
    cpu3.send(cpu3.encrypt_next(b"bits"))
    cpu3.channel.hook_corrupt_in_flight(Direction.HOST_TO_DEVICE, 0, byte_index=0, bit=3)
    try:
        gpu3.recv()
        failures.append("corrupted message was accepted")
    except AuthError:
        pass

    return (not failures, "; ".join(failures) or "all injections rejected")


SCENARIOS = {
    "counters": _scenario_counter_bookkeeping,
    "repetitive": _scenario_repetitive_prediction,
    "lifo": _scenario_lifo_prediction,
    "nop-padding": _scenario_nop_padding,
    "replay-rejection": _scenario_replay_rejection,
}


def cmd_verify(args: argparse.Namespace) -> int:
    names = [args.scenario] if args.scenario else list(SCENARIOS)
    unknown = [n for n in names if n not in SCENARIOS]
    if unknown:
        print(f"error: unknown scenario {unknown}", file=sys.stderr)
        return EXIT_USAGE
    all_ok = True
    for name in names:
        ok, detail = SCENARIOS[name]()
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<20} {detail}")
    return EXIT_OK if all_ok else 1


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specpipe",
        description="Speculative pipelined encryption: trace generation, simulation, checks.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a workload trace")
    gen_sub = gen.add_subparsers(dest="workload", required=True)
    offload = gen_sub.add_parser("offload", help="layer-by-layer model offloading")
    offload.add_argument("--layers", type=int, required=True)
    offload.add_argument("--offload", required=True, help="comma-separated layer indices")
    offload.add_argument("--iters", type=int, required=True)
    offload.add_argument("--layer-bytes", type=int, default=4 * 1024 * 1024)
    offload.add_argument("--compute-ns", type=int, default=200_000)
    offload.add_argument("--seed", type=int, default=0)
    offload.add_argument("--out", default="offload.trace.jsonl")
    kvswap = gen_sub.add_parser("kvswap", help="KV-cache swapping with token transfers")
    kvswap.add_argument("--requests", type=int, required=True)
    kvswap.add_argument("--policy", choices=["lifo", "fifo"], required=True)
    kvswap.add_argument("--kv-block-bytes", type=int, default=1024 * 1024)
    kvswap.add_argument("--rate", type=float, default=100.0)
    kvswap.add_argument("--parallel", type=int, default=2)
    kvswap.add_argument("--small-io-size", type=int, default=2048)
    kvswap.add_argument("--seed", type=int, default=0)
    kvswap.add_argument("--out", default="kvswap.trace.jsonl")
    adv = gen_sub.add_parser("adversarial", help="mutate a base trace against prediction")
    adv.add_argument("--base", required=True)
    adv.add_argument("--rate", type=float, required=True)
    adv.add_argument("--seed", type=int, default=0)
    adv.add_argument("--out", default="adversarial.trace.jsonl")

    sim = sub.add_parser("sim", help="replay traces and emit metrics CSV")
    sim.add_argument("--trace", action="append", required=True)
    sim.add_argument("--systems", default="nocc,synccc,specpipe")
    sim.add_argument("--workers", type=int, default=2)
    sim.add_argument("--window", type=int, default=64)
    sim.add_argument("--leeway", type=int, default=8)
    sim.add_argument("--depth", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--sweep", action="append", help="key=lo..hi or key=v1,v2")
    sim.add_argument("--out", default=None, help="metrics CSV path (default stdout)")
    sim.add_argument("--event-log", default=None, help="per-event JSONL path")

    verify = sub.add_parser("verify", help="run the built-in scenario suite")
    verify.add_argument("--scenario", default=None, help=f"one of {', '.join(SCENARIOS)}")
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SPECPIPE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen":
        return cmd_gen(args)
    if args.command == "sim":
        return cmd_sim(args)
    if args.command == "verify":
        return cmd_verify(args)
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
