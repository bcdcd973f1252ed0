"""``bidfm`` command line: gen, train, serve-bench, strip, report, bench-decode.

Exit codes: 0 ok, 2 usage, 3 validation error, 4 format error, 5 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import reports, store
from .batchsim import ComputeCost, StallInjector, poisson_arrivals, simulate
from .bench import decode_throughput, request_examples, run_load, saturated_rate
from .config import build, int_list, read_config
from .errors import BidFMError, FormatError, ValidationError
from .model import PackedBatch, predict
from .synth import bayes_logloss, generate, stream_bytes, stream_csv
from .train import evaluate, train_stream

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4, 5


def _emit(summary: dict, json_path: str | None, to_stderr: bool = False) -> None:
    out = sys.stderr if to_stderr else sys.stdout
    out.write(reports.to_text(summary))
    if json_path:
        Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _file_config(args) -> dict | None:
    return read_config(args.config) if getattr(args, "config", None) else None


def _write_bytes(path: str, data: bytes) -> None:
    if path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        Path(path).write_bytes(data)


# -- gen --------------------------------------------------------------------

def cmd_gen(args) -> int:
    schema = build("schema", _file_config(args), field_sizes=args.fields, k_true=args.k_true, skew=args.skew)
    sample = generate(schema, args.n, seed=args.seed)
    if args.format == "binary":
        data = stream_bytes(sample)
    else:
        data = stream_csv(sample).encode()
    _write_bytes(args.out, data)
    summary = {
        "kind": "gen",
        "schema_version": reports.SCHEMA_VERSION,
        "examples": len(sample),
        "bytes": len(data),
        "format": args.format,
        "seed": args.seed,
        "field_sizes": list(schema.field_sizes),
        "positive_rate": float(sample.labels.mean()) if len(sample) else 0.0,
        "bayes_logloss_sample": sample.bayes_logloss,
        "bayes_logloss_mc": bayes_logloss(schema, args.seed),
    }
    _emit(summary, args.report, to_stderr=args.out == "-")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    params = state = None
    fc = _file_config(args) or {}
    if args.resume:
        params, state = store.load_for_training(Path(args.resume).read_bytes())
        # the artifact fixes the shapes and optimizer kind; flags may still override them
        fc.setdefault("train", {}).update(
            arch=params.arch.value, field_sizes=tuple(np.diff(params.field_offsets)), k=params.k,
            hidden=tuple(l.weight.shape[1] for l in params.mlp[:-1]), optimizer=state.kind.value,
        )
    cfg = build(
        "train", fc, arch=args.arch, field_sizes=args.fields, k=args.k, hidden=args.hidden,
        optimizer=args.optimizer, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        holdout_fraction=args.holdout, window_batches=args.window_batches,
    )
    source = sys.stdin.buffer if args.input == "-" else args.input
    params, state, report = train_stream(source, cfg, params, state)
    data = store.save(params, state, include_optimizer=not args.no_optimizer_state)
    Path(args.out).write_bytes(data)
    summary = report.to_dict()
    summary["artifact"] = {"path": args.out, "bytes": len(data)}
    if args.eval:
        loss, n = evaluate(args.eval, params)
        summary["eval_logloss"], summary["eval_examples"] = loss, n
    _emit(summary, args.report)
    return EXIT_OK


# -- serve-bench ------------------------------------------------------------

def cmd_serve_bench(args) -> int:
    params, _ = store.load(Path(args.model).read_bytes())
    fc = _file_config(args)
    ms = lambda v: None if v is None else v / 1e3
    config = build("batcher", fc, max_batch=args.max_batch, flush_interval=ms(args.flush_ms),
                   n_batcher_threads=args.threads, request_timeout=ms(args.timeout_ms))
    rate = saturated_rate(config) if args.saturate else args.rate
    profile = build("load", fc, rate=rate, duration=args.duration, arrival=args.arrival,
                    seed=args.seed, deadline=ms(args.deadline_ms))
    stall = StallInjector(args.stall_rate, args.stall_ms / 1e3) if args.stall_rate else None
    if args.simulate:
        exs = request_examples(params, config.max_batch, profile.seed)
        cost = ComputeCost.calibrate(lambda b: predict(b, params),
                                     lambda n: PackedBatch.from_examples(exs[:n]),
                                     sizes=sorted({1, max(1, config.max_batch // 2), config.max_batch}))
        arrivals = (poisson_arrivals(profile.rate, args.simulate, profile.seed)
                    if profile.arrival == "poisson" else np.arange(args.simulate) / profile.rate)
        res = simulate(arrivals, config, cost, stall=stall, deadline=profile.deadline)
        summary = {
            "kind": "serve-sim",
            "schema_version": reports.SCHEMA_VERSION,
            "batcher": asdict(config),
            "profile": asdict(profile),
            "cost_model": asdict(cost),
            **res.summary(),
            "reduction_factor": round(res.avg_batch_size, 2),
            "hardware_dependent": ["cost_model", "latency_p50_ms", "latency_p99_ms"],
        }
    else:
        result = run_load(params, profile, config, verify=args.verify, stall=stall)
        summary = result.to_dict()
    _emit(summary, args.json)
    return EXIT_OK


# -- strip ------------------------------------------------------------------

def cmd_strip(args) -> int:
    data = Path(args.input).read_bytes()
    before = store.section_sizes(data)
    out = store.strip(data)
    after = store.section_sizes(out)
    Path(args.output).write_bytes(out)
    summary = {
        "kind": "strip",
        "schema_version": reports.SCHEMA_VERSION,
        "already_stripped": not before["has_optimizer"],
        "before_total": before["total"],
        "after_total": after["total"],
        "before_payload": before["payload"],
        "after_payload": after["payload"],
        "optimizer_moments": before["optimizer_moments"],
        "optimizer_counters": before["optimizer_counters"],
        "payload_ratio": after["payload"] / before["payload"],
        "payload_reduction": 1 - after["payload"] / before["payload"],
        "total_ratio": after["total"] / before["total"],
    }
    if summary["already_stripped"]:
        print("notice: input has no optimizer state; written unchanged", file=sys.stderr)
    _emit(summary, args.json)
    return EXIT_OK


# -- report / bench-decode --------------------------------------------------

def cmd_report(args) -> int:
    merged = reports.merge(reports.load_reports(args.paths))
    _emit(merged, args.json)
    return EXIT_OK


def cmd_bench_decode(args) -> int:
    summary = {"kind": "decode", "schema_version": reports.SCHEMA_VERSION,
               **decode_throughput(args.n, args.seed)}
    _emit(summary, args.json)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bidfm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthetic labelled stream with a planted FM")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("binary", "csv"), default="binary")
    g.add_argument("--out", default="-")
    g.add_argument("--config")
    g.add_argument("--fields", type=int_list, help="comma-separated field cardinalities")
    g.add_argument("--k-true", type=int)
    g.add_argument("--skew", type=float)
    g.add_argument("--report", help="also write the summary as JSON")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train from a binary stream and write a .zmdl artifact")
    t.add_argument("input", help="stream path or - for stdin")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--arch", choices=("fm", "deepfm"))
    t.add_argument("--fields", type=int_list)
    t.add_argument("--k", type=int)
    t.add_argument("--hidden", type=int_list)
    t.add_argument("--optimizer", choices=("adam", "lazy-adam", "lazy_adam", "adagrad"))
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--holdout", type=float)
    t.add_argument("--window-batches", type=int)
    t.add_argument("--resume", help="artifact with optimizer state to continue from")
    t.add_argument("--no-optimizer-state", action="store_true", help="save without optimizer state")
    t.add_argument("--eval", help="labelled stream scored after training")
    t.add_argument("--report", help="write TrainReport JSON here")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("serve-bench", help="drive the autobatcher with synthetic load")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--rate", type=float)
    s.add_argument("--saturate", action="store_true", help="rate = 20 x max_batch / flush_interval")
    s.add_argument("--duration", type=float)
    s.add_argument("--arrival", choices=("constant", "poisson"))
    s.add_argument("--seed", type=int)
    s.add_argument("--deadline-ms", type=float)
    s.add_argument("--max-batch", type=int)
    s.add_argument("--flush-ms", type=float)
    s.add_argument("--threads", type=int)
    s.add_argument("--timeout-ms", type=float)
    s.add_argument("--verify", action="store_true", help="compare every answer with a direct predict")
    s.add_argument("--simulate", type=int, metavar="N", help="discrete-event run over N arrivals instead")
    s.add_argument("--stall-rate", type=float, default=0.0, help="fraction of flushes stalled")
    s.add_argument("--stall-ms", type=float, default=5.0)
    s.add_argument("--json")
    s.set_defaults(fn=cmd_serve_bench)

    st = sub.add_parser("strip", help="drop optimizer state from an artifact")
    st.add_argument("input")
    st.add_argument("output")
    st.add_argument("--json")
    st.set_defaults(fn=cmd_strip)

    r = sub.add_parser("report", help="merge JSON reports")
    r.add_argument("paths", nargs="+")
    r.add_argument("--json")
    r.set_defaults(fn=cmd_report)

    d = sub.add_parser("bench-decode", help="binary vs CSV decode throughput")
    d.add_argument("--n", type=int, default=100_000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--json")
    d.set_defaults(fn=cmd_bench_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BidFMError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
