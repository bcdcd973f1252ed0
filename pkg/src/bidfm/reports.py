"""Merge train/serve JSON reports into one summary.

Aggregates are recomputed from raw counters (sums of examples, losses times
batch sizes, histogram buckets); pre-averaged fields in the inputs are ignored.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import FormatError, ValidationError
from .serving import LATENCY_BOUNDS, Histogram

SCHEMA_VERSION = 1


class ReportSchemaError(ValidationError):
    pass


def _schema_version(reports) -> int:
    versions = {r.get("schema_version") for r in reports}
    if len(versions) != 1:
        raise ReportSchemaError(f"conflicting schema versions {sorted(map(str, versions))}")
    (v,) = versions
    if v != SCHEMA_VERSION:
        raise ReportSchemaError(f"unsupported schema version {v}")
    return v


def _merge_train(reports) -> dict:
    losses = np.concatenate([np.asarray(r["batch_losses"], float) for r in reports])
    sizes = np.concatenate([np.asarray(r["batch_sizes"], float) for r in reports])
    examples = sum(r["examples"] for r in reports)
    wall = sum(r["wall_time_s"] for r in reports)
    wait = sum(r["input_wait_s"] for r in reports)
    holdout_n = sum(r.get("holdout_examples", 0) for r in reports)
    holdout_sum = sum((r.get("holdout_logloss") or 0.0) * r.get("holdout_examples", 0) for r in reports)
    counters = {}
    for r in reports:
        for k, v in r.get("optimizer", {}).items():
            if k.endswith("_total") or k == "steps":
                counters[k] = counters.get(k, 0) + v
    return {
        "runs": len(reports),
        "examples": examples,
        "trained_examples": int(sizes.sum()),
        "batches": len(losses),
        "progressive_logloss": float(np.average(losses, weights=sizes)) if sizes.sum() else None,
        "holdout_examples": holdout_n,
        "holdout_logloss": holdout_sum / holdout_n if holdout_n else None,
        "optimizer_counters": counters,
        "wall_time_s": wall,
        "input_wait_s": wait,
        "examples_per_s": examples / wall if wall > 0 else 0.0,
        "idle_fraction": wait / wall if wall > 0 else 0.0,
        "hardware_dependent": ["wall_time_s", "input_wait_s", "examples_per_s", "idle_fraction"],
    }


def _merge_serve(reports) -> dict:
    totals: dict[str, int] = {}
    hist = Histogram(LATENCY_BOUNDS)
    batch_sizes: dict[str, int] = {}
    for r in reports:
        m = r["metrics"]
        for k, v in m.items():
            if k.endswith("_total"):
                totals[k] = totals.get(k, 0) + int(v)
        counts = m.get("latency_counts")
        if counts is not None:
            hist.counts += np.asarray(counts, dtype=np.int64)
            hist.total += m.get("latency_sum_s", 0.0)
        for size, c in m.get("batch_size_histogram", {}).items():
            batch_sizes[size] = batch_sizes.get(size, 0) + c
    calls = totals.get("compute_calls_total", 0)
    computed = totals.get("examples_computed_total", 0)
    requests = totals.get("requests_total", 0)
    n_lat = hist.count
    return {
        "runs": len(reports),
        **totals,
        "avg_batch_size": round(computed / calls, 2) if calls else 0.0,
        "reduction_factor": round(computed / calls, 2) if calls else 0.0,
        "timeout_fraction": totals.get("timeouts_total", 0) / requests if requests else 0.0,
        "batch_size_histogram": dict(sorted(batch_sizes.items(), key=lambda kv: int(kv[0]))),
        "latency_p50_ms": hist.percentile(50) * 1e3,
        "latency_p99_ms": hist.percentile(99) * 1e3,
        "latency_mean_ms": hist.total / n_lat * 1e3 if n_lat else 0.0,
        "hardware_dependent": ["latency_p50_ms", "latency_p99_ms", "latency_mean_ms"],
    }


def merge(reports: list[dict]) -> dict:
    if not reports:
        raise ValidationError("nothing to merge")
    version = _schema_version(reports)
    if len(reports) == 1:
        return reports[0]
    by_kind: dict[str, list] = {}
    for r in reports:
        by_kind.setdefault(r.get("kind", "other"), []).append(r)
    out = {"schema_version": version, "kind": "summary", "inputs": len(reports)}
    if "train" in by_kind:
        out["train"] = _merge_train(by_kind.pop("train"))
    if "serve" in by_kind:
        out["serve"] = _merge_serve(by_kind.pop("serve"))
    for kind, items in by_kind.items():
        out[kind] = items
    return out


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and all(not isinstance(x, (dict, list)) for x in v.values()) \
                and key.endswith("histogram"):
            yield key, ",".join(f"{a}:{b}" for a, b in v.items())
        elif isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            if len(v) <= 16 and all(not isinstance(x, (dict, list)) for x in v):
                yield key, ",".join(str(x) for x in v)
            else:
                yield key, f"<{len(v)} items>"
        else:
            yield key, v


def to_text(report: dict) -> str:
    """Flat ``key=value`` lines; long lists are summarized."""
    lines = []
    for k, v in _flatten(report):
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def load_reports(paths) -> list[dict]:
    out = []
    for p in paths:
        with open(p) as fh:
            try:
                out.append(json.load(fh))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{p}: not valid JSON ({exc})") from None
    return out
