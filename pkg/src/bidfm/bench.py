"""Open-loop load generation for the autobatcher, plus decode benchmarks."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .ingest import decode_bytes, decode_csv, encode_csv, encode_stream
from .model import Arch, ModelParams, PackedBatch, SparseExample, predict
from .serving import AutoBatcher, BatcherConfig, Outcome, ServeMetrics

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LoadProfile:
    rate: float = 5000.0  # requests per second
    duration: float = 1.0  # seconds
    arrival: str = "constant"  # or "poisson"
    seed: int = 0
    deadline: float | None = None  # per-request budget, None = engine default
    max_duration: float = 60.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValidationError("rate must be positive")
        if not 0 < self.duration <= self.max_duration:
            raise ValidationError(f"duration must be in (0, {self.max_duration}] seconds")
        if self.arrival not in ("constant", "poisson"):
            raise ValidationError(f"unknown arrival process {self.arrival!r}")

    @property
    def n_requests(self) -> int:
        return max(1, int(round(self.rate * self.duration)))

    def arrival_times(self) -> np.ndarray:
        """Offsets in seconds from the start of the run, sorted."""
        n = self.n_requests
        if self.arrival == "constant":
            return np.arange(n) / self.rate
        rng = np.random.default_rng([self.seed, 0xA221])
        return np.cumsum(rng.exponential(1.0 / self.rate, n)) - 1.0 / self.rate


def saturated_rate(config: BatcherConfig, factor: float = 20.0) -> float:
    """Arrival rate delivering ``factor`` full batches' worth of requests per flush interval."""
    return factor * config.max_batch / config.flush_interval


def request_examples(params: ModelParams, n: int, seed: int = 0, max_active: int = 6) -> list[SparseExample]:
    """Random unlabelled requests valid for ``params``."""
    rng = np.random.default_rng(seed)
    if params.arch is Arch.DEEPFM:
        fo = params.field_offsets
        ids = np.stack([rng.integers(fo[f], fo[f + 1], n) for f in range(len(fo) - 1)], axis=1)
        vals = rng.uniform(0.5, 1.5, ids.shape)
        return [SparseExample(ids[i], vals[i]) for i in range(n)]
    out = []
    m = min(max_active, params.n_features)
    for _ in range(n):
        a = int(rng.integers(1, m + 1))
        out.append(SparseExample(np.sort(rng.choice(params.n_features, a, replace=False)), rng.uniform(0.5, 1.5, a)))
    return out


@dataclass
class LoadResult:
    profile: LoadProfile
    config: BatcherConfig
    metrics: ServeMetrics
    offered: int
    wall_time_s: float
    send_time_s: float
    latencies: np.ndarray  # seconds, all resolved tickets
    outcomes: dict
    mismatches: int | None = None  # vs direct predict, when verified

    @property
    def reduction_factor(self) -> float:
        m = self.metrics
        return m.examples_computed_total / m.compute_calls_total if m.compute_calls_total else 0.0

    @property
    def achieved_rate(self) -> float:
        return self.offered / self.send_time_s if self.send_time_s > 0 else 0.0

    def to_dict(self) -> dict:
        lat = self.latencies
        pct = {f"latency_p{q}_ms": float(np.percentile(lat, q) * 1e3) if len(lat) else 0.0
               for q in (50, 90, 99, 99.9)}
        return {
            "kind": "serve",
            "schema_version": SCHEMA_VERSION,
            "profile": asdict(self.profile),
            "batcher": asdict(self.config),
            "offered": self.offered,
            "outcomes": self.outcomes,
            "reduction_factor": round(self.reduction_factor, 2),
            "baseline_compute_calls": self.metrics.examples_computed_total,
            "mismatches": self.mismatches,
            "metrics": self.metrics.to_dict(),
            "achieved_rate": self.achieved_rate,
            "wall_time_s": self.wall_time_s,
            "mean_latency_ms": float(lat.mean() * 1e3) if len(lat) else 0.0,
            **pct,
            "hardware_dependent": ["achieved_rate", "wall_time_s", "mean_latency_ms", *pct,
                                   "metrics.latency_*", "metrics.max_queue_wait_ms"],
        }


def _send(engine: AutoBatcher, examples, times: np.ndarray, deadline):
    """Enqueue ``examples[i]`` at ``start + times[i]`` (open loop, catching up if late)."""
    n = len(times)
    tickets = [None] * n
    start = time.perf_counter()
    i = 0
    n_ex = len(examples)
    while i < n:
        now = time.perf_counter() - start
        j = int(np.searchsorted(times, now, side="right"))
        if j > i:
            for idx in range(i, j):
                tickets[idx] = engine.enqueue(examples[idx % n_ex], deadline)
            i = j
        else:
            time.sleep(min(times[i] - now, 0.0005))
    return tickets, time.perf_counter() - start


def run_load(params: ModelParams, profile: LoadProfile, config: BatcherConfig = BatcherConfig(),
             examples=None, verify: bool = False, stall=None, pool: int = 20_000) -> LoadResult:
    """Drive a fresh engine with ``profile`` and drain it."""
    times = profile.arrival_times()
    if examples is None:
        examples = request_examples(params, min(len(times), pool), profile.seed)
    engine = AutoBatcher(params, config, stall=stall)
    t0 = time.perf_counter()
    with engine:
        tickets, send_time = _send(engine, examples, times, profile.deadline)
        budget = (profile.deadline or config.request_timeout) + 5.0
        for t in tickets:
            t.wait(budget)
    wall = time.perf_counter() - t0
    metrics = engine.metrics_snapshot()
    outcomes = {o.value: 0 for o in Outcome}
    for t in tickets:
        outcomes[t.outcome.value] += 1
    latencies = np.array([t.latency for t in tickets if t.latency is not None])
    mismatches = None
    if verify:
        mismatches = 0
        for i, t in enumerate(tickets):
            if t.outcome is Outcome.PROBABILITY:
                direct = float(predict(PackedBatch.from_examples([examples[i % len(examples)]]), params)[0])
                mismatches += t.value != direct
    return LoadResult(profile, config, metrics, len(tickets), wall, send_time, latencies, outcomes, mismatches)


def decode_throughput(n: int = 100_000, seed: int = 0, n_features: int = 1 << 20, max_active: int = 16) -> dict:
    """Records/s decoding the same examples from the binary format and from CSV."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, max_active + 1, n)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    ids = np.concatenate([np.sort(rng.choice(n_features, m, replace=False)) for m in lengths])
    vals = rng.normal(size=len(ids)).astype(np.float32)
    exs = PackedBatch(ids, vals, offsets).examples(rng.integers(0, 2, n))
    binary, text = encode_stream(exs), encode_csv(exs)

    def timed(fn):
        t0 = time.perf_counter()
        out = fn()
        return time.perf_counter() - t0, out

    t_bin, got_bin = timed(lambda: decode_bytes(binary))
    t_csv, got_csv = timed(lambda: list(decode_csv(text)))
    assert len(got_bin) == len(got_csv) == n
    return {
        "records": n,
        "binary_bytes": len(binary),
        "csv_bytes": len(text.encode()),
        "binary_records_per_s": n / t_bin,
        "csv_records_per_s": n / t_csv,
        "binary_speedup": t_csv / t_bin,
        "hardware_dependent": ["binary_records_per_s", "csv_records_per_s", "binary_speedup"],
    }
