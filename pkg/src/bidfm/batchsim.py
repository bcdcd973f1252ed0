"""Discrete-event model of the autobatcher's flush policy.

Wall-clock runs of :class:`bidfm.serving.AutoBatcher` top out at a few
thousand flushes per second, far too few to observe a fault injected on
0.005% of flushes. This simulator replays the same policy (shared queue,
``n_batcher_threads`` consumers, flush on full batch or oldest-waiter age,
drop requests past deadline at flush time) over millions of arrivals using
a linear compute-cost model.
"""
from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass

import numpy as np

from .serving import BatcherConfig


class StallInjector:
    """Fault hook: pause ``duration`` seconds on a fraction ``rate`` of flushes.

    Without a seed the schedule is periodic (flush 0, then every
    ``round(1/rate)``-th flush), so even short runs see the fault.
    """

    def __init__(self, rate: float, duration: float, seed: int | None = None):
        if not 0 <= rate <= 1:
            raise ValueError("rate must be within [0, 1]")
        self.rate = rate
        self.duration = duration
        self.seed = seed
        self.period = int(round(1 / rate)) if rate > 0 else 0
        self.injected = 0

    def __call__(self, index: int) -> float:
        if self.rate <= 0:
            return 0.0
        if self.seed is None:
            hit = index % self.period == 0
        else:
            hit = random.Random(self.seed * 1_000_003 + index).random() < self.rate
        if hit:
            self.injected += 1
            return self.duration
        return 0.0


@dataclass
class ComputeCost:
    per_call: float = 100e-6
    per_example: float = 5e-6

    def __call__(self, n: int) -> float:
        return self.per_call + self.per_example * n

    @classmethod
    def calibrate(cls, compute, make_batch, sizes=(1, 8, 32, 64), repeats: int = 20) -> "ComputeCost":
        """Least-squares line through the best-of-``repeats`` time of ``compute(make_batch(n))``."""
        xs, ys = [], []
        for n in sizes:
            batch = make_batch(n)
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                compute(batch)
                best = min(best, time.perf_counter() - t0)
            xs.append(n)
            ys.append(best)
        slope, intercept = np.polyfit(xs, ys, 1)
        return cls(max(float(intercept), 0.0), max(float(slope), 0.0))


@dataclass
class SimResult:
    requests: int
    compute_calls: int
    examples_computed: int
    timeouts: int
    flushes: int
    stalls: int
    latencies: np.ndarray  # computed requests only, seconds
    max_queue_wait: float

    @property
    def timeout_fraction(self) -> float:
        return self.timeouts / self.requests if self.requests else 0.0

    @property
    def avg_batch_size(self) -> float:
        return self.examples_computed / self.compute_calls if self.compute_calls else 0.0

    def summary(self) -> dict:
        lat = self.latencies
        pct = (lambda q: float(np.percentile(lat, q)) * 1e3) if len(lat) else (lambda q: 0.0)
        return {
            "requests": self.requests,
            "compute_calls": self.compute_calls,
            "examples_computed": self.examples_computed,
            "timeouts": self.timeouts,
            "flushes": self.flushes,
            "stalls_injected": self.stalls,
            "timeout_fraction": self.timeout_fraction,
            "avg_batch_size": round(self.avg_batch_size, 2),
            "latency_p50_ms": pct(50),
            "latency_p99_ms": pct(99),
            "max_queue_wait_ms": float(self.max_queue_wait) * 1e3,
        }


def poisson_arrivals(rate: float, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.exponential(1.0 / rate, n))


def simulate(arrivals, config: BatcherConfig, cost: ComputeCost | None = None,
             stall=None, deadline: float | None = None) -> SimResult:
    """Replay ``arrivals`` (sorted absolute times, seconds) through the flush policy."""
    arr = np.asarray(arrivals, dtype=np.float64)
    n = len(arr)
    cost = cost or ComputeCost()
    budget = config.request_timeout if deadline is None else deadline
    mb, fi = config.max_batch, config.flush_interval
    free = [0.0] * config.n_batcher_threads
    heapq.heapify(free)
    head = 0
    flushes = stalls = calls = computed = timeouts = 0
    max_wait = 0.0
    lat_chunks = []
    while head < n:
        t_free = heapq.heappop(free)
        t0 = max(t_free, arr[head])
        full_at = arr[head + mb - 1] if head + mb - 1 < n else np.inf
        flush_at = max(t0, min(full_at, arr[head] + fi))
        end = min(head + mb, int(np.searchsorted(arr, flush_at, side="right")))
        pause = stall(flushes) if stall is not None else 0.0
        if pause:
            stalls += 1
        start = flush_at + pause
        batch = arr[head:end]
        alive = batch + budget > start
        n_live = int(alive.sum())
        timeouts += len(batch) - n_live
        done_at = start
        if n_live:
            calls += 1
            computed += n_live
            done_at = start + cost(n_live)
            live = batch[alive]
            lat_chunks.append(done_at - live)
            max_wait = max(max_wait, flush_at - live[0])
        flushes += 1
        head = end
        heapq.heappush(free, done_at)
    latencies = np.concatenate(lat_chunks) if lat_chunks else np.zeros(0)
    return SimResult(n, calls, computed, timeouts, flushes, stalls, latencies, max_wait)
