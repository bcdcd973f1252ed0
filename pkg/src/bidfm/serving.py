"""In-process autobatching for single-example prediction requests.

Producers call :meth:`AutoBatcher.enqueue` from any thread and get a
:class:`PredictionTicket` back immediately. A few batcher threads share one
locked queue; a batch is flushed when it reaches ``max_batch`` or when the
oldest waiting request has been queued for ``flush_interval``. Requests whose
deadline has passed by flush time are resolved as timeouts and never computed.
"""
from __future__ import annotations

import enum
import itertools
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BidFMError, ValidationError
from .model import Arch, ModelParams, PackedBatch, SparseExample, predict


class RequestTimeout(BidFMError, TimeoutError):
    pass


class EngineShutdown(BidFMError, RuntimeError):
    pass


class ComputeFailed(BidFMError, RuntimeError):
    pass


class Outcome(str, enum.Enum):
    PROBABILITY = "probability"
    TIMEOUT = "timeout"
    SHUTDOWN = "shutdown"
    VALIDATION = "validation"
    COMPUTE_ERROR = "compute_error"


@dataclass(frozen=True)
class BatcherConfig:
    max_batch: int = 64
    flush_interval: float = 0.003  # seconds
    n_batcher_threads: int = 2
    request_timeout: float = 0.100  # seconds, whole-request budget

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValidationError("max_batch must be >= 1")
        if self.n_batcher_threads < 1:
            raise ValidationError("n_batcher_threads must be >= 1")
        if not 0 < self.flush_interval < self.request_timeout:
            raise ValidationError("need 0 < flush_interval < request_timeout")


class PredictionTicket:
    """Handle for one enqueued request; resolved exactly once."""

    __slots__ = ("request_id", "example", "enqueued_at", "deadline", "outcome",
                 "value", "error", "resolved_at", "_gate")

    def __init__(self, request_id: int, example: SparseExample | None, enqueued_at: float, deadline: float):
        self.request_id = request_id
        self.example = example
        self.enqueued_at = enqueued_at
        self.deadline = deadline
        self.outcome: Outcome | None = None
        self.value: float | None = None
        self.error: Exception | None = None
        self.resolved_at: float | None = None
        # held until resolution; a bare lock is much cheaper than an Event
        self._gate = threading.Lock()
        self._gate.acquire()

    def done(self) -> bool:
        return self.outcome is not None

    def wait(self, timeout: float | None = None) -> bool:
        if not self._gate.acquire(timeout=-1 if timeout is None else max(timeout, 0.0)):
            return False
        self._gate.release()
        return True

    def _set(self) -> None:
        self._gate.release()

    def result(self, timeout: float | None = None) -> float:
        if not self.wait(timeout):
            raise TimeoutError("ticket still pending")
        if self.outcome is Outcome.PROBABILITY:
            return self.value
        raise self.error

    @property
    def latency(self) -> float | None:
        return None if self.resolved_at is None else self.resolved_at - self.enqueued_at

    def __repr__(self):
        return f"PredictionTicket(id={self.request_id}, outcome={self.outcome and self.outcome.value})"


class Histogram:
    """Fixed-bucket histogram; ``bounds`` are bucket upper edges, last bucket is open."""

    def __init__(self, bounds):
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.counts = np.zeros(len(self.bounds) + 1, dtype=np.int64)
        self.total = 0.0
        self.max = 0.0

    def add_many(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return
        idx = np.searchsorted(self.bounds, values, side="left")
        self.counts += np.bincount(idx, minlength=len(self.counts))
        self.total += float(values.sum())
        self.max = max(self.max, float(values.max()))

    @property
    def count(self) -> int:
        return int(self.counts.sum())

    def percentile(self, q: float) -> float:
        """Upper bucket edge containing the q-th percentile (0..100)."""
        n = self.count
        if n == 0:
            return 0.0
        rank = np.ceil(q / 100.0 * n)
        i = int(np.searchsorted(np.cumsum(self.counts), max(rank, 1)))
        return float(self.bounds[i]) if i < len(self.bounds) else self.max

    def copy(self) -> "Histogram":
        h = Histogram(self.bounds)
        h.counts = self.counts.copy()
        h.total, h.max = self.total, self.max
        return h

    def as_dict(self) -> dict:
        return {"bounds": self.bounds.tolist(), "counts": self.counts.tolist(),
                "sum": self.total, "max": self.max}


LATENCY_BOUNDS = np.geomspace(1e-5, 1.0, 41)  # 10 us .. 1 s


@dataclass
class ServeMetrics:
    requests_total: int = 0
    compute_calls_total: int = 0
    examples_computed_total: int = 0
    timeouts_total: int = 0
    shutdown_total: int = 0
    validation_total: int = 0
    compute_errors_total: int = 0
    flushes_total: int = 0
    full_flushes_total: int = 0
    max_queue_wait: float = 0.0  # seconds, enqueue -> flush, computed requests only
    latency: Histogram = field(default_factory=lambda: Histogram(LATENCY_BOUNDS))
    batch_sizes: dict = field(default_factory=dict)

    @property
    def resolved_total(self) -> int:
        return (self.examples_computed_total + self.timeouts_total + self.shutdown_total
                + self.validation_total + self.compute_errors_total)

    @property
    def avg_batch_size(self) -> float:
        if not self.compute_calls_total:
            return 0.0
        return round(self.examples_computed_total / self.compute_calls_total, 2)

    @property
    def timeout_fraction(self) -> float:
        return self.timeouts_total / self.requests_total if self.requests_total else 0.0

    def copy(self) -> "ServeMetrics":
        out = ServeMetrics(**{k: v for k, v in self.__dict__.items() if k not in ("latency", "batch_sizes")})
        out.latency = self.latency.copy()
        out.batch_sizes = dict(self.batch_sizes)
        return out

    def counters(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k.endswith("_total")}

    def to_dict(self) -> dict:
        d = self.counters()
        d["avg_batch_size"] = self.avg_batch_size
        d["max_queue_wait_ms"] = round(self.max_queue_wait * 1e3, 4)
        d["latency_p50_ms"] = round(self.latency.percentile(50) * 1e3, 4)
        d["latency_p99_ms"] = round(self.latency.percentile(99) * 1e3, 4)
        d["latency_mean_ms"] = round(self.latency.total / max(self.latency.count, 1) * 1e3, 4)
        d["batch_size_histogram"] = {str(k): v for k, v in sorted(self.batch_sizes.items())}
        d["latency_counts"] = self.latency.counts.tolist()  # buckets edged by LATENCY_BOUNDS
        d["latency_sum_s"] = self.latency.total
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, dict):
                v = ",".join(f"{a}:{b}" for a, b in v.items())
            elif isinstance(v, list):
                v = ",".join(map(str, v))
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class AutoBatcher:
    """Coalesce concurrent single-example predictions into batched compute calls.

    ``compute`` maps a :class:`PackedBatch` to probabilities; it defaults to
    :func:`bidfm.model.predict` over ``params``. ``stall`` is a fault hook:
    called with the flush index, it returns seconds to sleep before the batch
    is checked against deadlines (simulating a batcher thread starved of CPU).
    """

    def __init__(self, params: ModelParams, config: BatcherConfig = BatcherConfig(), *,
                 compute: Callable[[PackedBatch], np.ndarray] | None = None,
                 stall: Callable[[int], float] | None = None,
                 clock: Callable[[], float] = time.monotonic):
        self.params = params
        self.config = config
        self._compute = compute or (lambda batch: predict(batch, params))
        self._stall = stall
        self._clock = clock
        self._queue: deque[PredictionTicket] = deque()
        self._cond = threading.Condition(threading.Lock())
        self._resolve_lock = threading.Lock()
        self._metrics_lock = threading.Lock()
        self._metrics = ServeMetrics()
        self._ids = itertools.count()
        self._accepting = False
        self._started = False
        self._flush_seq = 0
        self._inflight: set[PredictionTicket] = set()
        self._threads: list[threading.Thread] = []
        self._final: ServeMetrics | None = None
        self._n_features = params.n_features
        self._deep = params.arch is Arch.DEEPFM
        fo = params.field_offsets
        self._field_lo = fo[:-1].copy()
        self._field_size = np.diff(fo).astype(np.uint64)

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "AutoBatcher":
        with self._cond:
            if self._started:
                return self
            self._started = True
            self._accepting = True
        for i in range(self.config.n_batcher_threads):
            t = threading.Thread(target=self._batcher_loop, name=f"bidfm-batcher-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown_drain(grace=1.0)

    # -- producer side ------------------------------------------------------

    def _validate(self, example: SparseExample) -> None:
        ids = example.feature_ids
        if ids[-1] >= self._n_features:
            raise ValidationError(f"feature id {int(ids[-1])} outside [0, {self._n_features})")
        if self._deep:
            # one id per field: (id - field_start) as unsigned must fall below the field size
            if len(ids) != len(self._field_lo) or not np.all(
                (ids - self._field_lo).view(np.uint64) < self._field_size
            ):
                raise ValidationError("DeepFM request needs exactly one id per field")

    def enqueue(self, example: SparseExample, deadline: float | None = None) -> PredictionTicket:
        """Queue one example; ``deadline`` is a relative budget in seconds."""
        now = self._clock()
        budget = self.config.request_timeout if deadline is None else deadline
        try:
            self._validate(example)
        except ValidationError as exc:
            ticket = PredictionTicket(next(self._ids), None, now, now + budget)
            with self._cond:
                if not self._accepting:
                    raise EngineShutdown("engine is not accepting requests")
                self._metrics.requests_total += 1
            self._resolve([ticket], Outcome.VALIDATION, error=exc)
            return ticket
        ticket = PredictionTicket(next(self._ids), example, now, now + budget)
        with self._cond:
            if not self._accepting:
                raise EngineShutdown("engine is not accepting requests")
            self._metrics.requests_total += 1
            self._queue.append(ticket)
            n = len(self._queue)
            if n == 1 or n == self.config.max_batch:
                self._cond.notify()
        return ticket

    def predict(self, example: SparseExample, deadline: float | None = None) -> float:
        return self.enqueue(example, deadline).result()

    # -- batcher side -------------------------------------------------------

    def _take_batch(self):
        """Block until a flush condition holds; return (tickets, flush_index, full) or None to exit."""
        cfg = self.config
        q = self._queue
        with self._cond:
            while True:
                while not q:
                    if not self._accepting:
                        return None
                    self._cond.wait()
                # drain mode flushes immediately
                while len(q) < cfg.max_batch and self._accepting:
                    remaining = q[0].enqueued_at + cfg.flush_interval - self._clock()
                    if remaining <= 0:
                        break
                    self._cond.wait(remaining)
                    if not q:
                        break
                if not q:
                    continue
                n = min(cfg.max_batch, len(q))
                batch = [q.popleft() for _ in range(n)]
                self._inflight.update(batch)
                index = self._flush_seq
                self._flush_seq += 1
                if q:
                    self._cond.notify()
                return batch, index, n == cfg.max_batch

    def _batcher_loop(self):
        while True:
            taken = self._take_batch()
            if taken is None:
                return
            self._process(*taken)

    def _process(self, batch: list[PredictionTicket], index: int, full: bool):
        flushed_at = self._clock()
        if self._stall is not None:
            pause = self._stall(index)
            if pause:
                time.sleep(pause)
        now = self._clock()
        live = [t for t in batch if t.deadline > now]
        expired = [t for t in batch if t.deadline <= now]
        released = []
        computed = errors = 0
        if expired:
            released += self._resolve(expired, Outcome.TIMEOUT, release=False,
                                      error=RequestTimeout("deadline passed before compute"))
        if live:
            packed = PackedBatch.from_examples([t.example for t in live])
            try:
                probs = np.asarray(self._compute(packed), dtype=np.float64)
                if probs.shape != (len(live),):
                    raise ComputeFailed(f"compute returned shape {probs.shape} for {len(live)} requests")
            except Exception as exc:
                err = exc if isinstance(exc, ComputeFailed) else ComputeFailed(str(exc))
                err.__cause__ = exc if err is not exc else None
                done = self._resolve(live, Outcome.COMPUTE_ERROR, release=False, error=err)
                errors = len(done)
            else:
                done = self._resolve(live, Outcome.PROBABILITY, release=False, values=probs)
                computed = len(done)
            released += done
        with self._cond:
            self._inflight.difference_update(batch)
        with self._metrics_lock:
            m = self._metrics
            m.flushes_total += 1
            m.full_flushes_total += int(full)
            if live:
                m.compute_calls_total += 1
                m.batch_sizes[len(live)] = m.batch_sizes.get(len(live), 0) + 1
                wait = flushed_at - min(t.enqueued_at for t in live)
                m.max_queue_wait = max(m.max_queue_wait, wait)
            m.examples_computed_total += computed
            m.compute_errors_total += errors
        # counters first, so a producer that wakes up sees its own request accounted for
        for t in released:
            t._set()

    def _resolve(self, tickets, outcome: Outcome, values=None, error=None, release=True) -> list:
        """Resolve tickets not yet resolved; returns the ones this call resolved.

        With ``release=False`` the caller must call ``_set()`` on them later.
        """
        now = self._clock()
        done = []
        with self._resolve_lock:
            for i, t in enumerate(tickets):
                if t.outcome is not None:
                    continue
                t.resolved_at = now
                if values is not None:
                    t.value = float(values[i])
                else:
                    t.error = error
                t.outcome = outcome
                done.append(t)
        lat = [now - t.enqueued_at for t in done]
        with self._metrics_lock:
            m = self._metrics
            m.latency.add_many(lat)
            if outcome is Outcome.TIMEOUT:
                m.timeouts_total += len(done)
            elif outcome is Outcome.SHUTDOWN:
                m.shutdown_total += len(done)
            elif outcome is Outcome.VALIDATION:
                m.validation_total += len(done)
        if release:
            for t in done:
                t._set()
        return done

    # -- observation / shutdown ---------------------------------------------

    def metrics_snapshot(self) -> ServeMetrics:
        with self._metrics_lock:
            return self._metrics.copy()

    def queue_depth(self) -> int:
        with self._cond:
            return len(self._queue)

    def shutdown_drain(self, grace: float = 1.0) -> ServeMetrics:
        """Stop accepting, flush what is queued, then fail anything still pending after ``grace``."""
        with self._cond:
            if self._final is not None:
                return self._final.copy()
            self._accepting = False
            self._cond.notify_all()
        end = time.monotonic() + max(grace, 0.0)
        if grace > 0:
            for t in self._threads:
                t.join(max(0.0, end - time.monotonic()))
        with self._cond:
            leftovers = list(self._queue) + list(self._inflight)
            self._queue.clear()
        if leftovers:
            self._resolve(leftovers, Outcome.SHUTDOWN, error=EngineShutdown("engine shut down before compute"))
        final = self.metrics_snapshot()
        with self._cond:
            self._final = final
        return final.copy()
