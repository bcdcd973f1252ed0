import json
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidfm.errors import ValidationError
from bidfm.model import PackedBatch, SparseExample, init_params, predict
from bidfm.serving import (
    AutoBatcher,
    BatcherConfig,
    ComputeFailed,
    EngineShutdown,
    Outcome,
    RequestTimeout,
)

from oracles import random_field_batch


@pytest.fixture(scope="module")
def fm():
    return init_params("fm", [40], 4, seed=1)


@pytest.fixture(scope="module")
def deep():
    return init_params("deepfm", [10, 20, 5], 4, hidden=(8,), seed=2)


def ex(i, n=40):
    return SparseExample(sorted({i % n, (i * 7 + 3) % n}), [1.0, 0.5][: len({i % n, (i * 7 + 3) % n})])


def slow(**kw):
    kw.setdefault("request_timeout", 5.0)
    return BatcherConfig(**kw)


class Counting:
    def __init__(self, params):
        self.params = params
        self.sizes = []

    def __call__(self, batch):
        self.sizes.append(batch.batch_size)
        return predict(batch, self.params)


def test_config_invariants():
    with pytest.raises(ValidationError):
        BatcherConfig(max_batch=0)
    with pytest.raises(ValidationError):
        BatcherConfig(flush_interval=0.2, request_timeout=0.1)
    with pytest.raises(ValidationError):
        BatcherConfig(n_batcher_threads=0)
    c = BatcherConfig()
    assert (c.max_batch, c.flush_interval, c.n_batcher_threads, c.request_timeout) == (64, 0.003, 2, 0.1)


def test_hundred_requests_seven_calls(fm):
    compute = Counting(fm)
    eng = AutoBatcher(fm, slow(max_batch=16, flush_interval=1.0, n_batcher_threads=1), compute=compute).start()
    tickets = [eng.enqueue(ex(i)) for i in range(100)]
    for t in tickets:
        t.result(timeout=5)
    m = eng.shutdown_drain()
    assert m.compute_calls_total == 7
    assert sorted(compute.sizes) == [4] + [16] * 6
    assert m.full_flushes_total == 6


def test_single_request_deadline_flush(fm):
    fi = 0.003
    with AutoBatcher(fm, BatcherConfig(max_batch=64, flush_interval=fi)) as eng:
        t = eng.enqueue(ex(1))
        t.result(timeout=1)
        m = eng.metrics_snapshot()
    assert m.compute_calls_total == 1 and m.batch_sizes == {1: 1}
    assert m.max_queue_wait >= fi * 0.9
    slack = m.max_queue_wait - fi
    assert slack < fi
    assert t.latency < 2 * fi + 0.02


def test_full_batch_flushes_before_interval(fm):
    with AutoBatcher(fm, slow(max_batch=8, flush_interval=2.0, n_batcher_threads=1)) as eng:
        t0 = time.monotonic()
        tickets = [eng.enqueue(ex(i)) for i in range(8)]
        for t in tickets:
            t.result(timeout=1.5)
        assert time.monotonic() - t0 < 1.0
        m = eng.metrics_snapshot()
    assert m.full_flushes_total == 1 and m.compute_calls_total == 1


def test_starvation_stall_times_out(fm):
    stall = lambda i: 0.15 if i == 0 else 0.0
    with AutoBatcher(fm, BatcherConfig(flush_interval=0.003, request_timeout=0.05), stall=stall) as eng:
        t = eng.enqueue(ex(3))
        assert t.wait(2)
        assert t.outcome is Outcome.TIMEOUT
        with pytest.raises(RequestTimeout):
            t.result()
        ok = eng.enqueue(ex(4))
        assert 0 <= ok.result(timeout=1) <= 1
        m = eng.metrics_snapshot()
    assert m.timeouts_total == 1 and m.examples_computed_total == 1 and m.compute_calls_total == 1


def test_fresh_metrics_zero(fm):
    eng = AutoBatcher(fm)
    m = eng.metrics_snapshot()
    assert all(v == 0 for v in m.counters().values())
    assert m.avg_batch_size == 0.0 and m.latency.count == 0


def test_conservation_and_average(fm):
    with AutoBatcher(fm, BatcherConfig(max_batch=8, flush_interval=0.002)) as eng:
        tickets = [eng.enqueue(ex(i)) for i in range(50)]
        for t in tickets:
            t.result(timeout=2)
        m = eng.metrics_snapshot()
    assert m.requests_total == m.examples_computed_total == 50
    assert m.resolved_total == m.requests_total
    assert m.avg_batch_size == round(50 / m.compute_calls_total, 2)
    assert sum(k * v for k, v in m.batch_sizes.items()) == 50
    assert m.latency.count == 50


def test_snapshots_monotonic(fm):
    with AutoBatcher(fm, BatcherConfig(max_batch=4, flush_interval=0.002)) as eng:
        prev = eng.metrics_snapshot().counters()
        for round_ in range(3):
            for t in [eng.enqueue(ex(i)) for i in range(10)]:
                t.result(timeout=2)
            cur = eng.metrics_snapshot().counters()
            assert all(cur[k] >= prev[k] for k in cur)
            prev = cur


class TestShutdown:
    def test_empty_queue_prompt(self, fm):
        eng = AutoBatcher(fm).start()
        t0 = time.monotonic()
        m = eng.shutdown_drain(grace=1.0)
        assert time.monotonic() - t0 < 0.5
        assert all(v == 0 for v in m.counters().values())
        assert eng.shutdown_drain().counters() == m.counters()  # idempotent

    def test_drains_queued_requests(self, fm):
        eng = AutoBatcher(fm, slow(max_batch=64, flush_interval=2.0)).start()
        tickets = [eng.enqueue(ex(i)) for i in range(10)]
        m = eng.shutdown_drain(grace=1.0)
        assert all(t.outcome is Outcome.PROBABILITY for t in tickets)
        assert m.examples_computed_total == 10 and m.timeouts_total == 0 and m.shutdown_total == 0

    def test_enqueue_after_shutdown(self, fm):
        eng = AutoBatcher(fm).start()
        eng.shutdown_drain()
        with pytest.raises(EngineShutdown):
            eng.enqueue(ex(0))

    def test_not_started_rejects(self, fm):
        with pytest.raises(EngineShutdown):
            AutoBatcher(fm).enqueue(ex(0))

    def test_zero_grace_resolves_everything(self, fm):
        gate = threading.Event()
        entered = threading.Event()

        def blocked(batch):
            entered.set()
            gate.wait(5)
            return predict(batch, fm)

        eng = AutoBatcher(fm, slow(max_batch=4, flush_interval=0.001, n_batcher_threads=1), compute=blocked).start()
        first = [eng.enqueue(ex(i)) for i in range(4)]
        assert entered.wait(2)
        queued = [eng.enqueue(ex(i)) for i in range(6)]
        m = eng.shutdown_drain(grace=0.0)
        tickets = first + queued
        assert all(t.done() for t in tickets)
        assert all(t.outcome is Outcome.SHUTDOWN for t in tickets)
        with pytest.raises(EngineShutdown):
            tickets[0].result()
        gate.set()
        for th in eng._threads:
            th.join(2)
        after = eng.metrics_snapshot()
        # the in-flight batch finished later but could not resolve its tickets a second time
        assert all(t.outcome is Outcome.SHUTDOWN for t in tickets)
        assert m.shutdown_total == 10 and after.examples_computed_total == 0
        assert after.resolved_total == after.requests_total == 10


def test_compute_error_resolves_batch(fm):
    def boom(batch):
        raise RuntimeError("kaboom")

    with AutoBatcher(fm, BatcherConfig(max_batch=4, flush_interval=0.002), compute=boom) as eng:
        tickets = [eng.enqueue(ex(i)) for i in range(4)]
        for t in tickets:
            assert t.wait(2)
            assert t.outcome is Outcome.COMPUTE_ERROR
            with pytest.raises(ComputeFailed):
                t.result()
        m = eng.metrics_snapshot()
    assert m.compute_errors_total == 4 and m.examples_computed_total == 0


@pytest.mark.parametrize("bad", [SparseExample([45], [1.0]), SparseExample([0, 39, 40], [1.0, 1.0, 1.0])])
def test_validation_ticket(fm, bad):
    with AutoBatcher(fm) as eng:
        t = eng.enqueue(bad)
        assert t.done() and t.outcome is Outcome.VALIDATION
        with pytest.raises(ValidationError):
            t.result()
        m = eng.metrics_snapshot()
    assert m.requests_total == m.validation_total == 1 and m.compute_calls_total == 0


def test_deepfm_field_validation(deep):
    with AutoBatcher(deep) as eng:
        assert eng.enqueue(SparseExample([1, 2, 31], [1, 1, 1])).outcome is Outcome.VALIDATION  # two ids in field 0
        assert eng.enqueue(SparseExample([1, 12], [1, 1])).outcome is Outcome.VALIDATION
        good = eng.enqueue(SparseExample([1, 12, 31], [1, 1, 1]))
        assert good.result(timeout=1) == predict(PackedBatch.from_examples([good.example]), deep)[0]


@pytest.mark.parametrize("arch", ["fm", "deepfm"])
def test_batched_equals_direct_bitwise(arch, fm, deep):
    params = fm if arch == "fm" else deep
    rng = np.random.default_rng(5)
    if arch == "fm":
        exs = []
        for _ in range(1200):
            n = int(rng.integers(1, 7))
            exs.append(SparseExample(np.sort(rng.choice(40, n, replace=False)), rng.normal(size=n)))
    else:
        exs = random_field_batch(rng, params.field_offsets, 1200).examples()
    results = [None] * len(exs)

    def producer(lo, hi):
        tickets = [(i, eng.enqueue(exs[i])) for i in range(lo, hi)]
        for i, t in tickets:
            results[i] = t.result(timeout=5)

    with AutoBatcher(params, slow(max_batch=32, flush_interval=0.002)) as eng:
        threads = [threading.Thread(target=producer, args=(j * 300, (j + 1) * 300)) for j in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        m = eng.metrics_snapshot()
    direct = [float(predict(PackedBatch.from_examples([e]), params)[0]) for e in exs]
    assert results == direct
    assert m.compute_calls_total < len(exs)


@settings(max_examples=15, deadline=None)
@given(max_batch=st.integers(1, 20), threads=st.integers(1, 3), n=st.integers(0, 60), producers=st.integers(1, 3))
def test_exactly_once_under_concurrency(fm, max_batch, threads, n, producers):
    eng = AutoBatcher(fm, slow(max_batch=max_batch, flush_interval=0.001, n_batcher_threads=threads)).start()
    out = [[] for _ in range(producers)]

    def produce(j):
        out[j] = [eng.enqueue(ex(i)) for i in range(j, n, producers)]

    ths = [threading.Thread(target=produce, args=(j,)) for j in range(producers)]
    for th in ths:
        th.start()
    for th in ths:
        th.join()
    m = eng.shutdown_drain(grace=2.0)
    tickets = [t for ts in out for t in ts]
    assert len(tickets) == n
    assert all(t.done() for t in tickets)
    assert m.requests_total == n == m.resolved_total
    assert len({t.request_id for t in tickets}) == n


def test_metrics_text_and_json(fm):
    with AutoBatcher(fm, BatcherConfig(max_batch=4, flush_interval=0.002)) as eng:
        for t in [eng.enqueue(ex(i)) for i in range(9)]:
            t.result(timeout=2)
        m = eng.metrics_snapshot()
    kv = dict(line.split("=", 1) for line in m.to_text().strip().splitlines())
    assert int(kv["requests_total"]) == 9
    assert float(kv["avg_batch_size"]) == m.avg_batch_size
    d = json.loads(m.to_json())
    assert d["examples_computed_total"] == 9
    assert d["latency_p99_ms"] >= d["latency_p50_ms"] > 0
