import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidfm.batchsim import ComputeCost, StallInjector, poisson_arrivals, simulate
from bidfm.model import SparseExample, init_params
from bidfm.serving import AutoBatcher, BatcherConfig

FREE = ComputeCost(0.0, 0.0)


def test_simultaneous_arrivals_ceiling():
    cfg = BatcherConfig(max_batch=16, n_batcher_threads=1)
    r = simulate(np.zeros(100), cfg, FREE)
    assert r.compute_calls == 7 and r.examples_computed == 100


def test_single_request_deadline_flush():
    cfg = BatcherConfig(flush_interval=0.003)
    r = simulate([1.0], cfg, ComputeCost(1e-4, 0.0))
    assert r.compute_calls == 1
    assert r.latencies[0] == pytest.approx(0.003 + 1e-4)
    assert r.max_queue_wait == pytest.approx(0.003)


def test_full_batch_does_not_wait():
    cfg = BatcherConfig(max_batch=4, flush_interval=0.003, n_batcher_threads=1)
    r = simulate([0.0, 0.0001, 0.0002, 0.0003], cfg, FREE)
    assert r.max_queue_wait == pytest.approx(0.0003)


def test_nominal_no_fault_zero_timeouts():
    cfg = BatcherConfig()
    r = simulate(poisson_arrivals(5000, 200_000, seed=1), cfg, ComputeCost())
    assert r.timeouts == 0
    assert r.max_queue_wait <= cfg.flush_interval + 1e-12


def test_stall_past_budget_times_out_and_conserves():
    cfg = BatcherConfig(max_batch=8, flush_interval=0.002)
    stall = StallInjector(rate=0.01, duration=0.2)
    r = simulate(poisson_arrivals(2000, 50_000, seed=2), cfg, ComputeCost(), stall=stall)
    assert r.stalls == stall.injected > 0
    assert r.timeouts > 0
    assert r.examples_computed + r.timeouts == r.requests


def test_stall_injector_schedules():
    periodic = StallInjector(rate=0.25, duration=0.005)
    hits = [periodic(i) for i in range(8)]
    assert hits == [0.005, 0, 0, 0, 0.005, 0, 0, 0]
    seeded = StallInjector(rate=0.1, duration=1.0, seed=3)
    frac = np.mean([seeded(i) > 0 for i in range(20_000)])
    assert frac == pytest.approx(0.1, abs=0.01)
    assert [seeded(i) for i in range(50)] == [StallInjector(0.1, 1.0, seed=3)(i) for i in range(50)]
    assert StallInjector(0.0, 1.0)(0) == 0.0
    with pytest.raises(ValueError):
        StallInjector(1.5, 1.0)


def test_calibrate_recovers_linear_cost():
    fake = ComputeCost(2e-4, 1e-5)

    def compute(n):
        end = time.perf_counter() + fake(n)
        while time.perf_counter() < end:
            pass

    got = ComputeCost.calibrate(compute, lambda n: n, sizes=(1, 20, 40), repeats=3)
    assert got.per_call == pytest.approx(2e-4, abs=5e-5)
    assert got.per_example == pytest.approx(1e-5, rel=0.3)


def test_agrees_with_engine_on_bursts():
    """Three well-separated bursts of 20: simulator and threaded engine flush identically."""
    params = init_params("fm", [10], 2)
    cfg = BatcherConfig(max_batch=8, flush_interval=0.005, n_batcher_threads=1, request_timeout=1.0)
    sim = simulate(np.repeat([0.0, 0.2, 0.4], 20), cfg, FREE)
    with AutoBatcher(params, cfg) as eng:
        for _ in range(3):
            ts = [eng.enqueue(SparseExample([1], [1.0])) for _ in range(20)]
            for t in ts:
                t.result(timeout=1)
        m = eng.metrics_snapshot()
    assert sim.compute_calls == m.compute_calls_total == 9
    assert sorted(m.batch_sizes.items()) == [(4, 3), (8, 6)]


@settings(max_examples=40, deadline=None)
@given(
    gaps=st.lists(st.floats(0, 0.01), min_size=1, max_size=300),
    max_batch=st.integers(1, 32),
    threads=st.integers(1, 4),
    stall_rate=st.sampled_from([0.0, 0.1, 1.0]),
)
def test_conservation_property(gaps, max_batch, threads, stall_rate):
    cfg = BatcherConfig(max_batch=max_batch, flush_interval=0.003, n_batcher_threads=threads)
    r = simulate(np.cumsum(gaps), cfg, ComputeCost(), stall=StallInjector(stall_rate, 0.05))
    assert r.examples_computed + r.timeouts == r.requests == len(gaps)
    assert r.compute_calls <= r.requests
    assert len(r.latencies) == r.examples_computed
    if r.compute_calls:
        assert 1 <= r.avg_batch_size <= max_batch
