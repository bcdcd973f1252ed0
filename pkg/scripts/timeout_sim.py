"""Timeout fraction vs stall duration, using the discrete-event batcher model.

Compute cost is calibrated from real predict calls on this machine.
"""
import argparse

from bidfm.batchsim import ComputeCost, StallInjector, poisson_arrivals, simulate
from bidfm.bench import request_examples
from bidfm.model import PackedBatch, init_params, predict
from bidfm.serving import BatcherConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rate", type=float, default=5000)
    ap.add_argument("--n", type=int, default=3_000_000)
    ap.add_argument("--stall-rate", type=float, default=0.00005)
    ap.add_argument("--stall-ms", type=float, nargs="+", default=[0, 5, 50, 100, 200, 500])
    args = ap.parse_args()
    params = init_params("deepfm", [100] * 8, 8, hidden=(32,), seed=0)
    exs = request_examples(params, 64)
    cost = ComputeCost.calibrate(lambda b: predict(b, params), lambda n: PackedBatch.from_examples(exs[:n]))
    print(f"calibrated cost: {cost.per_call * 1e6:.1f}us + {cost.per_example * 1e6:.2f}us/example")
    arrivals = poisson_arrivals(args.rate, args.n, seed=1)
    cfg = BatcherConfig()
    for ms in args.stall_ms:
        stall = StallInjector(args.stall_rate, ms / 1e3) if ms else None
        r = simulate(arrivals, cfg, cost, stall=stall)
        print(f"stall={ms:6.1f}ms stalls={r.stalls:4d} timeouts={r.timeouts:6d} "
              f"fraction={r.timeout_fraction:.2e} avg_batch={r.avg_batch_size:.1f}")


if __name__ == "__main__":
    main()
