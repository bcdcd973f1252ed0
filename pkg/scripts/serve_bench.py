"""Sweep batcher settings under open-loop load and print reduction factor and timeouts.

Rates are set to the saturated profile (20 x max_batch / flush_interval) unless --rate is given.
Profiles the host cannot sustain show up as timeouts or a low achieved rate.
"""
import argparse
import json

from bidfm.bench import LoadProfile, run_load, saturated_rate
from bidfm.model import init_params
from bidfm.serving import BatcherConfig

GRID = [(8, 0.005), (16, 0.010), (32, 0.010), (64, 0.003)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--duration", type=float, default=1.0)
    ap.add_argument("--rate", type=float)
    ap.add_argument("--arch", default="deepfm")
    ap.add_argument("--json")
    args = ap.parse_args()
    params = init_params(args.arch, [100] * 8, 8, hidden=(32,) if args.arch == "deepfm" else (), seed=0)
    rows = []
    for max_batch, flush in GRID:
        cfg = BatcherConfig(max_batch=max_batch, flush_interval=flush)
        rate = args.rate or saturated_rate(cfg)
        r = run_load(params, LoadProfile(rate=rate, duration=args.duration), cfg)
        m = r.metrics
        rows.append({"max_batch": max_batch, "flush_ms": flush * 1e3, "rate": rate,
                     "achieved_rate": r.achieved_rate, "reduction_factor": r.reduction_factor,
                     "timeouts": m.timeouts_total, "requests": m.requests_total})
        print(f"max_batch={max_batch:3d} flush={flush * 1e3:4.1f}ms rate={rate:8.0f} "
              f"achieved={r.achieved_rate:8.0f} reduction={r.reduction_factor:6.2f} "
              f"timeouts={m.timeouts_total}/{m.requests_total}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
