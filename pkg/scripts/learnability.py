"""Train FM (k=4) on planted synthetic streams and compare holdout logloss to Bayes."""
import argparse
import json

from bidfm.model import logloss, predict
from bidfm.synth import GroundTruth, Schema, generate, stream_bytes
from bidfm.train import TrainConfig, train_stream


def run(seed, n, lr, holdout_n=50_000):
    schema = Schema()
    sample = generate(schema, n, seed=seed)
    cfg = TrainConfig(arch="fm", field_sizes=schema.field_sizes, k=4, optimizer="adam", lr=lr,
                      batch_size=256, window_batches=78, seed=seed)
    params, _, report = train_stream(stream_bytes(sample), cfg)
    holdout = generate(schema, holdout_n, seed=seed + 10_000, truth=GroundTruth.planted(schema, seed))
    loss = logloss(predict(holdout.packed(), params), holdout.labels)
    w = report.window_logloss
    return {
        "seed": seed,
        "holdout_logloss": loss,
        "bayes_logloss": holdout.bayes_logloss,
        "gap": loss - holdout.bayes_logloss,
        "windows": w,
        "monotone": all(b < a for a, b in zip(w, w[1:])),
        "wall_time_s": report.wall_time_s,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--json")
    args = ap.parse_args()
    rows = [run(s, args.n, args.lr) for s in range(args.seeds)]
    for r in rows:
        print(f"seed={r['seed']} holdout={r['holdout_logloss']:.4f} bayes={r['bayes_logloss']:.4f} "
              f"gap={r['gap']:.4f} monotone={r['monotone']} windows="
              + ",".join(f"{x:.3f}" for x in r["windows"]))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
