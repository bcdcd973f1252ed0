"""Artifact section sizes before and after stripping optimizer state, per optimizer."""
import numpy as np

from bidfm import store
from bidfm.model import PackedBatch, SparseExample, backward, init_params
from bidfm.optim import make_optimizer, step


def main():
    rng = np.random.default_rng(0)
    for kind in ("adam", "lazy_adam", "adagrad"):
        params = init_params("deepfm", [5000, 5000, 10_000], 4, hidden=(16,), seed=1)
        state = make_optimizer(kind, params)
        exs = [SparseExample(params.field_offsets[:-1] + rng.integers(0, [5000, 5000, 10_000]), np.ones(3))
               for _ in range(64)]
        step(params, state, backward(PackedBatch.from_examples(exs), rng.integers(0, 2, 64), params))
        full = store.save(params, state)
        stripped = store.strip(full)
        a, b = store.section_sizes(full), store.section_sizes(stripped)
        print(f"{kind:10s} params={params.n_params()} full={len(full)} stripped={len(stripped)} "
              f"payload_ratio={b['payload'] / a['payload']:.5f} file_ratio={len(stripped) / len(full):.5f}")


if __name__ == "__main__":
    main()
