"""Synthetic click streams with a planted FM ground truth.

Each example picks one id per field (one-hot, value 1.0). Labels are drawn
from Bernoulli(sigmoid(f(x))) where f is a known FM, so the best achievable
logloss is the mean binary entropy of the true probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .ingest import encode_csv, encode_header, encode_packed
from .model import PackedBatch, field_offsets_from_sizes


@dataclass(frozen=True)
class Schema:
    field_sizes: tuple[int, ...] = (20, 20, 20, 20, 20, 20)
    k_true: int = 4
    bias: float = -0.5
    weight_scale: float = 0.6
    factor_scale: float = 0.45
    skew: float = 0.0  # 0 = uniform ids within a field, >0 = Zipf-like popularity

    def __post_init__(self):
        if not self.field_sizes or min(self.field_sizes) < 1:
            raise ValidationError("every field needs a positive cardinality")
        if self.k_true < 1:
            raise ValidationError("k_true must be positive")

    @property
    def n_features(self) -> int:
        return int(sum(self.field_sizes))

    @property
    def field_offsets(self) -> np.ndarray:
        return field_offsets_from_sizes(self.field_sizes)


@dataclass
class GroundTruth:
    schema: Schema
    w0: float
    w: np.ndarray
    V: np.ndarray

    @classmethod
    def planted(cls, schema: Schema, seed: int = 0) -> "GroundTruth":
        # independent stream from the one that samples examples
        rng = np.random.default_rng([seed, 0x5EED])
        w = rng.normal(0.0, schema.weight_scale, schema.n_features)
        V = rng.normal(0.0, schema.factor_scale, (schema.n_features, schema.k_true))
        return cls(schema, schema.bias, w, V)

    def logits(self, ids: np.ndarray) -> np.ndarray:
        """``ids`` is (B, n_fields); all values are 1."""
        s = self.V[ids].sum(axis=1)
        sq = (self.V[ids] ** 2).sum(axis=1)
        return self.w0 + self.w[ids].sum(axis=1) + 0.5 * (s * s - sq).sum(axis=1)

    def probabilities(self, ids: np.ndarray) -> np.ndarray:
        return expit(self.logits(ids))


def _field_probs(size: int, skew: float) -> np.ndarray | None:
    if skew <= 0:
        return None
    p = 1.0 / np.arange(1, size + 1) ** skew
    return p / p.sum()


def sample_ids(schema: Schema, n: int, rng: np.random.Generator) -> np.ndarray:
    fo = schema.field_offsets
    cols = []
    for f, size in enumerate(schema.field_sizes):
        cols.append(fo[f] + rng.choice(size, size=n, p=_field_probs(size, schema.skew)))
    return np.stack(cols, axis=1).astype(np.int64) if cols else np.zeros((n, 0), np.int64)


@dataclass
class Sample:
    ids: np.ndarray  # (n, n_fields), sorted within rows since fields are laid out in order
    labels: np.ndarray  # uint8
    p_true: np.ndarray

    def __len__(self):
        return len(self.labels)

    def packed(self) -> PackedBatch:
        n, f = self.ids.shape
        return PackedBatch(self.ids.reshape(-1).copy(), np.ones(n * f, np.float32),
                           np.arange(n + 1, dtype=np.int64) * f)

    @property
    def bayes_logloss(self) -> float:
        """Monte-Carlo estimate of the irreducible loss: mean binary entropy of p_true."""
        return float(np.mean(binary_entropy(self.p_true))) if len(self) else 0.0


def binary_entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-15, 1 - 1e-15)
    return -(p * np.log(p) + (1 - p) * np.log1p(-p))


def generate(schema: Schema, n: int, seed: int = 0, truth: GroundTruth | None = None) -> Sample:
    if n < 0:
        raise ValidationError("n must be non-negative")
    truth = truth or GroundTruth.planted(schema, seed)
    rng = np.random.default_rng(seed)
    ids = sample_ids(schema, n, rng)
    p = truth.probabilities(ids) if n else np.zeros(0)
    labels = (rng.random(n) < p).astype(np.uint8)
    return Sample(ids, labels, p)


def stream_bytes(sample: Sample) -> bytes:
    if not len(sample):
        return encode_header()
    return encode_header() + encode_packed(sample.packed(), sample.labels)


def stream_csv(sample: Sample) -> str:
    return encode_csv(sample.packed().examples(sample.labels)) if len(sample) else ""


def bayes_logloss(schema: Schema, seed: int = 0, n_mc: int = 200_000, mc_seed: int = 12345) -> float:
    """Irreducible loss of the planted model, estimated on a fresh draw of ``n_mc`` examples."""
    truth = GroundTruth.planted(schema, seed)
    ids = sample_ids(schema, n_mc, np.random.default_rng(mc_seed))
    return float(np.mean(binary_entropy(truth.probabilities(ids))))
