"""Sparse factorization machine and DeepFM over packed batches.

Parameters are stored in float32 by default. Every forward/backward path
promotes to float64 before arithmetic, so reductions accumulate in double
precision and results for one example never depend on which other examples
share its batch.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ValidationError

PROB_EPS = 1e-7


class OutOfBoundsError(ValidationError):
    def __init__(self, example_index: int, feature_id: int, n_features: int):
        super().__init__(
            f"example {example_index}: feature id {feature_id} outside [0, {n_features})"
        )
        self.example_index = example_index
        self.feature_id = feature_id


class MalformedExampleError(ValidationError):
    def __init__(self, example_index: int, reason: str):
        super().__init__(f"example {example_index}: {reason}")
        self.example_index = example_index


class Arch(str, enum.Enum):
    FM = "fm"
    DEEPFM = "deepfm"


@dataclass(eq=False)
class SparseExample:
    feature_ids: np.ndarray
    feature_values: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64).reshape(-1)
        self.feature_values = np.asarray(self.feature_values, dtype=np.float32).reshape(-1)
        ids = self.feature_ids
        if len(ids) == 0:
            raise ValidationError("example needs at least one feature")
        if len(ids) != len(self.feature_values):
            raise ValidationError(
                f"{len(ids)} feature ids but {len(self.feature_values)} values"
            )
        if ids[0] < 0:
            raise ValidationError("feature ids must be non-negative")
        if len(ids) > 1 and not np.all(ids[1:] > ids[:-1]):
            raise ValidationError("feature ids must be strictly increasing")
        if self.label is not None:
            if self.label not in (0, 1):
                raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
            self.label = int(self.label)

    @classmethod
    def one_hot(cls, ids: Sequence[int], label: int | None = None) -> "SparseExample":
        return cls(ids, np.ones(len(ids), dtype=np.float32), label)

    def __eq__(self, other):
        if not isinstance(other, SparseExample):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.feature_ids, other.feature_ids)
            and np.array_equal(self.feature_values, other.feature_values)
        )

    def __repr__(self):
        return (
            f"SparseExample(ids={self.feature_ids.tolist()}, "
            f"values={self.feature_values.tolist()}, label={self.label})"
        )


@dataclass(eq=False)
class PackedBatch:
    """Many examples joined into flat ``ids``/``values`` buffers.

    Example ``i`` occupies ``ids[offsets[i]:offsets[i + 1]]``.
    """

    ids: np.ndarray
    values: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float32)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)

    @property
    def batch_size(self) -> int:
        return len(self.offsets) - 1

    def __len__(self):
        return self.batch_size

    @classmethod
    def from_examples(cls, examples: Sequence[SparseExample]) -> "PackedBatch":
        if not examples:
            return cls(np.zeros(0), np.zeros(0), np.zeros(1))
        lengths = [len(e.feature_ids) for e in examples]
        offsets = np.zeros(len(examples) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        return cls(
            np.concatenate([e.feature_ids for e in examples]),
            np.concatenate([e.feature_values for e in examples]),
            offsets,
        )

    @classmethod
    def concat(cls, batches: Sequence["PackedBatch"]) -> "PackedBatch":
        batches = [b for b in batches if b.batch_size]
        if not batches:
            return cls(np.zeros(0), np.zeros(0), np.zeros(1))
        if len(batches) == 1:
            return batches[0]
        shifts = np.cumsum([0] + [len(b.ids) for b in batches[:-1]])
        offsets = np.concatenate(
            [[0]] + [b.offsets[1:] + s for b, s in zip(batches, shifts)]
        )
        return cls(
            np.concatenate([b.ids for b in batches]),
            np.concatenate([b.values for b in batches]),
            offsets,
        )

    def slice(self, start: int, stop: int) -> "PackedBatch":
        lo, hi = self.offsets[start], self.offsets[stop]
        return PackedBatch(self.ids[lo:hi], self.values[lo:hi], self.offsets[start : stop + 1] - lo)

    def example(self, i: int, label: int | None = None) -> SparseExample:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return SparseExample(self.ids[lo:hi], self.values[lo:hi], label)

    def examples(self, labels=None) -> list[SparseExample]:
        return [
            self.example(i, None if labels is None else int(labels[i]))
            for i in range(self.batch_size)
        ]

    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.batch_size), np.diff(self.offsets))

    def validate(self) -> None:
        off = self.offsets
        if len(off) == 0 or off[0] != 0:
            raise ValidationError("offsets must start at 0")
        if off[-1] != len(self.ids) or len(self.ids) != len(self.values):
            raise ValidationError("offsets[-1], len(ids) and len(values) must agree")
        lengths = np.diff(off)
        if np.any(lengths < 1):
            raise MalformedExampleError(int(np.argmax(lengths < 1)), "no active features")
        if np.any(self.ids < 0):
            raise ValidationError("feature ids must be non-negative")
        steps = np.diff(self.ids)
        bad = steps <= 0
        if bad.any():
            # a non-increasing step is only legal across an example boundary
            boundary = np.zeros(len(steps), dtype=bool)
            boundary[off[1:-1] - 1] = True
            bad &= ~boundary
            if bad.any():
                pos = int(np.argmax(bad))
                row = int(np.searchsorted(off, pos, side="right") - 1)
                raise MalformedExampleError(row, "feature ids not strictly increasing")


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)


@dataclass(eq=False)
class ModelParams:
    arch: Arch
    w0: np.ndarray  # 0-d
    w: np.ndarray  # (n_features,)
    V: np.ndarray  # (n_features, k)
    field_offsets: np.ndarray  # (n_fields + 1,), contiguous id ranges
    mlp: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        self.arch = Arch(self.arch)
        self.field_offsets = np.asarray(self.field_offsets, dtype=np.int64)

    @property
    def n_features(self) -> int:
        return len(self.w)

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def n_fields(self) -> int:
        return len(self.field_offsets) - 1

    @property
    def dtype(self):
        return self.w.dtype

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in canonical (serialization) order."""
        out = [self.w0, self.w, self.V]
        for layer in self.mlp:
            out += [layer.weight, layer.bias]
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            self.w0.copy(),
            self.w.copy(),
            self.V.copy(),
            self.field_offsets.copy(),
            [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.mlp],
        )

    def validate(self) -> None:
        n, k = self.V.shape
        if n < 1 or k < 1:
            raise ValidationError("n_features and k must be positive")
        if self.w.shape != (n,) or self.w0.shape != ():
            raise ValidationError("w must have shape (n_features,) and w0 must be scalar")
        fo = self.field_offsets
        if len(fo) < 2 or fo[0] != 0 or fo[-1] != n or np.any(np.diff(fo) < 1):
            raise ValidationError("field_offsets must partition [0, n_features) into non-empty ranges")
        if self.arch is Arch.DEEPFM:
            if not self.mlp:
                raise ValidationError("DeepFM needs at least one dense layer")
            width = self.n_fields * k
            for i, layer in enumerate(self.mlp):
                if layer.weight.shape[0] != width or layer.bias.shape != (layer.weight.shape[1],):
                    raise ValidationError(f"dense layer {i} shape mismatch")
                width = layer.weight.shape[1]
            if width != 1:
                raise ValidationError("final dense layer must have one output")
        elif self.mlp:
            raise ValidationError("FM models carry no dense layers")

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def field_offsets_from_sizes(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def init_params(
    arch: Arch | str,
    field_sizes: Sequence[int],
    k: int,
    hidden: Sequence[int] = (),
    seed: int = 0,
    dtype=np.float32,
) -> ModelParams:
    """Fresh parameters: factors and dense weights ~ U(-1/sqrt(k), 1/sqrt(k)), biases zero."""
    arch = Arch(arch)
    fo = field_offsets_from_sizes(field_sizes)
    n = int(fo[-1])
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(k)
    V = rng.uniform(-bound, bound, size=(n, k)).astype(dtype)
    mlp = []
    if arch is Arch.DEEPFM:
        widths = [len(field_sizes) * k, *hidden, 1]
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            mlp.append(
                DenseLayer(
                    rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype),
                    np.zeros(fan_out, dtype=dtype),
                )
            )
    params = ModelParams(arch, np.zeros((), dtype), np.zeros(n, dtype), V, fo, mlp)
    params.validate()
    return params


# ---------------------------------------------------------------------------
# forward


def check_bounds(batch: PackedBatch, n_features: int) -> None:
    bad = (batch.ids < 0) | (batch.ids >= n_features)
    if bad.any():
        pos = int(np.argmax(bad))
        row = int(np.searchsorted(batch.offsets, pos, side="right") - 1)
        raise OutOfBoundsError(row, int(batch.ids[pos]), n_features)


def check_fields(batch: PackedBatch, field_offsets: np.ndarray) -> None:
    """DeepFM inputs need exactly one active id per field."""
    n_fields = len(field_offsets) - 1
    counts = np.diff(batch.offsets)
    wrong = counts != n_fields
    if wrong.any():
        row = int(np.argmax(wrong))
        raise MalformedExampleError(
            row, f"{counts[row]} active ids, expected one per field ({n_fields})"
        )
    fields = np.searchsorted(field_offsets, batch.ids, side="right") - 1
    expect = np.tile(np.arange(n_fields), batch.batch_size)
    wrong = fields != expect
    if wrong.any():
        row = int(np.argmax(wrong)) // n_fields
        raise MalformedExampleError(row, "missing a field or two ids in one field")


@dataclass
class _FMCache:
    seg: np.ndarray
    x: np.ndarray  # (nnz,) float64
    xv: np.ndarray  # (nnz, k) rows V_i * x_i
    s: np.ndarray  # (B, k) per-example sum of xv


def _fm_forward(batch: PackedBatch, params: ModelParams):
    check_bounds(batch, params.n_features)
    starts = batch.offsets[:-1]
    x = batch.values.astype(np.float64)
    ids = batch.ids
    linear = np.add.reduceat(params.w[ids].astype(np.float64) * x, starts)
    xv = params.V[ids].astype(np.float64) * x[:, None]
    s = np.add.reduceat(xv, starts, axis=0)
    sq = np.add.reduceat(xv * xv, starts, axis=0)
    pairwise = 0.5 * (s * s - sq).sum(axis=1)
    logits = float(params.w0) + linear + pairwise
    return logits, _FMCache(batch.segment_ids(), x, xv, s)


def _dense(h: np.ndarray, layer: DenseLayer) -> np.ndarray:
    # Broadcast-and-sum rather than matmul: BLAS kernels pick different
    # blockings per batch size, which would break per-row bit-stability.
    return (h[:, :, None] * layer.weight.astype(np.float64)[None]).sum(axis=1) + layer.bias


def _mlp_forward(h: np.ndarray, mlp: list[DenseLayer]):
    acts = [h]
    pre = []
    for i, layer in enumerate(mlp):
        z = _dense(acts[-1], layer)
        pre.append(z)
        acts.append(z if i == len(mlp) - 1 else np.maximum(z, 0.0))
    return acts, pre


def _empty_result(batch: PackedBatch) -> bool:
    return batch.batch_size == 0


def fm_logit(batch: PackedBatch, params: ModelParams) -> np.ndarray:
    """Raw FM logits, one per example; O(nnz * k) via the square-of-sums identity."""
    if _empty_result(batch):
        return np.zeros(0)
    return _fm_forward(batch, params)[0]


def deepfm_logit(batch: PackedBatch, params: ModelParams) -> np.ndarray:
    """FM logit plus an MLP over the concatenated per-field embeddings ``V_i * x_i``."""
    if params.arch is not Arch.DEEPFM:
        raise ValidationError("deepfm_logit needs a DeepFM model")
    if _empty_result(batch):
        return np.zeros(0)
    logits, cache = _fm_forward(batch, params)
    check_fields(batch, params.field_offsets)
    h = cache.xv.reshape(batch.batch_size, params.n_fields * params.k)
    acts, _ = _mlp_forward(h, params.mlp)
    return logits + acts[-1][:, 0]


def logit(batch: PackedBatch, params: ModelParams) -> np.ndarray:
    if params.arch is Arch.DEEPFM:
        return deepfm_logit(batch, params)
    return fm_logit(batch, params)


def predict(batch: PackedBatch, params: ModelParams) -> np.ndarray:
    return expit(logit(batch, params))


def logloss(p, labels, eps: float = PROB_EPS) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValidationError(f"{p.shape} probabilities vs {y.shape} labels")
    if p.size == 0:
        return 0.0
    p = np.clip(p, eps, 1.0 - eps)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


# ---------------------------------------------------------------------------
# backward


@dataclass(eq=False)
class SparseGradient:
    """Gradient of mean logloss; sparse groups carry only the active rows."""

    w0: float
    rows: np.ndarray  # sorted unique active feature ids
    w: np.ndarray  # (len(rows),)
    V: np.ndarray  # (len(rows), k)
    mlp: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def forward_backward(batch: PackedBatch, labels, params: ModelParams):
    """Return ``(probabilities, SparseGradient)`` for one mini-batch."""
    B = batch.batch_size
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (B,):
        raise ValidationError(f"need {B} labels, got shape {y.shape}")
    if B == 0:
        raise ValidationError("empty batch")
    logits, cache = _fm_forward(batch, params)
    deep = params.arch is Arch.DEEPFM
    if deep:
        check_fields(batch, params.field_offsets)
        h = cache.xv.reshape(B, params.n_fields * params.k)
        acts, pre = _mlp_forward(h, params.mlp)
        logits = logits + acts[-1][:, 0]
    p = expit(logits)
    d = (p - y) / B  # dL/dlogit, batch-averaged

    rows, inv = np.unique(batch.ids, return_inverse=True)
    dn = d[cache.seg]
    g_w = np.bincount(inv, weights=dn * cache.x, minlength=len(rows))
    # d/dV_i of the pairwise term: x_i * (S - V_i x_i)
    gv = (dn * cache.x)[:, None] * (cache.s[cache.seg] - cache.xv)

    g_mlp = []
    if deep:
        dz = d[:, None]
        for i in range(len(params.mlp) - 1, -1, -1):
            layer = params.mlp[i]
            g_mlp.append((acts[i].T @ dz, dz.sum(axis=0)))
            dh = dz @ layer.weight.astype(np.float64).T
            dz = dh * (pre[i - 1] > 0) if i > 0 else dh
        g_mlp.reverse()
        gv += dz.reshape(-1, params.k) * cache.x[:, None]

    g_V = np.zeros((len(rows), params.k))
    np.add.at(g_V, inv, gv)
    return p, SparseGradient(float(d.sum()), rows, g_w, g_V, g_mlp)


def backward(batch: PackedBatch, labels, params: ModelParams) -> SparseGradient:
    return forward_backward(batch, labels, params)[1]
