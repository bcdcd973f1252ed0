"""Single-pass online training over a binary record stream.

Every mini-batch is scored before the optimizer sees it, so the per-batch
losses double as a progressive (predict-then-train) evaluation.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BidFMError, ValidationError
from .ingest import DEFAULT_BLOCK_SIZE, DEFAULT_PREFETCH_BLOCKS, RecordReader
from .model import (
    Arch, ModelParams, PackedBatch, check_bounds, check_fields, forward_backward, init_params, logloss, predict,
)
from .optim import OptimizerKind, OptimizerState, make_optimizer, step

SCHEMA_VERSION = 1


class TrainingDiverged(BidFMError, RuntimeError):
    def __init__(self, batch_index: int, first_example: int, detail: str):
        super().__init__(f"non-finite {detail} at batch {batch_index} (examples from #{first_example})")
        self.batch_index = batch_index
        self.first_example = first_example


@dataclass
class TrainConfig:
    arch: str = "fm"
    field_sizes: tuple[int, ...] = (1000,)
    k: int = 4
    hidden: tuple[int, ...] = ()
    optimizer: str = "adam"
    lr: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    eps: float | None = None
    batch_size: int = 256
    seed: int = 0
    holdout_fraction: float = 0.0
    window_batches: int = 10
    block_size: int = DEFAULT_BLOCK_SIZE
    prefetch_blocks: int = DEFAULT_PREFETCH_BLOCKS

    def __post_init__(self):
        self.field_sizes = tuple(int(s) for s in self.field_sizes)
        self.hidden = tuple(int(h) for h in self.hidden)
        Arch(self.arch)
        OptimizerKind.parse(self.optimizer)
        if not self.field_sizes or min(self.field_sizes) < 1:
            raise ValidationError("field_sizes must be positive")
        if self.k < 1 or self.batch_size < 1 or self.window_batches < 1:
            raise ValidationError("k, batch_size and window_batches must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValidationError("holdout_fraction must be in [0, 1)")

    @property
    def n_features(self) -> int:
        return sum(self.field_sizes)

    @property
    def n_fields(self) -> int:
        return len(self.field_sizes)

    def init_params(self) -> ModelParams:
        return init_params(self.arch, self.field_sizes, self.k, self.hidden, seed=self.seed)

    def make_optimizer(self, params: ModelParams) -> OptimizerState:
        return make_optimizer(self.optimizer, params, lr=self.lr, beta1=self.beta1,
                              beta2=self.beta2, eps=self.eps)


@dataclass
class TrainReport:
    examples: int = 0
    trained_examples: int = 0
    holdout_examples: int = 0
    batches: int = 0
    steps: int = 0
    batch_losses: list = field(default_factory=list)
    batch_sizes: list = field(default_factory=list)
    window_logloss: list = field(default_factory=list)
    progressive_logloss: float | None = None
    holdout_logloss: float | None = None
    optimizer: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    # wall-clock measurements, not reproducible across machines
    wall_time_s: float = 0.0
    input_wait_s: float = 0.0
    examples_per_s: float = 0.0

    HARDWARE_DEPENDENT = ("wall_time_s", "input_wait_s", "examples_per_s", "idle_fraction")

    @property
    def idle_fraction(self) -> float:
        return self.input_wait_s / self.wall_time_s if self.wall_time_s > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["idle_fraction"] = self.idle_fraction
        d["kind"] = "train"
        d["schema_version"] = SCHEMA_VERSION
        d["hardware_dependent"] = list(self.HARDWARE_DEPENDENT)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def window_means(losses, sizes, window: int) -> list[float]:
    """Example-weighted mean loss over consecutive complete windows of ``window`` batches.

    A trailing partial window is kept only when no complete window exists.
    """
    losses = np.asarray(losses, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    n = len(losses)
    if n == 0:
        return []
    if n < window:
        return [float(np.average(losses, weights=sizes))]
    out = []
    for lo in range(0, n - window + 1, window):
        out.append(float(np.average(losses[lo:lo + window], weights=sizes[lo:lo + window])))
    return out


def _batches(reader: RecordReader, batch_size: int):
    """Regroup reader blocks into mini-batches of exactly ``batch_size`` (last may be short)."""
    carry: PackedBatch | None = None
    carry_labels = None
    for block in reader.blocks():
        batch, labels = block.batch, block.labels
        if carry is not None:
            batch = PackedBatch.concat([carry, batch])
            labels = np.concatenate([carry_labels, labels])
        n = batch.batch_size
        lo = 0
        while n - lo >= batch_size:
            yield batch.slice(lo, lo + batch_size), labels[lo:lo + batch_size]
            lo += batch_size
        carry = batch.slice(lo, n) if lo < n else None
        carry_labels = labels[lo:] if lo < n else None
    if carry is not None:
        yield carry, carry_labels


def _check_compatible(params: ModelParams, cfg: TrainConfig) -> None:
    if params.arch is not Arch(cfg.arch) or params.n_features != cfg.n_features or params.k != cfg.k:
        raise ValidationError("initial parameters do not match the training config")


def train_stream(source, cfg: TrainConfig, params: ModelParams | None = None,
                 state: OptimizerState | None = None, on_batch=None):
    """Train over ``source`` (path, ``"-"``, bytes or binary file object).

    Returns ``(params, state, report)``. ``params``/``state`` are updated in
    place when given (resume). ``on_batch(index, loss)`` is an optional probe.
    """
    if params is None:
        params = cfg.init_params()
    _check_compatible(params, cfg)
    if state is None:
        state = cfg.make_optimizer(params)
    elif state.kind is not OptimizerKind.parse(cfg.optimizer):
        raise ValidationError(f"resumed optimizer is {state.kind.value}, config says {cfg.optimizer}")
    deep = params.arch is Arch.DEEPFM
    split = np.random.default_rng([cfg.seed, 0x401D]) if cfg.holdout_fraction > 0 else None

    report = TrainReport(config=asdict(cfg))
    holdout_loss_sum = 0.0
    reader = RecordReader(source, block_size=cfg.block_size, prefetch_blocks=cfg.prefetch_blocks)
    t0 = time.perf_counter()
    seen = 0
    for index, (batch, labels) in enumerate(_batches(reader, cfg.batch_size)):
        check_bounds(batch, params.n_features)
        if deep:
            check_fields(batch, params.field_offsets)
        n = batch.batch_size
        if split is not None:
            hold = split.random(n) < cfg.holdout_fraction
            if hold.any():
                idx = np.flatnonzero(hold)
                hb = PackedBatch.from_examples([batch.example(int(i)) for i in idx])
                holdout_loss_sum += logloss(predict(hb, params), labels[idx]) * len(idx)
                report.holdout_examples += len(idx)
                keep = np.flatnonzero(~hold)
                if len(keep) == 0:
                    seen += n
                    continue
                batch = PackedBatch.from_examples([batch.example(int(i)) for i in keep])
                labels = labels[keep]
        p, grad = forward_backward(batch, labels, params)
        loss = logloss(p, labels)
        if not np.isfinite(loss):
            raise TrainingDiverged(index, seen, "loss")
        step(params, state, grad)
        if not params.all_finite():
            raise TrainingDiverged(index, seen, "parameters after optimizer step")
        report.batch_losses.append(loss)
        report.batch_sizes.append(batch.batch_size)
        report.trained_examples += batch.batch_size
        if on_batch is not None:
            on_batch(index, loss)
        seen += n
    report.wall_time_s = time.perf_counter() - t0
    report.input_wait_s = reader.wait_time
    report.examples = seen
    report.batches = len(report.batch_losses)
    report.steps = report.batches
    report.examples_per_s = seen / report.wall_time_s if report.wall_time_s > 0 else 0.0
    report.window_logloss = window_means(report.batch_losses, report.batch_sizes, cfg.window_batches)
    if report.trained_examples:
        report.progressive_logloss = float(
            np.average(report.batch_losses, weights=report.batch_sizes))
    if report.holdout_examples:
        report.holdout_logloss = holdout_loss_sum / report.holdout_examples
    report.optimizer = {"kind": state.kind.value, **state.counters.as_dict()}
    return params, state, report


def progressive_eval(source, cfg: TrainConfig, params: ModelParams | None = None,
                     state: OptimizerState | None = None) -> np.ndarray:
    """Per-batch logloss, each batch scored before it is trained on."""
    _, _, report = train_stream(source, cfg, params, state)
    return np.asarray(report.batch_losses)


def evaluate(source, params: ModelParams, block_size: int = DEFAULT_BLOCK_SIZE) -> tuple[float, int]:
    """Mean logloss of ``params`` over a labelled stream, without training."""
    total, n = 0.0, 0
    for block in RecordReader(source, block_size=block_size).blocks():
        check_bounds(block.batch, params.n_features)
        p = predict(block.batch, params)
        total += logloss(p, block.labels) * len(block)
        n += len(block)
    return (total / n if n else float("nan")), n
