"""Adagrad, Adam and lazy Adam over :class:`SparseGradient`.

Sparse groups are ``w`` and ``V``; dense groups are ``w0`` and the MLP.
Updates mutate the parameter and slot arrays in place; the step functions
also return ``(params, state)`` for convenience.

Moments are stored in the parameter dtype (float32 by default), so with the
parameter itself an Adam-family model holds three values per weight. The
update arithmetic itself runs in float64.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import ModelParams, SparseGradient


class ShapeMismatchError(ValidationError):
    pass


class OptimizerKind(str, enum.Enum):
    ADAGRAD = "adagrad"
    ADAM = "adam"
    LAZY_ADAM = "lazy_adam"

    @property
    def moments_per_param(self) -> int:
        return 1 if self is OptimizerKind.ADAGRAD else 2

    @classmethod
    def parse(cls, name: str) -> "OptimizerKind":
        return cls(name.replace("-", "_").lower())


DEFAULTS = {
    OptimizerKind.ADAGRAD: dict(lr=0.05, beta1=0.0, beta2=0.0, eps=1e-8),
    OptimizerKind.ADAM: dict(lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8),
    OptimizerKind.LAZY_ADAM: dict(lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8),
}


@dataclass(eq=False)
class Slots:
    """Per-parameter storage laid out exactly like :class:`ModelParams`."""

    w0: np.ndarray
    w: np.ndarray
    V: np.ndarray
    mlp: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Slots":
        return cls(
            np.zeros_like(params.w0),
            np.zeros_like(params.w),
            np.zeros_like(params.V),
            [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.mlp],
        )

    def arrays(self) -> list[np.ndarray]:
        out = [self.w0, self.w, self.V]
        for W, b in self.mlp:
            out += [W, b]
        return out

    def copy(self) -> "Slots":
        return Slots(self.w0.copy(), self.w.copy(), self.V.copy(), [(W.copy(), b.copy()) for W, b in self.mlp])


@dataclass
class StepCounters:
    """Touched-entry accounting; a sparse row of ``w``/``V`` costs ``k + 1`` entries."""

    steps: int = 0
    sparse_entries_last: int = 0
    sparse_entries_total: int = 0
    dense_entries_last: int = 0
    dense_entries_total: int = 0
    support_rows_total: int = 0

    def record(self, sparse: int, dense: int, support: int) -> None:
        self.steps += 1
        self.sparse_entries_last = sparse
        self.sparse_entries_total += sparse
        self.dense_entries_last = dense
        self.dense_entries_total += dense
        self.support_rows_total += support

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class OptimizerState:
    kind: OptimizerKind
    lr: float
    beta1: float
    beta2: float
    eps: float
    m: Slots | None  # None for Adagrad
    v: Slots  # second moment, or Adagrad's squared-gradient accumulator
    t_global: int = 0
    t_row: np.ndarray | None = None  # lazy Adam only
    counters: StepCounters = field(default_factory=StepCounters)
    hook: object = None  # optional callable(kind, rows, sparse_entries, dense_entries)

    def slot_sets(self) -> list[Slots]:
        return [s for s in (self.m, self.v) if s is not None]


def make_optimizer(kind, params: ModelParams, **overrides) -> OptimizerState:
    kind = OptimizerKind.parse(kind) if isinstance(kind, str) else OptimizerKind(kind)
    hp = dict(DEFAULTS[kind])
    hp.update({k: v for k, v in overrides.items() if v is not None})
    if hp["lr"] <= 0 or hp["eps"] <= 0:
        raise ValidationError("lr and eps must be positive")
    m = None if kind is OptimizerKind.ADAGRAD else Slots.zeros_like(params)
    t_row = np.zeros(params.n_features, dtype=np.int64) if kind is OptimizerKind.LAZY_ADAM else None
    return OptimizerState(kind, float(hp["lr"]), float(hp["beta1"]), float(hp["beta2"]), float(hp["eps"]),
                          m, Slots.zeros_like(params), 0, t_row)


def _check(params: ModelParams, state: OptimizerState, grad: SparseGradient, kind: OptimizerKind):
    if state.kind is not kind:
        raise ValidationError(f"state is {state.kind.value}, step is {kind.value}")
    k = params.k
    rows = grad.rows
    if grad.w.shape != rows.shape or grad.V.shape != (len(rows), k):
        raise ShapeMismatchError(f"sparse gradient shapes {grad.w.shape}, {grad.V.shape} vs {len(rows)} rows, k={k}")
    if len(rows) and (rows[0] < 0 or rows[-1] >= params.n_features):
        raise ShapeMismatchError("gradient rows outside the feature range")
    if len(grad.mlp) != len(params.mlp):
        raise ShapeMismatchError(f"{len(grad.mlp)} dense gradients for {len(params.mlp)} layers")
    for i, ((gW, gb), layer) in enumerate(zip(grad.mlp, params.mlp)):
        if gW.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeMismatchError(f"dense layer {i}: gradient shape mismatch")


def _dense_pairs(params: ModelParams, grad: SparseGradient, slots: list[Slots]):
    """Yield (param, grad, slot arrays...) for the dense groups."""
    yield (params.w0, np.asarray(grad.w0), *[s.w0 for s in slots])
    for i, layer in enumerate(params.mlp):
        gW, gb = grad.mlp[i]
        yield (layer.weight, gW, *[s.mlp[i][0] for s in slots])
        yield (layer.bias, gb, *[s.mlp[i][1] for s in slots])


def _dense_size(params: ModelParams) -> int:
    return 1 + sum(l.weight.size + l.bias.size for l in params.mlp)


def _bias_correction(beta: float, t) -> np.ndarray:
    # one code path for scalar and per-row step counts keeps lazy == dense bitwise
    return 1.0 - np.power(beta, np.asarray(t, dtype=np.float64))


def _adam_update(theta, m, v, g, t, lr, b1, b2, eps):
    """Return new (theta, m, v) in float64; ``t`` broadcasts against rows."""
    g = np.asarray(g, dtype=np.float64)
    m = b1 * m.astype(np.float64) + (1.0 - b1) * g
    v = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
    m_hat = m / _bias_correction(b1, t)
    v_hat = v / _bias_correction(b2, t)
    theta = theta.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


def _adagrad_update(theta, acc, g, lr, eps):
    g = np.asarray(g, dtype=np.float64)
    acc = acc.astype(np.float64) + g * g
    theta = theta.astype(np.float64) - lr * g / (np.sqrt(acc) + eps)
    return theta, acc


def _store(dst: np.ndarray, value) -> None:
    dst[...] = value


def _finish(params, state, rows, sparse_entries):
    dense = _dense_size(params)
    state.counters.record(sparse_entries, dense, len(rows))
    if state.hook is not None:
        state.hook(state.kind, rows, sparse_entries, dense)
    return params, state


def adagrad_step(params: ModelParams, state: OptimizerState, grad: SparseGradient):
    """Adagrad; sparse groups touch only the gradient's rows."""
    _check(params, state, grad, OptimizerKind.ADAGRAD)
    lr, eps = state.lr, state.eps
    acc = state.v
    rows = grad.rows
    if len(rows):
        th, a = _adagrad_update(params.w[rows], acc.w[rows], grad.w, lr, eps)
        params.w[rows], acc.w[rows] = th, a
        th, a = _adagrad_update(params.V[rows], acc.V[rows], grad.V, lr, eps)
        params.V[rows], acc.V[rows] = th, a
    for theta, g, a in _dense_pairs(params, grad, [acc]):
        th, a_new = _adagrad_update(theta, a, g, lr, eps)
        _store(theta, th)
        _store(a, a_new)
    state.t_global += 1
    return _finish(params, state, rows, len(rows) * (params.k + 1))


def adam_step(params: ModelParams, state: OptimizerState, grad: SparseGradient):
    """Dense Adam: every row's moments decay each step, gradient or not."""
    _check(params, state, grad, OptimizerKind.ADAM)
    state.t_global += 1
    t = state.t_global
    hp = (state.lr, state.beta1, state.beta2, state.eps)
    m, v = state.m, state.v
    g_w = np.zeros(params.n_features)
    g_V = np.zeros((params.n_features, params.k))
    g_w[grad.rows] = grad.w
    g_V[grad.rows] = grad.V
    for theta, g, mm, vv in [(params.w, g_w, m.w, v.w), (params.V, g_V, m.V, v.V)]:
        th, m_new, v_new = _adam_update(theta, mm, vv, g, t, *hp)
        _store(theta, th)
        _store(mm, m_new)
        _store(vv, v_new)
    for theta, g, mm, vv in _dense_pairs(params, grad, [m, v]):
        th, m_new, v_new = _adam_update(theta, mm, vv, g, t, *hp)
        _store(theta, th)
        _store(mm, m_new)
        _store(vv, v_new)
    return _finish(params, state, grad.rows, params.n_features * (params.k + 1))


def lazy_adam_step(params: ModelParams, state: OptimizerState, grad: SparseGradient):
    """Adam that updates sparse rows only where the gradient has support.

    Each sparse row keeps its own step count for bias correction, so a row
    updated on every step follows exactly the dense Adam trajectory.
    """
    _check(params, state, grad, OptimizerKind.LAZY_ADAM)
    state.t_global += 1
    hp = (state.lr, state.beta1, state.beta2, state.eps)
    m, v = state.m, state.v
    rows = grad.rows
    if len(rows):
        state.t_row[rows] += 1
        t_rows = state.t_row[rows]
        th, m_new, v_new = _adam_update(params.w[rows], m.w[rows], v.w[rows], grad.w, t_rows, *hp)
        params.w[rows], m.w[rows], v.w[rows] = th, m_new, v_new
        th, m_new, v_new = _adam_update(
            params.V[rows], m.V[rows], v.V[rows], grad.V, t_rows[:, None], *hp
        )
        params.V[rows], m.V[rows], v.V[rows] = th, m_new, v_new
    for theta, g, mm, vv in _dense_pairs(params, grad, [m, v]):
        th, m_new, v_new = _adam_update(theta, mm, vv, g, state.t_global, *hp)
        _store(theta, th)
        _store(mm, m_new)
        _store(vv, v_new)
    return _finish(params, state, rows, len(rows) * (params.k + 1))


_STEPS = {
    OptimizerKind.ADAGRAD: adagrad_step,
    OptimizerKind.ADAM: adam_step,
    OptimizerKind.LAZY_ADAM: lazy_adam_step,
}


def step(params: ModelParams, state: OptimizerState, grad: SparseGradient):
    return _STEPS[state.kind](params, state, grad)
