"""Reverse-mode gradients for chains of linear modules, plus optimizers.

A model is a `Chain` of named modules (dense matrices and truncated
butterflies, in either orientation) applied left to right to the data
columns.  The training loss is the squared Frobenius norm |Yhat - Y|_F^2,
so the upstream gradient fed into backward passes is 2 (Yhat - Y).

Trainable parameters are exposed through a flat vector with a stable
layout: modules in chain order, each module's arrays in C order, frozen
modules excluded entirely.  Training is full batch and deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .butterfly import TruncatedButterfly, backward_through, forward_with_cache
from .errors import DimensionMismatch, NonFiniteLoss, StaleCache


class DenseLayer:
    """y = W x with a trainable (out x in) weight matrix."""

    def __init__(self, name: str, weight: np.ndarray):
        self.name = name
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("dense weight must be 2-D")

    def forward(self, x):
        if x.shape[0] != self.weight.shape[1]:
            raise DimensionMismatch(
                f"{self.name}: input width {x.shape[0]} != {self.weight.shape[1]}"
            )
        return self.weight @ x, x

    def backward(self, cache, d_out):
        x = cache
        if d_out.ndim == 1:
            d_w = np.outer(d_out, x)
        else:
            d_w = d_out @ x.T
        return self.weight.T @ d_out, [d_w]

    def param_arrays(self):
        return [self.weight]


class ButterflyLayer:
    """A truncated butterfly applied forward, or transposed when
    `transpose=True` (the output side of a sandwich)."""

    def __init__(self, name: str, tb: TruncatedButterfly, transpose: bool = False):
        self.name = name
        self.tb = tb
        self.transpose = transpose

    def forward(self, x):
        return forward_with_cache(self.tb, x, transpose=self.transpose)

    def backward(self, cache, d_out):
        d_in, d_w = backward_through(self.tb, cache, d_out,
                                     transpose=self.transpose)
        return d_in, [d_w]

    def param_arrays(self):
        return [self.tb.net.weights]


@dataclass(frozen=True)
class ParamSlot:
    """One contiguous block of the flat parameter vector."""

    module: str
    index: int  # array index within the module
    shape: tuple
    offset: int
    size: int


class ParamLayout:
    """Bijection between (module, array, element) and flat indices."""

    def __init__(self, slots: list[ParamSlot]):
        self.slots = slots
        self.size = sum(s.size for s in slots)

    def describe(self) -> list[tuple]:
        return [(s.module, s.index, s.shape, s.offset) for s in self.slots]


class Chain:
    """A left-to-right composition of named linear modules."""

    def __init__(self, modules):
        self.modules = list(modules)
        names = [m.name for m in self.modules]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate module names: {names}")

    def names(self):
        return [m.name for m in self.modules]

    def forward(self, x):
        """Apply every module; returns (output, cache for backward)."""
        x = np.asarray(x, dtype=np.float64)
        caches = []
        cur = x
        for m in self.modules:
            cur, c = m.forward(cur)
            caches.append(c)
        return cur, (id(self), caches)

    def layout(self, freeze: frozenset = frozenset()) -> ParamLayout:
        unknown = set(freeze) - set(self.names())
        if unknown:
            raise ValueError(f"freeze names not in chain: {sorted(unknown)}")
        slots = []
        off = 0
        for m in self.modules:
            if m.name in freeze:
                continue
            for i, arr in enumerate(m.param_arrays()):
                slots.append(ParamSlot(m.name, i, arr.shape, off, arr.size))
                off += arr.size
        return ParamLayout(slots)

    def get_params(self, layout: ParamLayout) -> np.ndarray:
        flat = np.empty(layout.size)
        by_name = {m.name: m for m in self.modules}
        for s in layout.slots:
            arr = by_name[s.module].param_arrays()[s.index]
            flat[s.offset : s.offset + s.size] = arr.ravel()
        return flat

    def set_params(self, layout: ParamLayout, flat: np.ndarray) -> None:
        if flat.shape != (layout.size,):
            raise DimensionMismatch(
                f"flat params length {flat.shape} != {layout.size}"
            )
        by_name = {m.name: m for m in self.modules}
        for s in layout.slots:
            arr = by_name[s.module].param_arrays()[s.index]
            arr.ravel()[:] = flat[s.offset : s.offset + s.size]

    def backward(self, cache, d_out, freeze: frozenset = frozenset()):
        """Gradient of the loss w.r.t. every unfrozen parameter.

        `cache` must come from this chain's forward; returns a flat vector
        aligned with layout(freeze).
        """
        token, caches = cache
        if token != id(self) or len(caches) != len(self.modules):
            raise StaleCache("cache does not match this chain's forward()")
        per_module: dict[str, list] = {}
        cur = np.asarray(d_out, dtype=np.float64)
        for m, c in zip(reversed(self.modules), reversed(caches)):
            cur, grads = m.backward(c, cur)
            per_module[m.name] = grads
        layout = self.layout(freeze)
        flat = np.empty(layout.size)
        for s in layout.slots:
            flat[s.offset : s.offset + s.size] = per_module[s.module][s.index].ravel()
        return flat


def forward(chain: Chain, x):
    return chain.forward(x)


def backward(chain: Chain, cache, d_out, freeze: frozenset = frozenset()):
    return chain.backward(cache, d_out, freeze)


def loss_and_grad(chain: Chain, x, y, freeze: frozenset = frozenset()):
    """Squared-Frobenius loss and its flat gradient in one pass."""
    y = np.asarray(y, dtype=np.float64)
    y_hat, cache = chain.forward(x)
    if y_hat.shape != y.shape:
        raise DimensionMismatch(f"output {y_hat.shape} vs target {y.shape}")
    resid = y_hat - y
    loss = float(np.sum(resid * resid))
    grads = chain.backward(cache, 2.0 * resid, freeze)
    return loss, grads


def fd_check(chain: Chain, x, y, h: float = 1e-5, rng=None, sample: int = 64,
             freeze: frozenset = frozenset()) -> float:
    """Max relative error of backward() vs central finite differences.

    Checks a random subsample of at most `sample` parameters; the relative
    error uses denominator max(1e-8, |g_fd|).  Coordinates where both the
    difference quotient and the analytic gradient sit below the rounding
    noise floor of the quotient (eps * |loss| / h cancellation) cannot be
    distinguished from an exact zero and count as matching.
    """
    if not 1e-8 < h < 1e-3:
        raise ValueError(f"h={h} outside (1e-8, 1e-3)")
    layout = chain.layout(freeze)
    _, analytic = _loss_and_grad_at(chain, layout, x, y, freeze)
    if rng is None or layout.size <= sample:
        indices = np.arange(min(sample, layout.size))
    else:
        indices = rng.subset(layout.size, sample)
    params = chain.get_params(layout)
    worst = 0.0
    for idx in indices:
        idx = int(idx)
        orig = params[idx]
        params[idx] = orig + h
        chain.set_params(layout, params)
        up = _loss_only(chain, x, y)
        params[idx] = orig - h
        chain.set_params(layout, params)
        down = _loss_only(chain, x, y)
        params[idx] = orig
        chain.set_params(layout, params)
        g_fd = (up - down) / (2.0 * h)
        noise = fd_noise_floor(max(abs(up), abs(down)), h)
        if max(abs(g_fd), abs(analytic[idx])) <= noise:
            continue
        rel = abs(analytic[idx] - g_fd) / max(1e-8, abs(g_fd))
        worst = max(worst, rel)
    return worst


def fd_noise_floor(loss_magnitude: float, h: float) -> float:
    """Cancellation noise of a central difference quotient at scale h."""
    return 32.0 * np.finfo(np.float64).eps * max(loss_magnitude, 1.0) / (2.0 * h)


def _loss_only(chain, x, y):
    y_hat, _ = chain.forward(x)
    resid = y_hat - np.asarray(y)
    return float(np.sum(resid * resid))


def _loss_and_grad_at(chain, layout, x, y, freeze):
    y_hat, cache = chain.forward(x)
    resid = y_hat - np.asarray(y)
    loss = float(np.sum(resid * resid))
    return loss, chain.backward(cache, 2.0 * resid, freeze)


@dataclass
class TrainConfig:
    """Full-batch training settings; `freeze` names modules left untouched."""

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1000
    grad_tol: float = 0.0
    seed: int = 0
    freeze: frozenset = frozenset()
    keep_best: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.grad_tol < 0:
            raise ValueError("grad_tol must be nonnegative")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        self.freeze = frozenset(self.freeze)

    def replace(self, **kw) -> "TrainConfig":
        from dataclasses import replace as _replace

        return _replace(self, **kw)


@dataclass
class OptimizerState:
    """First/second moment buffers for Adam; unused for SGD."""

    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(state: OptimizerState, params: np.ndarray,
                   grads: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """One SGD or bias-corrected Adam update; returns the new parameters."""
    if params.shape != grads.shape:
        raise DimensionMismatch(
            f"params {params.shape} vs grads {grads.shape}"
        )
    state.step += 1
    if cfg.optimizer == "sgd":
        return params - cfg.learning_rate * grads
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grads
    state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grads * grads
    m_hat = state.m / (1.0 - cfg.adam_beta1**state.step)
    v_hat = state.v / (1.0 - cfg.adam_beta2**state.step)
    return params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class TrainTrace:
    """Per-step loss and max-abs gradient, starting from the initial point."""

    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_inf: list = field(default_factory=list)

    def record(self, step, loss, ginf):
        self.steps.append(int(step))
        self.losses.append(float(loss))
        self.grad_inf.append(float(ginf))

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_grad_inf(self) -> float:
        return self.grad_inf[-1]

    def extend(self, other: "TrainTrace") -> None:
        base = self.steps[-1] + 1 if self.steps else 0
        for s, l, g in zip(other.steps, other.losses, other.grad_inf):
            self.record(base + s, l, g)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_inf_norm"])
            for s, l, g in zip(self.steps, self.losses, self.grad_inf):
                writer.writerow([s, repr(l), repr(g)])


def train(chain: Chain, x, y, cfg: TrainConfig) -> TrainTrace:
    """Full-batch training loop: forward/backward/update until max_steps
    or max|grad| <= grad_tol.  Deterministic for identical inputs.

    When the chain starts with frozen modules their output is computed
    once and reused; this changes nothing numerically because those
    modules are pure functions of the data.
    """
    x = np.asarray(x, dtype=np.float64)
    prefix = 0
    while prefix < len(chain.modules) and chain.modules[prefix].name in cfg.freeze:
        prefix += 1
    if prefix:
        cur = x
        for m in chain.modules[:prefix]:
            cur, _ = m.forward(cur)
        sub = Chain(chain.modules[prefix:])
        sub_freeze = frozenset(n for n in cfg.freeze if n in sub.names())
        return _train_loop(sub, cur, y, cfg, sub_freeze)
    return _train_loop(chain, x, y, cfg, cfg.freeze)


def _train_loop(chain, x, y, cfg, freeze):
    layout = chain.layout(freeze)
    params = chain.get_params(layout)
    state = OptimizerState()
    trace = TrainTrace()
    loss, grads = _loss_and_grad_at(chain, layout, x, y, freeze)
    _check_finite(loss, 0)
    ginf = float(np.abs(grads).max()) if grads.size else 0.0
    trace.record(0, loss, ginf)
    best_loss, best_params = loss, params.copy()
    for step in range(1, cfg.max_steps + 1):
        if ginf <= cfg.grad_tol or not grads.size:
            break
        params = optimizer_step(state, params, grads, cfg)
        chain.set_params(layout, params)
        loss, grads = _loss_and_grad_at(chain, layout, x, y, freeze)
        _check_finite(loss, step)
        ginf = float(np.abs(grads).max())
        trace.record(step, loss, ginf)
        if cfg.keep_best and loss < best_loss:
            best_loss, best_params = loss, params.copy()
    if cfg.keep_best and trace.final_loss > best_loss:
        chain.set_params(layout, best_params)
        loss, grads = _loss_and_grad_at(chain, layout, x, y, freeze)
        trace.record(trace.steps[-1] + 1, loss, float(np.abs(grads).max()))
    return trace


def _check_finite(loss, step):
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss} at step {step}")
