"""Learned sketching for low-rank approximation.

Given a sketch operator B (ell x n) and a data matrix X (n x d), the
sketch-constrained rank-k approximation is

    rank_k_in_rowspace(B, X, k) = [X V]_k Vt,

where V holds the right singular vectors of B X and [M]_k is the best
rank-k truncation.  Its residual admits the identity

    |X - [XV]_k Vt|_F^2 = |X|_F^2 - sum_{i<=k} sigma_i(X V)^2,

which is what the trainer differentiates: the only SVD gradient needed is
the V-dependence of BX's SVD (`svd_backward`), with the top-k truncation
handled analytically through the singular values of XV.

Sketch kinds: a trainable truncated butterfly (initialized from the FJLT
distribution), a trainable fixed-support sparse matrix with N nonzeros per
column (initialized CountSketch-style), and the frozen CountSketch and
Gaussian baselines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .butterfly import (
    TruncatedButterfly,
    backward_through,
    forward_with_cache,
)
from .errors import (
    DegenerateSpectrum,
    DimensionMismatch,
    EmptyTestSet,
    InvalidRank,
    MalformedFile,
)
from .fjlt import sample_fjlt
from .grad import OptimizerState, TrainConfig, TrainTrace, optimizer_step

log = logging.getLogger(__name__)

GAP_MIN_REL = 1e-6
RANK_RCOND = 1e-12


class ButterflySketch:
    """Trainable butterfly sketch (kind: learned-butterfly)."""

    kind = "learned-butterfly"

    def __init__(self, tb: TruncatedButterfly):
        self.tb = tb
        self.ell = tb.ell
        self.n = tb.n_in

    def matmul(self, x: np.ndarray) -> np.ndarray:
        return self.tb.apply(x)

    def materialize(self) -> np.ndarray:
        return self.tb.materialize()


class SparseSketch:
    """Fixed-support sparse sketch; per-column nonzero values trainable.

    positions[c] lists the rows holding column c's nonzeros (distinct),
    values[c] the corresponding entries.
    """

    def __init__(self, ell: int, n: int, positions: np.ndarray,
                 values: np.ndarray, kind: str = "learned-sparse"):
        positions = np.asarray(positions, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if positions.shape != values.shape or positions.ndim != 2:
            raise DimensionMismatch("positions/values must be (n, N) arrays")
        if positions.shape[0] != n:
            raise DimensionMismatch(f"positions rows {positions.shape[0]} != n={n}")
        if positions.min() < 0 or positions.max() >= ell:
            raise ValueError(f"positions outside [0, {ell})")
        self.ell = ell
        self.n = n
        self.positions = positions
        self.values = values
        self.kind = kind

    @property
    def nnz_per_column(self) -> int:
        return self.positions.shape[1]

    def matmul(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"X has {x.shape[0]} rows, sketch expects {self.n}")
        out = np.zeros((self.ell,) + x.shape[1:])
        for j in range(self.nnz_per_column):
            contrib = self.values[:, j][:, None] * x if x.ndim == 2 else \
                self.values[:, j] * x
            np.add.at(out, self.positions[:, j], contrib)
        return out

    def materialize(self) -> np.ndarray:
        m = np.zeros((self.ell, self.n))
        for c in range(self.n):
            for j in range(self.nnz_per_column):
                m[self.positions[c, j], c] += self.values[c, j]
        return m


class GaussianSketch:
    """Frozen dense Gaussian sketch with N(0, 1/ell) entries."""

    kind = "gaussian"

    def __init__(self, matrix: np.ndarray):
        self.matrix = linalg.as_matrix(matrix)
        self.ell, self.n = self.matrix.shape

    def matmul(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def materialize(self) -> np.ndarray:
        return self.matrix.copy()


def sample_baseline(kind: str, ell: int, n: int, rng):
    """CountSketch (one random +-1 per column) or Gaussian baseline."""
    if ell > n:
        raise DimensionMismatch(f"ell={ell} must be <= n={n}")
    if kind == "countsketch":
        rows = np.array([rng.randint_below(ell) for _ in range(n)],
                        dtype=np.int64).reshape(n, 1)
        signs = rng.rademacher(n).reshape(n, 1)
        return SparseSketch(ell, n, rows, signs, kind="countsketch")
    if kind == "gaussian":
        m = rng.normals(ell * n).reshape(ell, n) / math.sqrt(ell)
        return GaussianSketch(m)
    raise ValueError(f"unknown baseline kind {kind!r}")


def init_sketch(kind: str, ell: int, n: int, rng, nnz: int = 1):
    """Trainable sketch at its documented initialization."""
    if kind == "butterfly":
        return ButterflySketch(sample_fjlt(n, ell, rng))
    if kind == "sparse":
        if not 1 <= nnz <= ell:
            raise ValueError(f"nnz={nnz} outside [1, {ell}]")
        positions = np.stack([rng.subset(ell, nnz) for _ in range(n)])
        values = rng.rademacher(n * nnz).reshape(n, nnz) / math.sqrt(nnz)
        return SparseSketch(ell, n, positions, values)
    raise ValueError(f"unknown trainable kind {kind!r}")


def _rowspace_basis(s_mat: np.ndarray):
    """(V_r, svd) with V_r spanning the numerical row space of s_mat."""
    res = linalg.svd(s_mat)
    rank = linalg.numerical_rank(res.s, rcond=RANK_RCOND)
    return res.v[:, :rank], res


def sketch_rank_k(sketch, x: np.ndarray, k: int) -> np.ndarray:
    """Best rank-k approximation of X within the row space of (sketch @ X)."""
    x = linalg.as_matrix(x)
    if not 1 <= k <= sketch.ell:
        raise InvalidRank(f"k={k} outside [1, ell={sketch.ell}]")
    v_r, _ = _rowspace_basis(sketch.matmul(x))
    if v_r.shape[1] == 0:
        return np.zeros_like(x)
    m = x @ v_r
    k_eff = min(k, min(m.shape))
    return linalg.best_rank_k(m, k_eff) @ v_r.T


def sketch_residual(sketch, x: np.ndarray, k: int) -> float:
    return linalg.fro_norm_sq(x - sketch_rank_k(sketch, x, k))


def err_metric(sketch, testset, k: int) -> float:
    """Mean sketch-constrained residual minus the unconstrained optimum."""
    testset = list(testset)
    if not testset:
        raise EmptyTestSet("test set is empty")
    resid = 0.0
    app = 0.0
    for x in testset:
        x = linalg.as_matrix(x)
        resid += sketch_residual(sketch, x, k)
        k_eff = min(k, min(x.shape))
        app += linalg.fro_norm_sq(x - linalg.best_rank_k(x, k_eff))
    return (resid - app) / len(testset)


def _svd_v_backward(u, s, v, d_v, gap_min, on_degenerate="clamp"):
    """dL/dS given dL/dV for S = U diag(s) Vt (thin, q columns).

    Rotation part: W_ij = s_i (K_ij - K_ji) / (s_j^2 - s_i^2) with
    K = Vt dV and denominators sign-preservingly clamped to gap_min;
    complement part: U S^-1 dVt (I - V Vt) for the row-space deficit.
    """
    q = s.size
    k_mat = v.T @ d_v
    anti = k_mat - k_mat.T
    s_sq = s * s
    denom = s_sq[None, :] - s_sq[:, None]
    needed = np.abs(anti) > 1e-12 * (1.0 + np.abs(k_mat).max())
    np.fill_diagonal(needed, False)
    if on_degenerate == "raise" and np.any(needed & (np.abs(denom) < gap_min)):
        raise DegenerateSpectrum(
            f"singular-value-squared gap below gap_min={gap_min:.3e}"
        )
    safe = np.sign(denom) * np.maximum(np.abs(denom), gap_min)
    safe[safe == 0.0] = gap_min
    w = (s[:, None] * anti) / safe
    np.fill_diagonal(w, 0.0)
    out = u @ w @ v.T
    # complement term: columns of d_v orthogonal to span(V)
    d_v_perp = d_v - v @ k_mat
    inv_s = 1.0 / np.maximum(s, 1e-12 * max(float(s[0]) if q else 1.0, 1e-300))
    out += (u * inv_s) @ d_v_perp.T
    return out


def svd_backward(s_mat: np.ndarray, d_v: np.ndarray,
                 gap_min_rel: float = GAP_MIN_REL,
                 on_degenerate: str = "clamp") -> np.ndarray:
    """Gradient of a V-dependent loss through the thin SVD of s_mat.

    d_v must have one column per thin-SVD right singular vector, or fewer
    (missing columns are treated as zero gradient).  on_degenerate:
    "clamp" uses the safe inverse everywhere, "raise" raises
    DegenerateSpectrum when a needed pair's sigma^2 gap is below
    gap_min_rel * sigma_1^2.
    """
    s_mat = linalg.as_matrix(s_mat)
    res = linalg.svd(s_mat)
    q = res.s.size
    d_v = np.asarray(d_v, dtype=np.float64)
    if d_v.shape[0] != s_mat.shape[1] or d_v.ndim != 2 or d_v.shape[1] > q:
        raise DimensionMismatch(
            f"dL/dV shape {d_v.shape} incompatible with thin SVD ({s_mat.shape[1]}, {q})"
        )
    if d_v.shape[1] < q:
        pad = np.zeros((s_mat.shape[1], q))
        pad[:, : d_v.shape[1]] = d_v
        d_v = pad
    sigma1 = float(res.s[0]) if q else 0.0
    gap_min = gap_min_rel * max(sigma1 * sigma1, 1e-300)
    return _svd_v_backward(res.u, res.s, res.v, d_v, gap_min, on_degenerate)


def _loss_and_sketch_grad(sketch, x, k, gap_min_rel, on_degenerate):
    """Per-matrix loss |X - B_k(X)|_F^2 and dL/d(BX)."""
    if isinstance(sketch, ButterflySketch):
        s_mat, acts = forward_with_cache(sketch.tb, x)
    else:
        s_mat, acts = sketch.matmul(x), None
    res = linalg.svd(s_mat)
    rank = linalg.numerical_rank(res.s, rcond=RANK_RCOND)
    v_r = res.v[:, :rank]
    m = x @ v_r
    m_res = linalg.svd(m)
    k_eff = min(k, rank, min(m.shape)) if rank else 0
    loss = linalg.fro_norm_sq(x) - float(np.sum(m_res.s[:k_eff] ** 2))
    if k_eff == 0:
        return loss, None, acts
    m_k = (m_res.u[:, :k_eff] * m_res.s[:k_eff]) @ m_res.v[:, :k_eff].T
    g_v = -2.0 * x.T @ m_k  # d loss / d V_r
    sigma1 = float(res.s[0])
    gap_min = gap_min_rel * max(sigma1 * sigma1, 1e-300)
    g_full = np.zeros((x.shape[1], res.s.size))
    g_full[:, :rank] = g_v
    d_s = _svd_v_backward(res.u, res.s, res.v, g_full, gap_min, on_degenerate)
    return loss, d_s, acts


def _apply_sketch_grad(sketch, x, d_s, acts, grads_flat):
    """Accumulate dL/d(sketch params) from dL/d(BX) into grads_flat."""
    if isinstance(sketch, ButterflySketch):
        _, d_w = backward_through(sketch.tb, acts, d_s)
        grads_flat += d_w.ravel()
    else:
        d_b = d_s @ x.T  # ell x n
        rows = np.arange(sketch.n)
        for j in range(sketch.nnz_per_column):
            grads_flat[j::sketch.nnz_per_column] += d_b[sketch.positions[:, j], rows]


def _sketch_params(sketch) -> np.ndarray:
    if isinstance(sketch, ButterflySketch):
        return sketch.tb.net.weights.ravel().copy()
    return sketch.values.ravel().copy()


def _set_sketch_params(sketch, flat: np.ndarray) -> None:
    if isinstance(sketch, ButterflySketch):
        sketch.tb.net.weights.ravel()[:] = flat
    else:
        sketch.values.ravel()[:] = flat


@dataclass
class SketchTrainResult:
    sketch: object
    trace: TrainTrace
    skipped_matrices: int = 0


def empirical_loss(sketch, matrices, k: int) -> float:
    """Sum over the set of |X - B_k(X)|_F^2 (fixed summation order)."""
    return float(sum(sketch_residual(sketch, x, k) for x in matrices))


def train_sketch(trainset, kind: str, ell: int, k: int, cfg: TrainConfig,
                 rng, nnz: int = 1) -> SketchTrainResult:
    """Adam on the trainable sketch values against the empirical loss.

    Butterfly sketches start from an FJLT sample, sparse sketches from a
    CountSketch-style init with frozen positions.  Matrices whose SVD
    gradient would need a singular gap below gap_min are skipped for that
    step with a logged warning.
    """
    trainset = [linalg.as_matrix(x) for x in trainset]
    if not trainset:
        raise EmptyTestSet("training set is empty")
    n = trainset[0].shape[0]
    for x in trainset:
        if x.shape[0] != n:
            raise DimensionMismatch("training matrices must share row count")
    if not 1 <= k <= ell:
        raise InvalidRank(f"k={k} outside [1, ell={ell}]")
    sketch = init_sketch(kind, ell, n, rng, nnz=nnz)
    params = _sketch_params(sketch)
    state = OptimizerState()
    trace = TrainTrace()
    skipped_total = 0

    def evaluate():
        nonlocal skipped_total
        total = 0.0
        grads = np.zeros_like(params)
        for x in trainset:
            try:
                loss, d_s, acts = _loss_and_sketch_grad(
                    sketch, x, k, GAP_MIN_REL, "raise"
                )
            except DegenerateSpectrum:
                skipped_total += 1
                log.warning("skipping degenerate-spectrum matrix in sketch step")
                total += sketch_residual(sketch, x, k)
                continue
            total += loss
            if d_s is not None:
                _apply_sketch_grad(sketch, x, d_s, acts, grads)
        return total, grads

    loss, grads = evaluate()
    ginf = float(np.abs(grads).max()) if grads.size else 0.0
    trace.record(0, loss, ginf)
    best = (loss, params.copy())
    for step in range(1, cfg.max_steps + 1):
        if ginf <= cfg.grad_tol:
            break
        params = optimizer_step(state, params, grads, cfg)
        _set_sketch_params(sketch, params)
        loss, grads = evaluate()
        ginf = float(np.abs(grads).max()) if grads.size else 0.0
        trace.record(step, loss, ginf)
        if loss < best[0]:
            best = (loss, params.copy())
    if cfg.keep_best and trace.final_loss > best[0]:
        _set_sketch_params(sketch, best[1])
        trace.record(trace.steps[-1] + 1, best[0], trace.grad_inf[-1])
    return SketchTrainResult(sketch=sketch, trace=trace,
                             skipped_matrices=skipped_total)


# -- sparse COO text serialization --------------------------------------


def save_sketch_coo(sketch: SparseSketch, path) -> None:
    """Text format: header "ell n nnz_per_column", then "row col value"."""
    with open(path, "w") as fh:
        fh.write(f"{sketch.ell} {sketch.n} {sketch.nnz_per_column}\n")
        for c in range(sketch.n):
            for j in range(sketch.nnz_per_column):
                fh.write(
                    f"{int(sketch.positions[c, j])} {c} "
                    f"{float(sketch.values[c, j])!r}\n"
                )


def load_sketch_coo(path) -> SparseSketch:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    try:
        ell, n, nnz = (int(v) for v in lines[0].split())
        positions = np.zeros((n, nnz), dtype=np.int64)
        values = np.zeros((n, nnz))
        counts = np.zeros(n, dtype=np.int64)
        for ln in lines[1:]:
            r_s, c_s, v_s = ln.split()
            c = int(c_s)
            positions[c, counts[c]] = int(r_s)
            values[c, counts[c]] = float(v_s)
            counts[c] += 1
        if np.any(counts != nnz):
            raise MalformedFile(f"{path}: wrong entry count per column")
    except (ValueError, IndexError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return SparseSketch(ell, n, positions, values)
