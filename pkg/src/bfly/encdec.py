"""Linear encoder-decoder with a butterfly front end.

The model computes Yhat = decoder @ mixer @ B(X) where `decoder` (m x k)
and `mixer` (k x ell) are dense and B is an (ell x n) truncated butterfly.
The training objective is |Yhat - Y|_F^2.

At any point where the dense-factor gradients vanish, the loss is
tr(Y Yt) minus a subset of eigenvalues of the spectral object

    Sigma(B) = Y Xt~ (X~ X~t)^+ X~ Yt,     X~ = B X,

and at a local minimum that subset is the top k.  `verify_critical_point`
checks this numerically.  Two conventions to note:

  * We use the pseudoinverse of X~ X~t throughout.  With exactly low-rank
    data X~ X~t is singular, but the critical-point identities survive
    because gradient updates never move the mixer inside ker(X~t); the
    strict invertibility check is available via `strict=True`.
  * Gradients here are for the plain squared loss (no 1/2 factor), so
    they are exactly twice those of the half-loss convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .butterfly import TruncatedButterfly, next_pow2
from .errors import (
    DegenerateSpectrum,
    DimensionMismatch,
    InvalidIndexSet,
    NotAtCriticalPoint,
    RankDeficientSketch,
)
from .fjlt import sample_fjlt
from .grad import ButterflyLayer, Chain, DenseLayer, TrainConfig, TrainTrace, train


class EncDecButterfly:
    """Container for the three trainable stages."""

    def __init__(self, decoder: np.ndarray, mixer: np.ndarray,
                 bfly: TruncatedButterfly):
        decoder = np.ascontiguousarray(decoder, dtype=np.float64)
        mixer = np.ascontiguousarray(mixer, dtype=np.float64)
        m, k = decoder.shape
        k2, ell = mixer.shape
        if k != k2:
            raise DimensionMismatch(f"decoder k={k} vs mixer k={k2}")
        if ell != bfly.ell:
            raise DimensionMismatch(f"mixer ell={ell} vs butterfly ell={bfly.ell}")
        if k > ell:
            raise DimensionMismatch(f"need k <= ell, got k={k}, ell={ell}")
        self.decoder = decoder
        self.mixer = mixer
        self.bfly = bfly

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(m, k, ell, n)."""
        return (self.decoder.shape[0], self.decoder.shape[1],
                self.mixer.shape[1], self.bfly.n_in)

    def chain(self) -> Chain:
        return Chain([
            ButterflyLayer("butterfly", self.bfly),
            DenseLayer("mixer", self.mixer),
            DenseLayer("decoder", self.decoder),
        ])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.decoder @ (self.mixer @ self.bfly.apply(x))


def random_model(m: int, k: int, ell: int, n: int, rng) -> EncDecButterfly:
    """FJLT-sampled butterfly; dense stages uniform on +-1/sqrt(fan_in)."""
    bfly = sample_fjlt(n, ell, rng)
    mixer = (2.0 * rng.uniforms(k * ell).reshape(k, ell) - 1.0) / math.sqrt(ell)
    decoder = (2.0 * rng.uniforms(m * k).reshape(m, k) - 1.0) / math.sqrt(k)
    return EncDecButterfly(decoder, mixer, bfly)


def encdec_loss(model: EncDecButterfly, x: np.ndarray, y: np.ndarray) -> float:
    return linalg.fro_norm_sq(model.predict(x) - y)


def analytic_dense_grads(model: EncDecButterfly, x: np.ndarray, y: np.ndarray):
    """Closed-form dense-stage gradients of |Yhat - Y|_F^2.

    With X~ = B X and r = Yhat - Y:  dL/dDecoder = 2 r (mixer X~)t and
    dL/dMixer = 2 decoder_t r X~t.
    """
    x_t = model.bfly.apply(x)
    mid = model.mixer @ x_t
    resid = model.decoder @ mid - y
    g_dec = 2.0 * resid @ mid.T
    g_mix = 2.0 * model.decoder.T @ resid @ x_t.T
    return g_dec, g_mix


def sketched_output_gram(bfly: TruncatedButterfly, x: np.ndarray,
                         y: np.ndarray, rcond: float = 1e-12,
                         strict: bool = False) -> np.ndarray:
    """Sigma(B) = Y X~t (X~ X~t)^+ X~ Yt, symmetrized.

    strict=True enforces invertibility of X~ X~t and raises
    RankDeficientSketch when its smallest singular value is below
    rcond * largest (always the case for exactly low-rank data).
    """
    x = linalg.as_matrix(x)
    y = linalg.as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"X has {x.shape[1]} columns, Y has {y.shape[1]}")
    x_t = bfly.apply(x)
    gram = x_t @ x_t.T
    if strict:
        s = linalg.svd(gram).s
        if s.size == 0 or s[-1] < rcond * s[0]:
            raise RankDeficientSketch(
                f"smallest singular value {s[-1] if s.size else 0.0:.3e} below "
                f"rcond * largest: the sketched Gram matrix is not invertible"
            )
    core = y @ x_t.T @ linalg.pinv(gram, rcond=rcond) @ x_t @ y.T
    return (core + core.T) / 2.0


def predicted_loss(sigma: np.ndarray, index_set, y: np.ndarray) -> float:
    """tr(Y Yt) - sum of the selected eigenvalues of Sigma (0-based indices)."""
    sigma = linalg.as_matrix(sigma)
    values, _ = linalg.sym_eig(sigma)
    indices = sorted(int(i) for i in index_set)
    if len(indices) != len(set(indices)):
        raise InvalidIndexSet("duplicate indices")
    if indices and (indices[0] < 0 or indices[-1] >= values.size):
        raise InvalidIndexSet(f"indices out of [0, {values.size})")
    return linalg.fro_norm_sq(y) - float(sum(values[i] for i in indices))


@dataclass
class CriticalPointReport:
    """Numerical check of the critical-point loss formula.

    `eigen_indices` are 0-based positions into the nonincreasing eigenvalue
    list; a local-minimum candidate selects exactly the top k of them.
    """

    loss: float
    eigenvalues: np.ndarray
    eigen_indices: tuple
    projection_energies: np.ndarray
    predicted_loss: float
    projection_residual: float
    commutator_residual: float
    is_local_min_candidate: bool
    grad_inf_norm: float

    def loss_formula_error(self) -> float:
        return abs(self.loss - self.predicted_loss)

    def to_json(self) -> str:
        return json.dumps(
            {
                "loss": self.loss,
                "eigenvalues": self.eigenvalues.tolist(),
                "eigen_indices": list(self.eigen_indices),
                "projection_energies": self.projection_energies.tolist(),
                "predicted_loss": self.predicted_loss,
                "projection_residual": self.projection_residual,
                "commutator_residual": self.commutator_residual,
                "is_local_min_candidate": self.is_local_min_candidate,
                "grad_inf_norm": self.grad_inf_norm,
            },
            sort_keys=True,
        )


def verify_critical_point(model: EncDecButterfly, x: np.ndarray, y: np.ndarray,
                          tol: float, rcond: float = 1e-12,
                          gap_tol: float = 1e-8) -> CriticalPointReport:
    """Check the eigenvalue loss formula at a trained point.

    Preconditions: max|grad| over the dense stages <= tol (the butterfly
    may be anything).  Raises NotAtCriticalPoint otherwise, and
    DegenerateSpectrum when consecutive positive eigenvalues of Sigma are
    closer than gap_tol * lambda_1 (the zero block of a rank-deficient
    Sigma is not subject to the gap test; only the positive eigenvalues
    identify the index set).
    """
    g_dec, g_mix = analytic_dense_grads(model, x, y)
    ginf = max(float(np.abs(g_dec).max()), float(np.abs(g_mix).max()))
    if ginf > tol:
        raise NotAtCriticalPoint(f"max|grad| = {ginf:.3e} exceeds tol {tol:.3e}")
    m, k, ell, _ = model.dims
    sigma = sketched_output_gram(model.bfly, x, y, rcond=rcond)
    values, vectors = linalg.sym_eig(sigma)
    lam1 = float(values[0]) if values.size else 0.0
    n_pos = int(np.sum(values > max(lam1, 0.0) * 1e-10)) if lam1 > 0 else 0
    if n_pos >= 2:
        gaps = np.diff(values[:n_pos])
        if np.any(-gaps < gap_tol * lam1):
            raise DegenerateSpectrum(
                f"min positive-eigenvalue gap below {gap_tol:.1e} * lambda_1"
            )
    dec_svd = linalg.svd(model.decoder)
    rank_d = linalg.numerical_rank(dec_svd.s, rcond=1e-10)
    basis = dec_svd.u[:, :rank_d]
    lead = vectors[:, :ell]
    energies = np.sum((basis.T @ lead) ** 2, axis=0) if rank_d else np.zeros(ell)
    order = np.argsort(-energies, kind="stable")
    selected = tuple(sorted(int(i) for i in order[:rank_d]))
    x_t = model.bfly.apply(x)
    gram_pinv = linalg.pinv(x_t @ x_t.T, rcond=rcond)
    proj = basis @ basis.T
    proj_resid = math.sqrt(linalg.fro_norm_sq(
        model.decoder @ model.mixer - proj @ y @ x_t.T @ gram_pinv
    ))
    commutator = math.sqrt(linalg.fro_norm_sq(proj @ sigma - sigma @ proj))
    t_loss = linalg.fro_norm_sq(y) - float(np.sum(values[list(selected)]))
    return CriticalPointReport(
        loss=encdec_loss(model, x, y),
        eigenvalues=values,
        eigen_indices=selected,
        projection_energies=energies,
        predicted_loss=t_loss,
        projection_residual=proj_resid,
        commutator_residual=commutator,
        is_local_min_candidate=(selected == tuple(range(k))),
        grad_inf_norm=ginf,
    )


@dataclass
class TwoPhaseResult:
    model: EncDecButterfly
    phase1_trace: TrainTrace
    phase1_report: CriticalPointReport | None
    phase1_report_failure: str | None
    phase2_trace: TrainTrace

    @property
    def phase1_loss(self) -> float:
        return self.phase1_trace.final_loss

    @property
    def phase2_loss(self) -> float:
        return self.phase2_trace.final_loss


def anneal_train(chain: Chain, x, y, cfg: TrainConfig,
                 lr_factors=(1.0,)) -> TrainTrace:
    """Run `train` repeatedly with a decaying learning-rate ladder."""
    trace = TrainTrace()
    for i, factor in enumerate(lr_factors):
        stage = train(chain, x, y,
                      cfg.replace(learning_rate=cfg.learning_rate * factor))
        if i == 0:
            trace = stage
        else:
            trace.extend(stage)
        if stage.final_grad_inf <= cfg.grad_tol:
            break
    return trace


def gd_polish(chain: Chain, x, y, freeze, grad_tol: float, lr: float,
              max_steps: int, shrink: int = 8) -> TrainTrace:
    """Plain gradient descent to drive max|grad| below a tight tolerance.

    Unlike Adam, constant-step gradient descent has vanishing gradients at
    its limit, so it can polish to 1e-9-scale tolerances.  A diverging
    stage (loss increase or non-finite loss) is rolled back and retried
    with a smaller step.
    """
    from .errors import NonFiniteLoss

    layout = chain.layout(freeze)
    trace = TrainTrace()
    first = True
    for _ in range(shrink):
        snapshot = chain.get_params(layout)
        cfg = TrainConfig(optimizer="sgd", learning_rate=lr,
                          max_steps=max_steps, grad_tol=grad_tol,
                          freeze=freeze)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                stage = train(chain, x, y, cfg)
        except NonFiniteLoss:
            chain.set_params(layout, snapshot)
            lr *= 0.1
            continue
        if len(stage.losses) > 1 and stage.final_loss > stage.losses[0]:
            chain.set_params(layout, snapshot)
            lr *= 0.25
            continue
        if first:
            trace = stage
            first = False
        else:
            trace.extend(stage)
        if stage.final_grad_inf <= grad_tol:
            break
        lr *= 0.5
    return trace


def two_phase_train(x: np.ndarray, y: np.ndarray, k: int, ell: int,
                    cfg: TrainConfig, rng,
                    anneal=(1.0, 0.1, 0.01),
                    phase2_factor: float = 0.1,
                    phase2_cfg: TrainConfig | None = None) -> TwoPhaseResult:
    """Phase 1 trains the dense stages against a frozen FJLT butterfly;
    phase 2 unfreezes everything, continuing from the phase-1 point with
    best-iterate retention so the final loss never exceeds phase 1's."""
    x = linalg.as_matrix(x)
    y = linalg.as_matrix(y)
    n = x.shape[0]
    if not 1 <= k <= ell <= next_pow2(n):
        raise DimensionMismatch(f"need 1 <= k <= ell <= n'={next_pow2(n)}")
    model = random_model(y.shape[0], k, ell, n, rng)
    chain = model.chain()
    cfg1 = cfg.replace(freeze=cfg.freeze | frozenset({"butterfly"}))
    trace1 = anneal_train(chain, x, y, cfg1, lr_factors=anneal)
    report = None
    failure = None
    try:
        report = verify_critical_point(
            model, x, y, tol=trace1.final_grad_inf * (1.0 + 1e-9) + 1e-300
        )
    except (DegenerateSpectrum, RankDeficientSketch, NotAtCriticalPoint) as exc:
        failure = f"{type(exc).__name__}: {exc}"
    if phase2_cfg is None:
        phase2_cfg = cfg.replace(
            learning_rate=cfg.learning_rate * phase2_factor, keep_best=True
        )
    else:
        phase2_cfg = phase2_cfg.replace(keep_best=True)
    # keep_best seeds its best-so-far with the step-0 point (the phase-1
    # endpoint), so phase 2 can never end above the phase-1 loss.
    trace2 = train(chain, x, y, phase2_cfg)
    return TwoPhaseResult(model, trace1, report, failure, trace2)
