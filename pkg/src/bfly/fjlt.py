"""Fast Johnson-Lindenstrauss transforms realized as truncated butterflies.

A sample is the Walsh-Hadamard butterfly with independent Rademacher signs
folded into the first layer's input columns, a frozen uniformly-sampled
kept set of size ell, and scale sqrt(n'/ell) so that E[Jt J] = I.  Every
entry of the materialized operator then has magnitude exactly 1/sqrt(ell).

Draw order per sample is fixed (signs, then kept subset) so that seeded
experiments are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .butterfly import ButterflyNetwork, TruncatedButterfly, next_pow2
from .errors import DimensionMismatch, InvalidDims, NotUnitVector
from .rng import Rng


@dataclass(frozen=True)
class FjltSpec:
    """Sampling parameters: logical input width n, target dimension ell."""

    n: int
    ell: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or not 1 <= self.ell <= next_pow2(self.n):
            raise InvalidDims(f"need 1 <= ell <= next_pow2(n), got {self}")

    def sample(self) -> TruncatedButterfly:
        return sample_fjlt(self.n, self.ell, Rng(self.seed))


def sample_fjlt(n: int, ell: int, rng) -> TruncatedButterfly:
    """Draw one FJLT operator (ell x n truncated butterfly)."""
    if n < 1:
        raise InvalidDims(f"n={n} must be positive")
    n_pow2 = next_pow2(n)
    if not 1 <= ell <= n_pow2:
        raise InvalidDims(f"ell={ell} outside [1, {n_pow2}]")
    net = ButterflyNetwork.hadamard(n_pow2)
    signs = rng.rademacher(n_pow2)
    if net.depth > 0:
        lo, hi = net._pairs[0]
        w0 = net.weights[0]
        w0[:, 0] *= signs[lo]
        w0[:, 2] *= signs[lo]
        w0[:, 1] *= signs[hi]
        w0[:, 3] *= signs[hi]
    kept = rng.subset(n_pow2, ell)
    scale = math.sqrt(n_pow2 / ell)
    return TruncatedButterfly(net, n_in=n, kept=kept, scale=scale)


def _check_unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if abs(norm - 1.0) > 1e-10:
        raise NotUnitVector(f"|x| = {norm!r}, expected 1 within 1e-10")
    return x


def jl_distortion(j: TruncatedButterfly, x: np.ndarray) -> float:
    """Reconstruction error |x - Jt J x| for a unit vector x.

    Zero exactly when ell = n' (the operator is orthogonal up to scale);
    for ell < n' it is bounded below by the distance from x to the
    ell-dimensional row space, so it is *not* small in general.
    """
    x = _check_unit(x)
    return float(np.linalg.norm(x - j.apply_adjoint(j.apply(x))))


def norm_distortion(j: TruncatedButterfly, x: np.ndarray) -> float:
    """Squared-norm distortion | |Jx|^2 - |x|^2 | for unit x.

    This is the Johnson-Lindenstrauss isometry defect; for an FJLT sample
    it concentrates as exp(-Omega(ell eps^2)).
    """
    x = _check_unit(x)
    y = j.apply(x)
    return abs(float(np.dot(y, y)) - 1.0)


def estimate_failure_rate(n: int, ell: int, eps: float, trials: int, rng) -> float:
    """Fraction of (fresh J, fresh unit x) trials with JL distortion > eps.

    Distortion here is the squared-norm defect |Jx|^2 vs |x|^2 measured by
    `norm_distortion`; the reconstruction form is available separately as
    `jl_distortion` but admits no nontrivial failure rate for ell << n.
    """
    if trials < 100:
        raise ValueError(f"trials={trials} must be >= 100")
    failures = 0
    for _ in range(trials):
        j = sample_fjlt(n, ell, rng)
        x = rng.unit_vector(n)
        if norm_distortion(j, x) > eps:
            failures += 1
    return failures / trials


class ApproxOperator:
    """The random operator (J2t J2) W (J1t J1) approximating W's action."""

    def __init__(self, w: np.ndarray, j1: TruncatedButterfly,
                 j2: TruncatedButterfly):
        w = linalg.as_matrix(w)
        n2, n1 = w.shape
        if j1.n_in != n1:
            raise DimensionMismatch(f"J1 expects width {j1.n_in}, W has {n1} cols")
        if j2.n_in != n2:
            raise DimensionMismatch(f"J2 expects width {j2.n_in}, W has {n2} rows")
        self.w = w
        self.j1 = j1
        self.j2 = j2

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Structural evaluation, O(n log n) butterfly work plus one matmul."""
        z = self.j1.apply_adjoint(self.j1.apply(x))
        return self.j2.apply_adjoint(self.j2.apply(self.w @ z))

    def materialize(self) -> np.ndarray:
        m1 = self.j1.materialize()
        m2 = self.j2.materialize()
        return m2.T @ m2 @ self.w @ (m1.T @ m1)


def approx_operator(w: np.ndarray, j1: TruncatedButterfly,
                    j2: TruncatedButterfly) -> ApproxOperator:
    return ApproxOperator(w, j1, j2)


def approx_success_rate(w: np.ndarray, eps: float, k1: int, k2: int,
                       trials: int, rng) -> float:
    """Fraction of trials with |W'x - Wx| <= 3 eps |W|_2.

    Fresh J1, J2 and a fresh random unit x per trial; |W|_2 from the SVD.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps={eps} must be in (0, 1)")
    w = linalg.as_matrix(w)
    n2, n1 = w.shape
    spec_norm = linalg.spectral_norm(w)
    threshold = 3.0 * eps * spec_norm
    successes = 0
    for _ in range(trials):
        j1 = sample_fjlt(n1, k1, rng)
        j2 = sample_fjlt(n2, k2, rng)
        x = rng.unit_vector(n1)
        op = ApproxOperator(w, j1, j2)
        err = float(np.linalg.norm(op.apply(x) - w @ x))
        if err <= threshold:
            successes += 1
    return successes / trials
