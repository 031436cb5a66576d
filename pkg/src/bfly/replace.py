"""Dense-layer replacement: butterfly, small dense core, transposed butterfly.

The sandwich computes  y = J2t (core (J1 x))  with J1 (k1 x n1) and
J2 (k2 x n2) truncated butterflies and a dense (k2 x k1) core.  When the
butterflies are FJLT samples and core = J2 W J1t, the sandwich equals the
random approximation (J2t J2) W (J1t J1) of a reference matrix W.  Cost
per application is O(n log n + k1 k2) instead of n1 n2.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import linalg
from .butterfly import TruncatedButterfly, load_binary, save_binary
from .datagen import load_matrix, save_matrix
from .errors import DimensionMismatch, MalformedFile
from .fjlt import sample_fjlt
from .grad import ButterflyLayer, Chain, DenseLayer


@dataclass
class ButterflySandwich:
    """j1: k1 x n1 butterfly; core: k2 x k1 dense; j2: k2 x n2 butterfly
    applied transposed on the output side."""

    j1: TruncatedButterfly
    core: np.ndarray
    j2: TruncatedButterfly

    def __post_init__(self):
        self.core = np.ascontiguousarray(self.core, dtype=np.float64)
        k2, k1 = self.core.shape
        if self.j1.ell != k1:
            raise DimensionMismatch(f"core expects k1={k1}, J1 gives {self.j1.ell}")
        if self.j2.ell != k2:
            raise DimensionMismatch(f"core gives k2={k2}, J2 expects {self.j2.ell}")

    @property
    def shape(self) -> tuple[int, int]:
        """(n2, n1): the dense layer being replaced."""
        return (self.j2.n_in, self.j1.n_in)

    def chain(self) -> Chain:
        return Chain([
            ButterflyLayer("input_butterfly", self.j1),
            DenseLayer("core", self.core),
            ButterflyLayer("output_butterfly", self.j2, transpose=True),
        ])


def default_k(n: int) -> int:
    """ceil(log2 n), the default core width for an n-wide stage."""
    return max(1, math.ceil(math.log2(max(n, 2))))


def sandwich_from_fjlt(w: np.ndarray, k1: int | None = None,
                       k2: int | None = None, rng=None) -> ButterflySandwich:
    """Initialize the sandwich from a reference matrix W: sample FJLT
    J1, J2 and set core = J2 W J1t, so the sandwich operator equals
    (J2t J2) W (J1t J1)."""
    w = linalg.as_matrix(w)
    n2, n1 = w.shape
    k1 = default_k(n1) if k1 is None else k1
    k2 = default_k(n2) if k2 is None else k2
    j1 = sample_fjlt(n1, k1, rng)
    j2 = sample_fjlt(n2, k2, rng)
    # core = J2 W J1t, built structurally: (J1 Wt)t is W J1t.
    w_j1t = j1.apply(w.T).T
    core = j2.apply(w_j1t)
    return ButterflySandwich(j1=j1, core=core, j2=j2)


def sandwich_random(n1: int, n2: int, k1: int | None = None,
                    k2: int | None = None, rng=None) -> ButterflySandwich:
    """Fresh-training initialization: FJLT butterflies, core uniform on
    +-1/sqrt(k1)."""
    k1 = default_k(n1) if k1 is None else k1
    k2 = default_k(n2) if k2 is None else k2
    j1 = sample_fjlt(n1, k1, rng)
    j2 = sample_fjlt(n2, k2, rng)
    core = (2.0 * rng.uniforms(k2 * k1).reshape(k2, k1) - 1.0) / math.sqrt(k1)
    return ButterflySandwich(j1=j1, core=core, j2=j2)


def sandwich_apply(s: ButterflySandwich, x: np.ndarray) -> np.ndarray:
    return s.j2.apply_adjoint(s.core @ s.j1.apply(x))


def sandwich_materialize(s: ButterflySandwich) -> np.ndarray:
    return s.j2.materialize().T @ s.core @ s.j1.materialize()


def sandwich_param_count(s: ButterflySandwich) -> int:
    """Core size plus effective butterfly weights."""
    return (s.core.size + s.j1.effective_weight_count()
            + s.j2.effective_weight_count())


def dense_param_count(s: ButterflySandwich) -> int:
    return s.j1.n_in * s.j2.n_in


_MANIFEST = "sandwich.json"


def save_sandwich(s: ButterflySandwich, directory) -> None:
    """Bundle: two butterfly files, one core matrix, and a manifest."""
    os.makedirs(directory, exist_ok=True)
    save_binary(s.j1, os.path.join(directory, "input_butterfly.bfly"))
    save_binary(s.j2, os.path.join(directory, "output_butterfly.bfly"))
    save_matrix(s.core, os.path.join(directory, "core.dmat"))
    manifest = {
        "format": "bfly-sandwich-1",
        "n1": s.j1.n_in,
        "n2": s.j2.n_in,
        "k1": s.j1.ell,
        "k2": s.j2.ell,
        "files": {
            "input_butterfly": "input_butterfly.bfly",
            "output_butterfly": "output_butterfly.bfly",
            "core": "core.dmat",
        },
    }
    with open(os.path.join(directory, _MANIFEST), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_sandwich(directory) -> ButterflySandwich:
    try:
        with open(os.path.join(directory, _MANIFEST)) as fh:
            manifest = json.load(fh)
        if manifest.get("format") != "bfly-sandwich-1":
            raise MalformedFile(f"{directory}: unrecognized manifest format")
        files = manifest["files"]
        j1 = load_binary(os.path.join(directory, files["input_butterfly"]))
        j2 = load_binary(os.path.join(directory, files["output_butterfly"]))
        core = load_matrix(os.path.join(directory, files["core"]))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{directory}: {exc}") from exc
    return ButterflySandwich(j1=j1, core=core, j2=j2)
