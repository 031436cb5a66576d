"""Synthetic data generators and matrix file I/O.

Rank-r Gaussian matrices follow the synthetic construction used in the
autoencoder experiments: r random orthonormal directions, columns formed
by combining them with independent N(0, 0.01) coefficients.

File formats:
  * CSV: first line "rows,cols", then one comma-separated row per line.
    Values are written with repr(), which round-trips float64 exactly.
  * Binary: magic "DMAT1", u64 rows, u64 cols (little endian), then
    row-major little-endian float64 payload.  Round-trips bit exactly.
`save_matrix`/`load_matrix` pick the format from the ".csv" suffix when
writing and from the magic bytes when reading.
"""

from __future__ import annotations

import struct

import numpy as np

from . import linalg
from .errors import InvalidRank, MalformedFile, ZeroMatrix

_MAGIC = b"DMAT1"


def gaussian_rank_r(n: int, d: int, r: int, rng) -> np.ndarray:
    """n x d matrix of exact rank r with N(0, 0.01) combination weights."""
    if not 1 <= r <= min(n, d):
        raise InvalidRank(f"r={r} outside [1, {min(n, d)}]")
    basis = rng.normals(n * r).reshape(n, r)
    q, _ = np.linalg.qr(basis)
    coeffs = 0.1 * rng.normals(r * d).reshape(r, d)
    return q @ coeffs


def noisy_rank_r(n: int, d: int, r: int, noise: float, rng) -> np.ndarray:
    """Rank-r Gaussian matrix plus i.i.d. N(0, noise^2) entries."""
    x = gaussian_rank_r(n, d, r, rng)
    if noise > 0:
        x = x + noise * rng.normals(n * d).reshape(n, d)
    return x


def spectral_family(n: int, d: int, r: int, tail: float, decay: float,
                    noise: float, count: int, rng) -> list[np.ndarray]:
    """Matrices sharing a population row structure: r dominant directions
    plus a polynomial spectral tail, fresh Gaussian coefficients per
    matrix, optional i.i.d. observation noise.

    Models the transform-domain energy compaction of natural data sets
    (a few strong components, slowly decaying remainder); the shared
    structure is what a learned sketching operator can exploit, while the
    per-matrix noise is unlearnable.
    """
    if not 1 <= r <= n:
        raise InvalidRank(f"r={r} outside [1, {n}]")
    basis = rng.normals(n * n).reshape(n, n)
    q, _ = np.linalg.qr(basis)
    sigma = np.ones(n)
    j = np.arange(r, n, dtype=np.float64)
    sigma[r:] = tail * (j - r + 1.0) ** (-decay)
    mixer = q * sigma
    out = []
    scale = 1.0 / np.sqrt(d)
    for _ in range(count):
        x = mixer @ (scale * rng.normals(n * d).reshape(n, d))
        if noise > 0:
            x = x + noise * rng.normals(n * d).reshape(n, d)
        out.append(x)
    return out


def permute_rows(x: np.ndarray, rng) -> np.ndarray:
    """Uniformly random row permutation (spectrum preserving)."""
    x = linalg.as_matrix(x)
    return x[rng.permutation(x.shape[0])]


def normalize_top_singular(mats) -> list[np.ndarray]:
    """Scale each matrix so its top singular value is 1."""
    out = []
    for x in mats:
        x = linalg.as_matrix(x)
        top = linalg.spectral_norm(x)
        if top <= 0.0:
            raise ZeroMatrix("cannot normalize an all-zero matrix")
        out.append(x / top)
    return out


def save_matrix(x: np.ndarray, path) -> None:
    x = linalg.as_matrix(x)
    if str(path).endswith(".csv"):
        _save_csv(x, path)
    else:
        _save_binary(x, path)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
    if head == _MAGIC:
        return _load_binary(path)
    return _load_csv(path)


def _save_csv(x: np.ndarray, path) -> None:
    rows, cols = x.shape
    with open(path, "w") as fh:
        fh.write(f"{rows},{cols}\n")
        for row in x:
            fh.write(",".join(repr(v) for v in row.tolist()) + "\n")


def _load_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
    except ValueError as exc:
        raise MalformedFile(f"{path}: bad header {lines[0]!r}") from exc
    if len(lines) - 1 != rows:
        raise MalformedFile(f"{path}: expected {rows} rows, found {len(lines) - 1}")
    data = np.empty((rows, cols))
    for i, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        if len(parts) != cols:
            raise MalformedFile(f"{path}: row {i} has {len(parts)} values, want {cols}")
        try:
            data[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise MalformedFile(f"{path}: row {i}: {exc}") from exc
    if not np.all(np.isfinite(data)):
        raise MalformedFile(f"{path}: non-finite entries")
    return data


def _save_binary(x: np.ndarray, path) -> None:
    rows, cols = x.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(x.astype("<f8").tobytes())


def _load_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise MalformedFile(f"{path}: bad magic")
    try:
        rows, cols = struct.unpack_from("<QQ", blob, len(_MAGIC))
    except struct.error as exc:
        raise MalformedFile(f"{path}: truncated header") from exc
    off = len(_MAGIC) + 16
    if len(blob) != off + 8 * rows * cols:
        raise MalformedFile(f"{path}: payload size mismatch")
    data = np.frombuffer(blob, dtype="<f8", offset=off).reshape(rows, cols).copy()
    if not np.all(np.isfinite(data)):
        raise MalformedFile(f"{path}: non-finite entries")
    return data
