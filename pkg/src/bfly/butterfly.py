"""Butterfly networks: structured O(n log n) linear operators.

Indexing convention: positions are 0-based, so layer i couples index pairs
(j, j | 2^i) for every j whose bit i is zero.  Layer 0 is applied first,
i.e. the operator reads L_{p-1} ... L_1 L_0 acting on the input vector,
with p = log2(n').  Each gadget stores four weights (a, b, c, d) meaning

    out[lo] = a * in[lo] + b * in[hi]
    out[hi] = c * in[lo] + d * in[hi]

and gadgets within a layer are ordered by ascending lo index.  Under this
orientation the all-Hadamard network materializes the normalized Sylvester
Walsh-Hadamard matrix H[r, c] = (-1)^popcount(r & c) / sqrt(n').

A TruncatedButterfly keeps `ell` output rows of the final layer (a frozen,
sorted index set), exposes the first `n_in` input columns (inputs beyond
n_in are implicitly zero when n_in < n'), and carries a scalar `scale`.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InvalidLayer, MalformedFile, NotPowerOfTwo

_MAGIC = b"BFLY1"


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    """Smallest power of two >= n."""
    if n < 1:
        raise ValueError("n must be positive")
    return 1 << (n - 1).bit_length()


def layer_pairs(n_pow2: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """(lo, hi) index arrays for the gadgets of one layer, lo ascending."""
    if not is_pow2(n_pow2):
        raise NotPowerOfTwo(f"n'={n_pow2} is not a power of two")
    depth = n_pow2.bit_length() - 1
    if not 0 <= layer < depth:
        raise InvalidLayer(f"layer {layer} outside [0, {depth})")
    idx = np.arange(n_pow2)
    lo = idx[(idx >> layer) & 1 == 0]
    return lo, lo | (1 << layer)


def layer_connectivity(n_pow2: int, layer: int) -> list[tuple[int, int]]:
    """The layer's index pairs as a list of (lo, hi) tuples (0-based)."""
    lo, hi = layer_pairs(n_pow2, layer)
    return [(int(a), int(b)) for a, b in zip(lo, hi)]


class ButterflyNetwork:
    """Full n' x n' butterfly: depth = log2 n' layers of 2x2 gadgets.

    Weights live in a (depth, n'/2, 4) float64 array; slot order per gadget
    is (a, b, c, d).  The array is the trainable parameter storage and may
    be mutated in place by optimizers; apply/materialize never mutate it.
    """

    def __init__(self, weights: np.ndarray, n_pow2: int | None = None):
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        if weights.ndim != 3 or weights.shape[2] != 4:
            raise ValueError("weights must have shape (depth, n'/2, 4)")
        if n_pow2 is None:
            n_pow2 = 2 * weights.shape[1]
        elif n_pow2 != 1 and n_pow2 != 2 * weights.shape[1]:
            raise ValueError(f"n_pow2={n_pow2} inconsistent with weights shape")
        if not is_pow2(n_pow2):
            raise NotPowerOfTwo(f"n'={n_pow2} is not a power of two")
        depth = n_pow2.bit_length() - 1
        if weights.shape[0] != depth:
            raise ValueError(
                f"depth {weights.shape[0]} != log2(n')={depth} for n'={n_pow2}"
            )
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        self.n_pow2 = n_pow2
        self.depth = depth
        self.weights = weights
        self._pairs = [layer_pairs(n_pow2, i) for i in range(depth)]

    @classmethod
    def identity(cls, n_pow2: int) -> "ButterflyNetwork":
        depth = _checked_depth(n_pow2)
        w = np.zeros((depth, n_pow2 // 2, 4))
        w[:, :, 0] = 1.0
        w[:, :, 3] = 1.0
        return cls(w, n_pow2)

    @classmethod
    def hadamard(cls, n_pow2: int) -> "ButterflyNetwork":
        depth = _checked_depth(n_pow2)
        gadget = np.array([1.0, 1.0, 1.0, -1.0]) / np.sqrt(2.0)
        w = np.tile(gadget, (depth, n_pow2 // 2, 1))
        if depth == 0:
            w = np.zeros((0, 0, 4))
        return cls(w, n_pow2)

    @classmethod
    def random(cls, n_pow2: int, rng) -> "ButterflyNetwork":
        """Independent standard-normal gadget weights."""
        depth = _checked_depth(n_pow2)
        w = rng.normals(depth * (n_pow2 // 2) * 4).reshape(depth, n_pow2 // 2, 4)
        return cls(w, n_pow2)


def _checked_depth(n_pow2: int) -> int:
    if not is_pow2(n_pow2):
        raise NotPowerOfTwo(f"n'={n_pow2} is not a power of two")
    return n_pow2.bit_length() - 1


class TruncatedButterfly:
    """A butterfly network with a frozen kept-output set and a scale.

    Acts as an (ell x n_in) linear operator: pad the input to width n',
    run the layers, select the kept rows, multiply by scale.
    """

    def __init__(self, net: ButterflyNetwork, n_in: int | None = None,
                 kept: np.ndarray | None = None, scale: float = 1.0):
        n = net.n_pow2
        self.net = net
        self.n_in = n if n_in is None else int(n_in)
        if kept is None:
            kept = np.arange(n, dtype=np.int64)
        kept = np.asarray(kept, dtype=np.int64)
        if kept.ndim != 1 or kept.size == 0:
            raise ValueError("kept must be a nonempty 1-D index array")
        if np.any(np.diff(kept) <= 0):
            raise ValueError("kept indices must be strictly increasing")
        if kept[0] < 0 or kept[-1] >= n:
            raise ValueError(f"kept indices must lie in [0, {n})")
        if not 1 <= self.n_in <= n:
            raise ValueError(f"n_in={self.n_in} outside [1, {n}]")
        self.kept = kept
        self.scale = float(scale)

    @property
    def ell(self) -> int:
        return int(self.kept.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ell, self.n_in)

    # -- application ---------------------------------------------------

    def _pad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[0]
        if lead != self.n_in:
            raise _dim_error(self, lead)
        n = self.net.n_pow2
        if lead == n:
            return x.copy()
        z = np.zeros((n,) + x.shape[1:])
        z[:lead] = x
        return z

    def apply(self, x: np.ndarray) -> np.ndarray:
        """y = scale * Select_kept(L_{p-1} ... L_0 pad(x)); O(n' log n')."""
        z = self._pad(x)
        _run_layers(self.net, z, transpose=False)
        return self.scale * z[self.kept]

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Structural evaluation of materialize().T @ y."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != self.ell:
            raise _dim_error(self, y.shape[0], adjoint=True)
        n = self.net.n_pow2
        z = np.zeros((n,) + y.shape[1:])
        z[self.kept] = self.scale * y
        _run_layers(self.net, z, transpose=True)
        return z[: self.n_in]

    def materialize(self) -> np.ndarray:
        """Explicit (ell x n_in) matrix of the operator."""
        return self.apply(np.eye(self.n_in))

    # -- structure -----------------------------------------------------

    def effective_weight_count(self) -> int:
        """Weights lying on some input-to-kept-output path.

        Backward reachability over the layered DAG: a weight (edge) counts
        iff its head node can reach a kept output.  Always at most
        2 n' log2(ell) + 6 n', with equality 2 n' log2(n') when all
        outputs are kept.
        """
        net = self.net
        marked = np.zeros(net.n_pow2, dtype=bool)
        marked[self.kept] = True
        total = 0
        for li in range(net.depth - 1, -1, -1):
            total += 2 * int(np.count_nonzero(marked))
            lo, hi = net._pairs[li]
            reach = marked[lo] | marked[hi]
            marked[lo] = reach
            marked[hi] = reach
        return total

    def copy(self) -> "TruncatedButterfly":
        return TruncatedButterfly(
            ButterflyNetwork(self.net.weights.copy()),
            n_in=self.n_in, kept=self.kept.copy(), scale=self.scale,
        )


def _dim_error(tb: TruncatedButterfly, got: int, adjoint: bool = False):
    from .errors import DimensionMismatch

    want = tb.ell if adjoint else tb.n_in
    kind = "adjoint input" if adjoint else "input"
    return DimensionMismatch(f"{kind} length {got}, operator expects {want}")


def _run_layers(net: ButterflyNetwork, z: np.ndarray, transpose: bool) -> None:
    """Apply all layers (or their transposes, in reverse order) in place."""
    order = range(net.depth - 1, -1, -1) if transpose else range(net.depth)
    two_d = z.ndim == 2
    for li in order:
        lo, hi = net._pairs[li]
        w = net.weights[li]
        a, b, c, d = w[:, 0], w[:, 1], w[:, 2], w[:, 3]
        if two_d:
            a, b, c, d = a[:, None], b[:, None], c[:, None], d[:, None]
        zl = z[lo]
        zh = z[hi]
        if transpose:
            z[lo] = a * zl + c * zh
            z[hi] = b * zl + d * zh
        else:
            z[lo] = a * zl + b * zh
            z[hi] = c * zl + d * zh


def new_identity(n_pow2: int) -> TruncatedButterfly:
    """Untruncated butterfly computing the identity."""
    return TruncatedButterfly(ButterflyNetwork.identity(n_pow2))


def new_hadamard(n_pow2: int) -> TruncatedButterfly:
    """Untruncated butterfly computing the normalized Walsh-Hadamard transform."""
    return TruncatedButterfly(ButterflyNetwork.hadamard(n_pow2))


def random_truncated(n_pow2: int, n_in: int, ell: int, rng,
                     scale: float = 1.0) -> TruncatedButterfly:
    """Random-weight network with a uniformly sampled kept set."""
    net = ButterflyNetwork.random(n_pow2, rng)
    kept = rng.subset(n_pow2, ell)
    return TruncatedButterfly(net, n_in=n_in, kept=kept, scale=scale)


# -- gradient machinery (used by the training modules) -----------------


def forward_with_cache(tb: TruncatedButterfly, x: np.ndarray,
                       transpose: bool = False):
    """Run the operator, caching per-layer inputs for a backward pass.

    transpose=False computes tb.apply(x); transpose=True computes
    tb.apply_adjoint(x).  Returns (output, cache).
    """
    net = tb.net
    if transpose:
        y = np.asarray(x, dtype=np.float64)
        if y.shape[0] != tb.ell:
            raise _dim_error(tb, y.shape[0], adjoint=True)
        z = np.zeros((net.n_pow2,) + y.shape[1:])
        z[tb.kept] = tb.scale * y
        order = range(net.depth - 1, -1, -1)
    else:
        z = tb._pad(x)
        order = range(net.depth)
    acts: dict[int, np.ndarray] = {}
    two_d = z.ndim == 2
    for li in order:
        acts[li] = z.copy()
        lo, hi = net._pairs[li]
        w = net.weights[li]
        a, b, c, d = w[:, 0], w[:, 1], w[:, 2], w[:, 3]
        if two_d:
            a, b, c, d = a[:, None], b[:, None], c[:, None], d[:, None]
        zl = z[lo]
        zh = z[hi]
        if transpose:
            z[lo] = a * zl + c * zh
            z[hi] = b * zl + d * zh
        else:
            z[lo] = a * zl + b * zh
            z[hi] = c * zl + d * zh
    out = tb.scale * z[tb.kept] if not transpose else z[: tb.n_in]
    return out, acts


def backward_through(tb: TruncatedButterfly, acts: dict, d_out: np.ndarray,
                     transpose: bool = False):
    """Backward pass matching forward_with_cache.

    Returns (d_input, d_weights) where d_weights has the same shape as
    net.weights and only gadget slots receive gradient.
    """
    net = tb.net
    d_w = np.zeros_like(net.weights)
    d_out = np.asarray(d_out, dtype=np.float64)
    if transpose:
        dz = np.zeros((net.n_pow2,) + d_out.shape[1:])
        dz[: tb.n_in] = d_out
        order = range(net.depth)  # reverse of the transposed forward order
    else:
        dz = np.zeros((net.n_pow2,) + d_out.shape[1:])
        dz[tb.kept] = tb.scale * d_out
        order = range(net.depth - 1, -1, -1)
    two_d = dz.ndim == 2
    for li in order:
        lo, hi = net._pairs[li]
        w = net.weights[li]
        a, b, c, d = w[:, 0], w[:, 1], w[:, 2], w[:, 3]
        x = acts[li]
        xl = x[lo]
        xh = x[hi]
        gl = dz[lo]
        gh = dz[hi]
        if two_d:
            ac, bc, cc, dc = a[:, None], b[:, None], c[:, None], d[:, None]
            axis = 1
        else:
            ac, bc, cc, dc = a, b, c, d
            axis = None
        if transpose:
            # forward was: out_lo = a in_lo + c in_hi ; out_hi = b in_lo + d in_hi
            d_w[li, :, 0] = _rsum(gl * xl, axis)
            d_w[li, :, 2] = _rsum(gl * xh, axis)
            d_w[li, :, 1] = _rsum(gh * xl, axis)
            d_w[li, :, 3] = _rsum(gh * xh, axis)
            dz[lo] = ac * gl + bc * gh
            dz[hi] = cc * gl + dc * gh
        else:
            # forward was: out_lo = a in_lo + b in_hi ; out_hi = c in_lo + d in_hi
            d_w[li, :, 0] = _rsum(gl * xl, axis)
            d_w[li, :, 1] = _rsum(gl * xh, axis)
            d_w[li, :, 2] = _rsum(gh * xl, axis)
            d_w[li, :, 3] = _rsum(gh * xh, axis)
            dz[lo] = ac * gl + cc * gh
            dz[hi] = bc * gl + dc * gh
    if transpose:
        d_in = tb.scale * dz[tb.kept]
    else:
        d_in = dz[: tb.n_in]
    return d_in, d_w


def _rsum(v: np.ndarray, axis):
    return v.sum(axis=axis) if axis is not None else v


# -- serialization ------------------------------------------------------


def save_binary(tb: TruncatedButterfly, path) -> None:
    """Flat binary layout: magic BFLY1, u32 n', depth, n_in, ell,
    ell x u32 kept (0-based), f64 scale, then weights as little-endian f64
    in (layer, gadget, slot a..d) order."""
    net = tb.net
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", net.n_pow2, net.depth, tb.n_in, tb.ell))
        fh.write(tb.kept.astype("<u4").tobytes())
        fh.write(struct.pack("<d", tb.scale))
        fh.write(net.weights.astype("<f8").tobytes())


def load_binary(path) -> TruncatedButterfly:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise MalformedFile(f"{path}: bad magic")
    try:
        off = len(_MAGIC)
        n_pow2, depth, n_in, ell = struct.unpack_from("<4I", blob, off)
        off += 16
        kept = np.frombuffer(blob, dtype="<u4", count=ell, offset=off).astype(np.int64)
        off += 4 * ell
        (scale,) = struct.unpack_from("<d", blob, off)
        off += 8
        count = depth * (n_pow2 // 2) * 4
        w = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        if off + 8 * count != len(blob):
            raise MalformedFile(f"{path}: trailing or missing bytes")
        weights = w.reshape(depth, n_pow2 // 2, 4).copy()
    except (struct.error, ValueError) as exc:
        raise MalformedFile(f"{path}: truncated file ({exc})") from exc
    return TruncatedButterfly(ButterflyNetwork(weights), n_in=n_in,
                              kept=kept, scale=scale)


def to_json(tb: TruncatedButterfly) -> str:
    """Human-readable alternative to the binary format."""
    return json.dumps(
        {
            "format": "bfly-json-1",
            "n_pow2": tb.net.n_pow2,
            "depth": tb.net.depth,
            "n_in": tb.n_in,
            "kept": tb.kept.tolist(),
            "scale": tb.scale,
            "weights": tb.net.weights.tolist(),
        },
        sort_keys=True,
    )


def from_json(text: str) -> TruncatedButterfly:
    try:
        obj = json.loads(text)
        if obj.get("format") != "bfly-json-1":
            raise MalformedFile("unrecognized butterfly JSON format")
        weights = np.array(obj["weights"], dtype=np.float64)
        return TruncatedButterfly(
            ButterflyNetwork(weights),
            n_in=int(obj["n_in"]),
            kept=np.array(obj["kept"], dtype=np.int64),
            scale=float(obj["scale"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"bad butterfly JSON: {exc}") from exc
