"""Codebook-based and scalar quantizers.

Covers plain and residual k-means, product splitting, finite scalar
quantization (FSQ), line-structured codebooks (groups of colinear
codewords), and discrete-PCA stacks (residual layers of learned component
vectors with a ternary {-1, 0, +1} scalar codebook, optionally in parallel
product groups).

All assign/encode/decode functions are pure over immutable codebooks and
accept either a single vector or a row-major batch of vectors. Ties are
broken toward the lower index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn_core import DTYPE, load_checkpoint, save_checkpoint


class QuantizerError(ValueError):
    pass


def _rows(x):
    """Coerce input to a (n, d) float32 matrix, remembering if it was 1-D."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        return arr.reshape(1, -1), True
    if arr.ndim != 2:
        raise QuantizerError(f"expected vector or matrix, got ndim={arr.ndim}")
    return arr, False


def _round_half_away(x):
    # np.round is round-half-even; the scalar grids need half-away-from-zero.
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansCodebook:
    """Centroid table from Lloyd's algorithm.

    `degenerate` flags a corpus whose rows were all identical, in which
    case the centroids are k copies of that row.
    """

    centroids: np.ndarray
    degenerate: bool = False
    objective_history: list = field(default_factory=list)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def d(self):
        return self.centroids.shape[1]


def _sq_dists(x, centroids):
    # ||x||^2 - 2 x.C^T + ||c||^2, clipped at 0 against rounding.
    d2 = (
        np.einsum("ij,ij->i", x, x)[:, None]
        - 2.0 * (x @ centroids.T)
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans_fit(corpus, k, iters=25, seed=0):
    """Lloyd's algorithm with farthest-point reseeding of empty clusters.

    The within-cluster sum of squares is recorded once per iteration and
    is non-increasing: reseeding relocates an unused centroid onto the
    point currently farthest from its assigned centroid, which can only
    shrink nearest-centroid distances.
    """
    x, _ = _rows(corpus)
    n = x.shape[0]
    if k < 1:
        raise QuantizerError(f"k must be >= 1, got {k}")
    if k > n:
        raise QuantizerError(f"k={k} exceeds corpus rows={n}")
    if iters < 1:
        raise QuantizerError(f"iters must be >= 1, got {iters}")

    if np.all(x == x[0]):
        return KMeansCodebook(np.repeat(x[:1], k, axis=0).copy(),
                              degenerate=True, objective_history=[0.0])

    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    history = []
    for _ in range(iters):
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), assign]
        for c in range(k):
            mask = assign == c
            if mask.any():
                centroids[c] = x[mask].mean(axis=0, dtype=np.float64)
            else:
                far = int(point_d2.argmax())
                centroids[c] = x[far]
                point_d2[far] = 0.0  # claimed; next empty cluster picks elsewhere
        d2 = _sq_dists(x, centroids)
        history.append(float(d2.min(axis=1).sum()))
    return KMeansCodebook(centroids.astype(DTYPE), objective_history=history)


def kmeans_assign(codebook, x):
    """Index of the nearest centroid by Euclidean distance (lowest wins ties)."""
    rows, single = _rows(x)
    if rows.shape[1] != codebook.d:
        raise QuantizerError(
            f"dimension mismatch: input has {rows.shape[1]}, codebook {codebook.d}")
    idx = _sq_dists(rows, codebook.centroids).argmin(axis=1)
    return int(idx[0]) if single else idx


def kmeans_assign_topk(codebook, x, k):
    """The k nearest centroid indices, ascending by distance then index."""
    rows, single = _rows(x)
    if rows.shape[1] != codebook.d:
        raise QuantizerError(
            f"dimension mismatch: input has {rows.shape[1]}, codebook {codebook.d}")
    if k > codebook.k:
        raise QuantizerError(f"top-{k} requested from {codebook.k} centroids")
    d2 = _sq_dists(rows, codebook.centroids)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order[0] if single else order


def residual_fit(corpus, k, depth, iters=25, seed=0):
    """Stack of k-means codebooks, each fitted on the previous residuals."""
    x, _ = _rows(corpus)
    stack = []
    residual = x.copy()
    for layer in range(depth):
        cb = kmeans_fit(residual, k, iters=iters, seed=seed + layer)
        stack.append(cb)
        residual = residual - cb.centroids[kmeans_assign(cb, residual)]
    return stack


def residual_quantize(stack, x):
    """Greedy layer-by-layer assignment against a residual codebook stack.

    Returns (indices, reconstruction); the reconstruction is the sum of
    the selected codeword from every layer.
    """
    rows, single = _rows(x)
    d = stack[0].d
    for cb in stack:
        if cb.d != d:
            raise QuantizerError("codebook stack has inconsistent dimensions")
    if rows.shape[1] != d:
        raise QuantizerError(
            f"dimension mismatch: input has {rows.shape[1]}, stack {d}")
    residual = rows.copy()
    recon = np.zeros_like(rows)
    indices = np.empty((rows.shape[0], len(stack)), dtype=np.int64)
    for layer, cb in enumerate(stack):
        idx = kmeans_assign(cb, residual)
        idx = np.atleast_1d(idx)
        chosen = cb.centroids[idx]
        residual -= chosen
        recon += chosen
        indices[:, layer] = idx
    if single:
        return indices[0], recon[0]
    return indices, recon


# ---------------------------------------------------------------------------
# Product grouping


def product_split(x, groups):
    """Split the trailing dimension into `groups` contiguous equal slices."""
    arr = np.asarray(x)
    d = arr.shape[-1]
    if d % groups != 0:
        raise QuantizerError(f"{groups} groups do not divide dimension {d}")
    w = d // groups
    return [arr[..., g * w:(g + 1) * w] for g in range(groups)]


def product_join(parts):
    """Exact inverse of product_split."""
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# Finite scalar quantization


@dataclass(frozen=True)
class FsqConfig:
    """Uniform L-level grid on [-1, 1] reached through a tanh bound.

    The grid is symmetric about 0 whenever `levels` is odd. Quantizing a
    grid value returns its own level for levels <= 5; beyond that the gap
    between tanh(1) and 1 exceeds half a grid step, so the two edge levels
    are not fixed points of the tanh bounding.
    """

    latent_dims: int
    levels: int = 3

    def __post_init__(self):
        if self.levels < 2:
            raise QuantizerError(f"levels must be >= 2, got {self.levels}")
        if self.latent_dims < 1:
            raise QuantizerError(f"latent_dims must be >= 1, got {self.latent_dims}")

    @property
    def offset(self):
        """Integer centering shift so digits straddle zero (1 for ternary)."""
        return (self.levels - 1) // 2


def fsq_quantize(cfg, z):
    """Per-dimension scalar quantization of an unbounded latent.

    Each entry is squashed with tanh to [-1, 1], snapped to the uniform
    L-level grid (ties round half away from zero), and returned both as a
    level index in [0, L) and as the grid value.
    """
    rows, single = _rows(z)
    if not np.all(np.isfinite(rows)):
        raise QuantizerError("non-finite latent input")
    u = np.tanh(rows)
    # (u+1)/2*(L-1) is nonnegative, so half-away-from-zero == floor(x+0.5).
    pos = (u + 1.0) * 0.5 * (cfg.levels - 1)
    levels = np.floor(pos + 0.5).astype(np.int64)
    levels = np.clip(levels, 0, cfg.levels - 1)
    values = fsq_values(cfg, levels)
    if single:
        return levels[0], values[0]
    return levels, values


def fsq_values(cfg, levels):
    """Grid value for each level index: 2*level/(L-1) - 1."""
    return (2.0 * np.asarray(levels) / (cfg.levels - 1) - 1.0).astype(DTYPE)


def grid_quantize(levels, s):
    """Snap scalars to the nearest point of the uniform L-grid on [-1, 1].

    Unlike fsq_quantize there is no tanh bound: this is plain nearest-value
    rounding with clamping at the grid ends, which is what line-structured
    codebook assignment needs to agree with exhaustive nearest-codeword
    search. Ties round toward the higher level.
    """
    pos = (np.asarray(s, dtype=np.float64) + 1.0) * 0.5 * (levels - 1)
    idx = np.clip(np.floor(pos + 0.5), 0, levels - 1).astype(np.int64)
    value = (2.0 * idx / (levels - 1) - 1.0).astype(DTYPE)
    return idx, value


# ---------------------------------------------------------------------------
# Line-structured codebooks


@dataclass
class LineCodebook:
    """Codebook of K colinear codeword groups.

    Group k is the set {s_l * u_k + b_k} where u_k is a unit direction,
    b_k a reference point, and s_l ranges over the shared L-level scalar
    grid on [-1, 1].
    """

    directions: np.ndarray  # (K, d), rows unit-norm
    references: np.ndarray  # (K, d)
    levels: int = 3

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=DTYPE)
        self.references = np.asarray(self.references, dtype=DTYPE)
        if self.levels < 2:
            raise QuantizerError(f"levels must be >= 2, got {self.levels}")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise QuantizerError("direction rows must be unit-norm")

    @property
    def k(self):
        return self.directions.shape[0]

    @property
    def d(self):
        return self.directions.shape[1]

    def codewords(self):
        """The explicit (K*L, d) codeword set, ordered group-major."""
        grid = (2.0 * np.arange(self.levels) / (self.levels - 1) - 1.0)
        out = (self.references[:, None, :]
               + grid[None, :, None] * self.directions[:, None, :])
        return out.reshape(-1, self.d).astype(DTYPE)


@dataclass
class StructuredAssignment:
    group: np.ndarray
    level: np.ndarray
    signed_distance: np.ndarray
    reconstruction: np.ndarray


def structured_assign(cb, x):
    """Three-step inference against a line-structured codebook.

    1. pick the group whose line is closest to x, by
       ||x - b_k||^2 - <x - b_k, u_k>^2 (lower index wins ties);
    2. project: s = <x - b_khat, u_khat>;
    3. snap s to the shared scalar grid.

    The reconstruction is grid(s) * u_khat + b_khat.
    """
    rows, single = _rows(x)
    if rows.shape[1] != cb.d:
        raise QuantizerError(
            f"dimension mismatch: input has {rows.shape[1]}, codebook {cb.d}")
    diff_sq = _sq_dists(rows, cb.references)          # (n, K)
    proj = rows @ cb.directions.T - np.einsum(
        "ij,ij->i", cb.references, cb.directions)[None, :]
    line_d2 = diff_sq - proj ** 2
    group = line_d2.argmin(axis=1)
    n = rows.shape[0]
    s_hat = proj[np.arange(n), group]
    level, value = grid_quantize(cb.levels, s_hat)
    recon = value[:, None] * cb.directions[group] + cb.references[group]
    out = StructuredAssignment(group, level, s_hat.astype(DTYPE),
                               recon.astype(DTYPE))
    if single:
        return StructuredAssignment(int(group[0]), int(level[0]),
                                    float(s_hat[0]), recon[0].astype(DTYPE))
    return out


# ---------------------------------------------------------------------------
# Discrete-PCA stacks


@dataclass
class DpcaStack:
    """Residual stack of learned component vectors with a ternary codebook.

    `components` and `offsets` have shape (groups, depth, d/groups): entry
    [g, t] is the depth-t component (or offset) for product group g. The
    scalar codebook is fixed to {-1, 0, +1}; component vectors carry free
    magnitude, and encoding normalizes the projection so the ternary digit
    approximates the least-squares coefficient of the residual on u.
    """

    components: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=DTYPE)
        self.offsets = np.asarray(self.offsets, dtype=DTYPE)
        if self.components.ndim != 3 or self.components.shape != self.offsets.shape:
            raise QuantizerError(
                "components and offsets must both be (groups, depth, width)")
        if not np.all(np.isfinite(self.components)):
            raise QuantizerError("non-finite component vector")

    @property
    def groups(self):
        return self.components.shape[0]

    @property
    def depth(self):
        return self.components.shape[1]

    @property
    def width(self):
        return self.components.shape[2]

    @property
    def dim(self):
        return self.groups * self.width

    @property
    def digits(self):
        return self.groups * self.depth

    @classmethod
    def random(cls, dim, depth, groups=1, seed=0, scale=0.5):
        if dim % groups != 0:
            raise QuantizerError(f"{groups} groups do not divide dimension {dim}")
        rng = np.random.default_rng(seed)
        w = dim // groups
        comps = rng.normal(0.0, scale, size=(groups, depth, w))
        offs = np.zeros((groups, depth, w))
        return cls(comps, offs)


_TERNARY = FsqConfig(latent_dims=1, levels=3)


def dpca_encode(stack, x):
    """Greedy residual encoding to ternary digits, group-major then depth.

    Per product group: r_0 = x_g, and for each depth t the digit is the
    ternary quantization of <r_t - b_t, u_t>/||u_t||^2 (the least-squares
    coefficient), after which r_{t+1} = r_t - (s_t u_t + b_t).
    """
    rows, single = _rows(x)
    if rows.shape[1] != stack.dim:
        raise QuantizerError(
            f"dimension mismatch: input has {rows.shape[1]}, stack {stack.dim}")
    n = rows.shape[0]
    codes = np.empty((n, stack.digits), dtype=np.int8)
    for g, r in enumerate(product_split(rows, stack.groups)):
        r = r.copy()
        for t in range(stack.depth):
            u = stack.components[g, t]
            b = stack.offsets[g, t]
            norm = float(np.linalg.norm(u))
            if norm == 0.0:
                raise QuantizerError(
                    f"zero-norm component vector at group {g}, depth {t}")
            coeff = (r - b) @ (u / norm) / norm
            level, _ = fsq_quantize(_TERNARY, coeff.reshape(-1, 1))
            s = (level[:, 0] - 1).astype(np.int8)
            r -= s[:, None] * u + b
            codes[:, g * stack.depth + t] = s
    return codes[0] if single else codes


def dpca_decode(stack, codes, depth=None):
    """Evaluate the codebook sum sum_t (s_t u_t + b_t) per product group.

    `depth` truncates the sum to a prefix of residual layers, yielding the
    coarser reconstruction that prefix codes define.
    """
    arr = np.asarray(codes)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != stack.digits:
        raise QuantizerError(
            f"code length {arr.shape[1]} != groups*depth = {stack.digits}")
    if not np.isin(arr, (-1, 0, 1)).all():
        raise QuantizerError("codes must be ternary in {-1, 0, +1}")
    depth = stack.depth if depth is None else depth
    if not 1 <= depth <= stack.depth:
        raise QuantizerError(f"prefix depth {depth} out of range")
    parts = []
    for g in range(stack.groups):
        s = arr[:, g * stack.depth:g * stack.depth + depth].astype(DTYPE)
        u = stack.components[g, :depth]
        b = stack.offsets[g, :depth]
        parts.append(s @ u + b.sum(axis=0))
    out = product_join(parts).astype(DTYPE)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Codebook serialization (shared checkpoint format, reserved name prefixes)


def save_codebooks(path, kmeans=None, line=None, dpca=None):
    arrays = {}
    if kmeans is not None:
        arrays["kmeans.centroids"] = kmeans.centroids
        arrays["kmeans.degenerate"] = np.array(
            [[1.0 if kmeans.degenerate else 0.0]], dtype=DTYPE)
    if line is not None:
        arrays["line.directions"] = line.directions
        arrays["line.references"] = line.references
        arrays["line.levels"] = np.array([[line.levels]], dtype=DTYPE)
    if dpca is not None:
        for g in range(dpca.groups):
            for t in range(dpca.depth):
                arrays[f"dpca.g{g}.d{t}.u"] = dpca.components[g, t].reshape(1, -1)
                arrays[f"dpca.g{g}.d{t}.b"] = dpca.offsets[g, t].reshape(1, -1)
    save_checkpoint(path, arrays)


def load_codebooks(path):
    arrays = load_checkpoint(path)
    out = {}
    if "kmeans.centroids" in arrays:
        out["kmeans"] = KMeansCodebook(
            arrays["kmeans.centroids"],
            degenerate=bool(arrays.get("kmeans.degenerate", [[0]])[0][0]))
    if "line.directions" in arrays:
        out["line"] = LineCodebook(arrays["line.directions"],
                                   arrays["line.references"],
                                   levels=int(arrays["line.levels"][0][0]))
    dpca_keys = sorted(k for k in arrays if k.startswith("dpca."))
    if dpca_keys:
        groups = 1 + max(int(k.split(".")[1][1:]) for k in dpca_keys)
        depth = 1 + max(int(k.split(".")[2][1:]) for k in dpca_keys)
        width = arrays[dpca_keys[0]].shape[1]
        comps = np.zeros((groups, depth, width), dtype=DTYPE)
        offs = np.zeros((groups, depth, width), dtype=DTYPE)
        for g in range(groups):
            for t in range(depth):
                comps[g, t] = arrays[f"dpca.g{g}.d{t}.u"][0]
                offs[g, t] = arrays[f"dpca.g{g}.d{t}.b"][0]
        out["dpca"] = DpcaStack(comps, offs)
    return out
