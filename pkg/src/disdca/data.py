"""Datasets, libsvm I/O, the block-sparse synthetic generator and partitioning."""
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    """n sparse examples of dimension ``dim`` stored as a CSR matrix."""

    X: sp.csr_matrix
    y: np.ndarray

    def __post_init__(self):
        X = sp.csr_matrix(self.X, dtype=np.float64)
        X.sort_indices()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.float64))
        if X.shape[0] != self.y.shape[0]:
            raise DataError(f"{X.shape[0]} examples but {self.y.shape[0]} labels")
        if X.shape[0] == 0:
            raise DataError("no examples")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @cached_property
    def row_norms_sq(self):
        return np.asarray(self.X.multiply(self.X).sum(axis=1)).ravel()

    def csr(self):
        """(indptr, indices, data) as contiguous int64/float64 arrays for the kernels."""
        X = self.X
        return (
            np.ascontiguousarray(X.indptr, dtype=np.int64),
            np.ascontiguousarray(X.indices, dtype=np.int64),
            np.ascontiguousarray(X.data, dtype=np.float64),
        )

    def row(self, i):
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        return self.X.indices[lo:hi], self.X.data[lo:hi]

    def with_labels(self, y):
        return Dataset(self.X, y)

    def equals(self, other):
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X.indptr, other.X.indptr)
            and np.array_equal(self.X.indices, other.X.indices)
            and np.array_equal(self.X.data, other.X.data)
        )


def load_libsvm(path, dim=None):
    """Read ``label idx:val ...`` lines with 1-based, strictly increasing indices."""
    labels, indptr, indices, values = [], [0], [], []
    max_index = 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise ParseError(f"bad label {parts[0]!r}", lineno) from None
            prev = 0
            for tok in parts[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise ParseError(f"expected index:value, got {tok!r}", lineno)
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ParseError(f"bad feature {tok!r}", lineno) from None
                if idx < 1:
                    raise ParseError(f"feature index {idx} is not 1-based", lineno)
                if idx <= prev:
                    raise ParseError(f"feature index {idx} not increasing", lineno)
                prev = idx
                indices.append(idx - 1)
                values.append(val)
            max_index = max(max_index, prev)
            indptr.append(len(indices))
    if not labels:
        raise DataError(f"{path}: no examples")
    if dim is None:
        dim = max_index
    elif dim < max_index:
        raise DataError(f"{path}: feature index {max_index} exceeds dim {dim}")
    X = sp.csr_matrix(
        (np.array(values, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(labels), max(dim, 1)),
    )
    return Dataset(X, np.array(labels))


def save_libsvm(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(ds.n):
            idx, val = ds.row(i)
            feats = " ".join(f"{j + 1}:{v:.17g}" for j, v in zip(idx, val))
            fh.write(f"{ds.y[i]:.17g} {feats}".rstrip() + "\n")


def normalize_unit_ball(ds):
    """Scale each example by 1/max(1, ||x||)."""
    norms = np.sqrt(ds.row_norms_sq)
    scale = 1.0 / np.maximum(1.0, norms)
    return Dataset(sp.diags(scale) @ ds.X, ds.y.copy())


def generate_synthetic(groups, group_dim, points_per_group, seed, u=None, normalize=True):
    """Regression data whose examples each live on one block of features.

    Group g owns features [g*group_dim, (g+1)*group_dim) and contributes
    ``points_per_group`` consecutive examples with i.i.d. N(0, 1) entries
    (numpy PCG64 generator, ziggurat normals).  Labels are
    ``u.x + sum_j (x_j/2)^3`` on the raw features, u defaulting to all ones;
    normalization to the unit ball happens afterwards and leaves y alone.
    """
    if groups < 1 or group_dim < 1 or points_per_group < 1:
        raise ConfigError("groups, group_dim and points_per_group must all be >= 1")
    d = groups * group_dim
    n = groups * points_per_group
    u = np.ones(d) if u is None else np.asarray(u, dtype=float)
    if u.shape != (d,):
        raise ConfigError(f"u must have {d} entries")
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, group_dim))
    block = np.repeat(np.arange(groups), points_per_group)
    cols = block[:, None] * group_dim + np.arange(group_dim)[None, :]
    y = np.einsum("ij,ij->i", feats, u[cols]) + ((feats / 2.0) ** 3).sum(axis=1)
    X = sp.csr_matrix(
        (feats.ravel(), cols.ravel(), np.arange(0, n * group_dim + 1, group_dim)),
        shape=(n, d),
    )
    ds = Dataset(X, y)
    return normalize_unit_ball(ds) if normalize else ds


def binarize_labels(ds):
    """Map labels to +-1; anything not already +-1 is split at its median."""
    y = ds.y
    if np.all(np.abs(y) == 1.0):
        return ds
    return ds.with_labels(np.where(y > np.median(y), 1.0, -1.0))


@dataclass(frozen=True, eq=False)
class Partition:
    shards: tuple
    K: int
    scheme: str
    n: int = field(default=0)

    @cached_property
    def assignment(self):
        out = np.empty(self.n, dtype=np.int64)
        for k, shard in enumerate(self.shards):
            out[shard] = k
        return out

    @property
    def sizes(self):
        return [len(s) for s in self.shards]

    def padded_shards(self):
        """(K, max_size) int64 array, rows padded with -1."""
        width = max(self.sizes)
        out = np.full((self.K, width), -1, dtype=np.int64)
        for k, shard in enumerate(self.shards):
            out[k, : len(shard)] = shard
        return out


def partition(ds, K, scheme="block", seed=0):
    """Split examples into K balanced shards.

    ``block`` keeps file order; ``random`` shuffles with the seed first.
    Shard sizes differ by at most one, larger shards first.
    """
    n = ds if isinstance(ds, (int, np.integer)) else ds.n
    if K < 1 or K > n:
        raise ConfigError(f"need 1 <= K <= n, got K={K}, n={n}")
    if scheme == "block":
        order = np.arange(n, dtype=np.int64)
    elif scheme == "random":
        order = np.random.default_rng(seed).permutation(n).astype(np.int64)
    else:
        raise ConfigError(f"unknown partition scheme {scheme!r}")
    base, extra = divmod(n, K)
    shards, start = [], 0
    for k in range(K):
        size = base + (1 if k < extra else 0)
        shard = order[start : start + size]
        if scheme == "random":
            shard = np.sort(shard)
        shards.append(np.ascontiguousarray(shard))
        start += size
    return Partition(tuple(shards), K, scheme, n)


def orthogonality_residual(ds, p, max_pairs=10**6, seed=0):
    """max |x_i . x_j| over pairs held by different workers.

    Exact when the number of cross pairs is at most ``max_pairs`` or when the
    shards' feature supports are disjoint; otherwise estimated from
    ``max_pairs`` pairs drawn with ``seed``.
    """
    if p.K == 1:
        return 0.0
    sizes = np.array(p.sizes, dtype=np.int64)
    cross_pairs = (int(sizes.sum()) ** 2 - int((sizes**2).sum())) // 2
    supports = []
    for shard in p.shards:
        cols = np.unique(ds.X[shard].indices)
        supports.append(cols)
    all_cols = np.concatenate(supports)
    if np.unique(all_cols).size == all_cols.size:
        return 0.0
    if cross_pairs <= max_pairs:
        best = 0.0
        for k in range(p.K):
            Xk = ds.X[p.shards[k]]
            for l in range(k + 1, p.K):
                prod = (Xk @ ds.X[p.shards[l]].T).tocoo()
                if prod.nnz:
                    best = max(best, float(np.abs(prod.data).max()))
        return best
    log.info("orthogonality residual estimated from %d of %d cross pairs", max_pairs, cross_pairs)
    rng = np.random.default_rng(seed)
    assign = p.assignment
    i = rng.integers(0, ds.n, size=max_pairs)
    j = rng.integers(0, ds.n, size=max_pairs)
    keep = assign[i] != assign[j]
    i, j = i[keep], j[keep]
    dots = np.asarray(ds.X[i].multiply(ds.X[j]).sum(axis=1)).ravel()
    return float(np.abs(dots).max()) if dots.size else 0.0
