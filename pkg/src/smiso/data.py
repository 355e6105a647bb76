"""Datasets of labelled feature vectors.

Feature vectors are stored either densely or as sorted (index, value)
pairs. Datasets are immutable once built: the per-example squared norms
are computed at construction and reused by the solvers and by the
smoothness-constant helpers.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse

from .exceptions import InvalidInputError, ParseError
from .model import get_loss


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """A real vector of length ``dim``, dense or sparse.

    For a dense vector ``indices`` is None and ``values`` has length ``dim``.
    For a sparse vector ``values[k]`` is the coordinate ``indices[k]``.
    """

    dim: int
    values: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidInputError("values must be one-dimensional")
        if self.dim < 1:
            raise InvalidInputError(f"dim must be positive, got {self.dim}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("feature values must be finite")
        if self.indices is None:
            if values.shape[0] != self.dim:
                raise InvalidInputError(
                    f"dense vector has {values.shape[0]} values, expected {self.dim}")
        else:
            indices = np.asarray(self.indices, dtype=np.int64)
            if indices.shape != values.shape:
                raise InvalidInputError("indices and values differ in length")
            if indices.size:
                if indices[0] < 0 or indices[-1] >= self.dim:
                    raise InvalidInputError("sparse index out of range")
                if np.any(np.diff(indices) <= 0):
                    raise InvalidInputError("sparse indices must be strictly increasing")
            indices.setflags(write=False)
            object.__setattr__(self, "indices", indices)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def dense(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values.shape[0], values)

    @classmethod
    def sparse(cls, dim, indices, values):
        return cls(dim, values, indices)

    def with_values(self, values):
        """Same support, new values. Skips validation (hot path)."""
        out = object.__new__(FeatureVector)
        object.__setattr__(out, "dim", self.dim)
        object.__setattr__(out, "values", values)
        object.__setattr__(out, "indices", self.indices)
        return out

    @property
    def is_sparse(self):
        return self.indices is not None

    @property
    def slot(self):
        """Index expression selecting the stored coordinates of a dense array."""
        return slice(None) if self.indices is None else self.indices

    def dot(self, x):
        if self.indices is None:
            return float(self.values @ x)
        return float(self.values @ x[self.indices])

    def norm_sq(self):
        return float(self.values @ self.values)

    def to_dense(self):
        if self.indices is None:
            return self.values.copy()
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def support(self):
        """Coordinates holding a nonzero value."""
        nz = np.flatnonzero(self.values)
        return nz if self.indices is None else self.indices[nz]


@dataclass(frozen=True, eq=False)
class Sample:
    features: FeatureVector
    label: float

    def __post_init__(self):
        if self.label not in (-1.0, 1.0):
            raise InvalidInputError(f"label must be -1 or +1, got {self.label}")
        object.__setattr__(self, "label", float(self.label))


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable list of samples sharing one feature dimension."""

    samples: tuple
    dim: int
    norms_sq: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        for i, s in enumerate(samples):
            if s.features.dim != self.dim:
                raise InvalidInputError(
                    f"sample {i} has dim {s.features.dim}, dataset dim is {self.dim}")
        norms_sq = np.array([s.features.norm_sq() for s in samples], dtype=np.float64)
        labels = np.array([s.label for s in samples], dtype=np.float64)
        norms_sq.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "norms_sq", norms_sq)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_samples(cls, samples, dim=None):
        samples = tuple(samples)
        if dim is None:
            if not samples:
                raise InvalidInputError("dim is required for an empty dataset")
            dim = samples[0].features.dim
        return cls(samples, dim)

    @classmethod
    def from_dense(cls, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != len(y):
            raise InvalidInputError("X must be (n, d) with one label per row")
        samples = [Sample(FeatureVector.dense(row), float(lab)) for row, lab in zip(X, y)]
        return cls(tuple(samples), X.shape[1])

    @property
    def n(self):
        return len(self.samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def is_sparse(self):
        return any(s.features.is_sparse for s in self.samples)

    def features(self, i):
        return self.samples[i].features

    def matrix(self):
        """Feature matrix: ndarray for dense data, CSR for sparse data."""
        return stack_features([s.features for s in self.samples], self.dim)


def stack_features(vectors, dim):
    """Stack feature vectors row-wise (dense ndarray unless any is sparse)."""
    if not vectors:
        return np.zeros((0, dim))
    if not any(v.is_sparse for v in vectors):
        return np.vstack([v.values for v in vectors])
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    cols, vals = [], []
    for k, v in enumerate(vectors):
        idx = np.arange(dim) if v.indices is None else v.indices
        cols.append(idx)
        vals.append(v.values)
        indptr[k + 1] = indptr[k] + idx.size
    return sparse.csr_matrix(
        (np.concatenate(vals), np.concatenate(cols), indptr), shape=(len(vectors), dim))


# ---------------------------------------------------------------------------
# text formats

def _coerce_label(token, lineno):
    try:
        raw = float(token)
    except ValueError:
        raise ParseError(f"bad label {token!r}", lineno) from None
    if not math.isfinite(raw):
        raise ParseError(f"bad label {token!r}", lineno)
    return raw


def _labels_to_pm1(raw_labels):
    distinct = set(raw_labels)
    if len(distinct) > 2:
        raise ParseError(
            f"found {len(distinct)} distinct labels; only binary problems are supported")
    return [1.0 if r > 0 else -1.0 for r in raw_labels]


def parse_libsvm(text, dim=None):
    """Parse LIBSVM/SVMlight text into a sparse :class:`Dataset`.

    Each nonempty line reads ``<label> <idx>:<val> ...`` with 1-based,
    strictly increasing indices; they are stored 0-based. Positive labels
    map to +1 and all others to -1. ``dim`` overrides the inferred
    dimension (the largest index seen) and must be at least that large.
    Anything after a ``#`` is ignored.
    """
    rows, raw_labels = [], []
    max_index = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        raw_labels.append(_coerce_label(tokens[0], lineno))
        idx, vals = [], []
        prev = 0
        for tok in tokens[1:]:
            key, sep, val = tok.partition(":")
            if not sep:
                raise ParseError(f"malformed token {tok!r}", lineno)
            try:
                j = int(key)
                v = float(val)
            except ValueError:
                raise ParseError(f"malformed token {tok!r}", lineno) from None
            if j < 1:
                raise ParseError(f"index {j} is not 1-based", lineno)
            if j <= prev:
                raise ParseError(f"indices not strictly increasing at {tok!r}", lineno)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value in {tok!r}", lineno)
            prev = j
            idx.append(j - 1)
            vals.append(v)
        max_index = max(max_index, prev)
        rows.append((idx, vals))

    if dim is None:
        dim = max(max_index, 1)
    elif dim < max_index:
        raise ParseError(f"explicit dim {dim} is smaller than max index {max_index}")
    labels = _labels_to_pm1(raw_labels)
    samples = [
        Sample(FeatureVector.sparse(dim, np.array(idx, dtype=np.int64), np.array(vals)), lab)
        for (idx, vals), lab in zip(rows, labels)
    ]
    return Dataset(tuple(samples), dim)


def serialize_libsvm(dataset):
    """Inverse of :func:`parse_libsvm`; float values are written with repr."""
    lines = []
    for s in dataset.samples:
        f = s.features
        idx = np.arange(f.dim) if f.indices is None else f.indices
        vals = f.values
        if f.indices is None:
            keep = vals != 0
            idx, vals = idx[keep], vals[keep]
        parts = ["+1" if s.label > 0 else "-1"]
        parts.extend(f"{j + 1}:{float(v)!r}" for j, v in zip(idx, vals))
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def load_libsvm(path, dim=None):
    with open(path) as fh:
        return parse_libsvm(fh.read(), dim=dim)


def parse_csv(text):
    """Dense rows, comma separated, label (+1/-1 or any sign) in the last column."""
    rows, raw_labels = [], []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = [t.strip() for t in line.split(",")]
        if len(fields) < 2:
            raise ParseError("need at least one feature and a label", lineno)
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"expected {width} columns, got {len(fields)}", lineno)
        try:
            feats = [float(t) for t in fields[:-1]]
        except ValueError:
            raise ParseError("non-numeric feature", lineno) from None
        if not all(math.isfinite(v) for v in feats):
            raise ParseError("non-finite feature", lineno)
        rows.append(feats)
        raw_labels.append(_coerce_label(fields[-1], lineno))
    if not rows:
        raise ParseError("no rows in CSV input")
    labels = _labels_to_pm1(raw_labels)
    return Dataset.from_dense(np.array(rows), labels)


def serialize_csv(dataset):
    lines = []
    for s in dataset.samples:
        vals = s.features.to_dense()
        lines.append(",".join([repr(float(v)) for v in vals] + ["1" if s.label > 0 else "-1"]))
    return "\n".join(lines) + ("\n" if lines else "")


def load_csv(path):
    with open(path) as fh:
        return parse_csv(fh.read())


# ---------------------------------------------------------------------------
# preprocessing

def normalize_l2(dataset):
    """Scale every example to unit Euclidean norm."""
    samples = []
    for i, s in enumerate(dataset.samples):
        nrm = math.sqrt(dataset.norms_sq[i])
        if nrm == 0.0:
            raise InvalidInputError(f"sample {i} has zero norm and cannot be normalized")
        f = s.features
        samples.append(Sample(FeatureVector(f.dim, f.values / nrm, f.indices), s.label))
    return Dataset(tuple(samples), dataset.dim)


@dataclass(frozen=True)
class Smoothness:
    L: np.ndarray
    L_max: float
    L_mean: float


def smoothness_constants(dataset, loss_kind, mu):
    """Per-example smoothness ``L_i = L_phi * ||x_i||^2 + mu``.

    Returns a :class:`Smoothness` carrying the array together with its
    max and mean.
    """
    if not mu > 0:
        raise InvalidInputError(f"mu must be positive, got {mu}")
    L = get_loss(loss_kind).smoothness * np.asarray(dataset.norms_sq) + mu
    if L.size == 0:
        return Smoothness(L, mu, mu)
    return Smoothness(L, float(L.max()), float(L.mean()))


# ---------------------------------------------------------------------------
# synthetic workloads

def _hyperplane_labels(rng, X_dense_rows, d, label_noise):
    w = rng.standard_normal(d)
    margins = np.array([r @ w for r in X_dense_rows])
    y = np.where(margins >= 0, 1.0, -1.0)
    if label_noise > 0:
        flip = rng.random(len(y)) < label_noise
        y[flip] *= -1
    return y


def synth_gaussian(n, d, seed, label_noise=0.0):
    """Dense i.i.d. Gaussian features, l2-normalized, hyperplane labels.

    ``label_noise`` is the probability of flipping each label.
    """
    if n < 1 or d < 1:
        raise InvalidInputError("n and d must be at least 1")
    if not 0.0 <= label_noise < 1.0:
        raise InvalidInputError("label_noise must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    norms = np.linalg.norm(X, axis=1)
    # a zero row has probability zero but would break normalization
    X[norms == 0, 0] = 1.0
    X /= np.linalg.norm(X, axis=1)[:, None]
    y = _hyperplane_labels(rng, X, d, label_noise)
    return Dataset.from_dense(X, y)


def _spread_weights(g, norm_spread):
    """Lognormal weights exp(s*g) with mean 1 and max/mean == norm_spread."""
    if norm_spread == 1.0 or g.size == 1:
        return np.ones_like(g)

    def ratio(s):
        w = np.exp(s * (g - g.max()))
        return w.max() / w.mean()

    # ratio(s) grows monotonically from 1 toward n
    target = min(norm_spread, 0.999 * g.size)
    hi = 1.0
    while ratio(hi) < target:
        hi *= 2.0
    s = optimize.brentq(lambda s: ratio(s) - target, 0.0, hi, xtol=1e-12)
    w = np.exp(s * (g - g.max()))
    return w / w.mean()


def synth_heterogeneous(n, d, seed, norm_spread, density=0.1, label_noise=0.0):
    """Sparse features whose squared norms have max/mean ``norm_spread``.

    Supports are Bernoulli(density) per coordinate (at least one entry per
    row). Squared norms follow a lognormal profile with unit mean, so that
    for small mu the realized ``max L_i / mean L_i`` is close to
    ``norm_spread``.
    """
    if n < 1 or d < 1:
        raise InvalidInputError("n and d must be at least 1")
    if norm_spread < 1:
        raise InvalidInputError("norm_spread must be >= 1")
    if not 0.0 < density <= 1.0:
        raise InvalidInputError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    weights = _spread_weights(rng.standard_normal(n), float(norm_spread))
    rows = []
    for i in range(n):
        idx = np.flatnonzero(rng.random(d) < density)
        if idx.size == 0:
            idx = np.array([rng.integers(d)])
        vals = rng.standard_normal(idx.size)
        vals *= math.sqrt(weights[i]) / np.linalg.norm(vals)
        rows.append((idx, vals))
    w = rng.standard_normal(d)
    y = np.array([1.0 if vals @ w[idx] >= 0 else -1.0 for idx, vals in rows])
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        y[flip] *= -1
    samples = [Sample(FeatureVector.sparse(d, idx, vals), lab) for (idx, vals), lab in zip(rows, y)]
    return Dataset(tuple(samples), d)
