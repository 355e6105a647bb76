"""Random perturbations of feature vectors and reproducible noise streams.

Every random quantity in a run comes from a counter-based stream: a
Philox bit generator whose key is (run seed, purpose tag, example index)
and whose counter holds the draw position. The same (seed, tag, example,
position) therefore always yields the same numbers, no matter in which
order examples are visited, which lets several solvers share the exact
same perturbations.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureVector, stack_features
from .exceptions import InvalidInputError

# purpose tags for the stream key
TAG_PERTURB = 1
TAG_SAMPLE = 2
TAG_OBJECTIVE = 3
TAG_POOL = 4
TAG_PROXY = 5
TAG_MC = 6

_MASK64 = (1 << 64) - 1
_MAX_INDEX = 1 << 48


class KeyedStreams:
    """Hands out generators positioned at (tag, index, counter).

    One instance owns one Philox bit generator whose state is reset on every
    call, so it is cheap but not shareable between threads.
    """

    def __init__(self, seed, master_seed=0):
        self.seed = int(seed) & _MASK64
        self.master_seed = int(master_seed) & _MASK64
        self._bitgen = np.random.Philox(key=[self.seed, 0])
        self._gen = np.random.Generator(self._bitgen)
        self._state = self._bitgen.state

    def generator(self, tag, index, counter):
        if not 0 <= index < _MAX_INDEX:
            raise InvalidInputError(f"stream index {index} out of range")
        st = self._state
        st["state"]["key"][0] = self.seed
        st["state"]["key"][1] = (tag << 48) | index
        ctr = st["state"]["counter"]
        ctr[0] = 0
        ctr[1] = 0
        ctr[2] = self.master_seed
        ctr[3] = counter
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        self._bitgen.state = st
        return self._gen


KINDS = ("none", "dropout", "gaussian", "rescale")


@dataclass(frozen=True)
class PerturbationSpec:
    """A perturbation family and its parameter.

    ``dropout``  -- zero each stored coordinate w.p. ``param``, rescale the
                    others by ``1/(1-param)``;
    ``gaussian`` -- add N(0, param^2 / dim) noise per coordinate, i.e. noise
                    of expected squared norm ``param^2`` (dense data only);
    ``rescale``  -- multiply the whole vector by s ~ U(1-param, 1+param);
    ``none``     -- identity.
    """

    kind: str = "none"
    param: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown perturbation {self.kind!r}; expected {KINDS}")
        p = float(self.param)
        if not math.isfinite(p):
            raise InvalidInputError("perturbation parameter must be finite")
        if self.kind in ("dropout", "rescale") and not 0.0 <= p < 1.0:
            raise InvalidInputError(f"{self.kind} parameter must lie in [0, 1), got {p}")
        if self.kind == "gaussian" and p < 0:
            raise InvalidInputError("gaussian scale must be non-negative")
        object.__setattr__(self, "param", p)

    @property
    def is_identity(self):
        return self.kind == "none" or self.param == 0.0

    def sample(self, dataset, i, gen):
        return draw(self, dataset.features(i), gen)

    def __str__(self):
        return "none" if self.kind == "none" else f"{self.kind}({self.param:g})"


def draw(spec, features, gen):
    """One perturbed copy of ``features`` using generator ``gen``."""
    kind, p = spec.kind, spec.param
    if kind == "none":
        return features
    if kind == "gaussian":
        if features.is_sparse:
            raise InvalidInputError("additive gaussian noise requires dense features")
        if p == 0.0:
            return features
        noise = gen.standard_normal(features.dim) * (p / math.sqrt(features.dim))
        return features.with_values(features.values + noise)
    if p == 0.0:
        return features
    v = features.values
    if kind == "dropout":
        keep = gen.random(v.shape[0]) >= p
        return features.with_values(np.where(keep, v / (1.0 - p), 0.0))
    # rescale
    s = gen.uniform(1.0 - p, 1.0 + p)
    return features.with_values(v * s)


def analytic_ratio(kind, param=0.0):
    """Approximate sigma_tot^2 / sigma_p^2 for a perturbation family.

    Assumes unit-norm features whose between-example variance is about 1:
    dropout ``1 + 1/delta``, gaussian ``1 + 1/alpha^2``, rescale ``1 + 3/w^2``.
    Returns ``inf`` when the perturbation is trivial (zero parameter or
    ``none``), since sigma_p^2 vanishes.
    """
    if isinstance(kind, PerturbationSpec):
        kind, param = kind.kind, kind.param
    if kind not in KINDS:
        raise InvalidInputError(f"unknown perturbation {kind!r}")
    if kind == "none" or param == 0:
        return math.inf
    if kind == "dropout":
        return 1.0 + 1.0 / param
    if kind == "gaussian":
        return 1.0 + 1.0 / param ** 2
    return 1.0 + 3.0 / param ** 2


@dataclass(frozen=True, eq=False)
class FinitePool:
    """K frozen perturbed copies per example; f_i is their exact average.

    ``vectors[i][k]`` is the k-th copy of example i.
    """

    vectors: tuple
    _stacked: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return len(self.vectors)

    @property
    def K(self):
        return len(self.vectors[0]) if self.vectors else 0

    def sample(self, dataset, i, gen):
        return self.vectors[i][int(gen.integers(self.K))]

    def stacked(self, dataset):
        """Rows ordered ``i*K + k`` with matching labels; cached."""
        if "M" not in self._stacked:
            rows = [v for per_example in self.vectors for v in per_example]
            self._stacked["M"] = stack_features(rows, dataset.dim)
            self._stacked["y"] = np.repeat(dataset.labels, self.K)
        return self._stacked["M"], self._stacked["y"]

    def support_union(self, i):
        vs = self.vectors[i]
        return np.unique(np.concatenate([v.support() for v in vs]))


def build_finite_pool(dataset, base_spec, K, seed):
    """Draw ``K`` i.i.d. copies of every example from ``base_spec``."""
    if K < 1:
        raise InvalidInputError("pool size K must be >= 1")
    streams = KeyedStreams(seed, base_spec.master_seed)
    vectors = []
    for i in range(dataset.n):
        feats = dataset.features(i)
        vectors.append(tuple(
            draw(base_spec, feats, streams.generator(TAG_POOL, i, k)) for k in range(K)))
    return FinitePool(tuple(vectors))


@dataclass(frozen=True, eq=False)
class MonteCarlo:
    """``k`` seeded draws per example from ``source`` (a spec or a pool).

    With ``in_order=True`` and a :class:`FinitePool` source the j-th draw is
    pool element ``j mod K``, so ``k == K`` reproduces the exact average.
    """

    source: object
    k: int
    seed: int
    in_order: bool = False
    tag: int = TAG_MC
    _stacked: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")

    def draws(self, dataset, i, streams):
        if self.in_order and isinstance(self.source, FinitePool):
            pool = self.source.vectors[i]
            return [pool[j % len(pool)] for j in range(self.k)]
        return [self.source.sample(dataset, i, streams.generator(self.tag, i, j))
                for j in range(self.k)]

    def stacked(self, dataset):
        if "M" not in self._stacked:
            master = getattr(self.source, "master_seed", 0)
            streams = KeyedStreams(self.seed, master)
            rows = []
            for i in range(dataset.n):
                rows.extend(self.draws(dataset, i, streams))
            self._stacked["M"] = stack_features(rows, dataset.dim)
            self._stacked["y"] = np.repeat(dataset.labels, self.k)
        return self._stacked["M"], self._stacked["y"]


def as_source(pert):
    """Normalize ``None`` / spec / pool into something with ``.sample``."""
    if pert is None:
        return PerturbationSpec("none")
    if isinstance(pert, (PerturbationSpec, FinitePool)):
        return pert
    raise InvalidInputError(f"unsupported perturbation source {pert!r}")


def check_compatible(pert, dataset):
    if isinstance(pert, PerturbationSpec) and pert.kind == "gaussian" and dataset.is_sparse:
        raise InvalidInputError("additive gaussian noise requires dense features")
    if isinstance(pert, FinitePool) and pert.n != dataset.n:
        raise InvalidInputError("finite pool and dataset differ in size")


def max_perturbed_norm_sq(dataset, pert):
    """Per-example worst case of ``||xi^rho||^2`` (finite for bounded families).

    Finite pools report the max over their copies. Gaussian noise is
    unbounded; it reports the expected value ``||xi||^2 + alpha^2`` instead.
    """
    base = np.asarray(dataset.norms_sq, dtype=np.float64)
    if isinstance(pert, FinitePool):
        return np.array([max(v.norm_sq() for v in vs) for vs in pert.vectors])
    if pert is None or pert.is_identity:
        return base.copy()
    if pert.kind == "dropout":
        return base / (1.0 - pert.param) ** 2
    if pert.kind == "rescale":
        return base * (1.0 + pert.param) ** 2
    return base + pert.param ** 2
