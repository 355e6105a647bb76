"""Step-size policies, step-size bounds, sampling distributions and averaging.

Step sizes follow the constant-then-decay recipe: a constant value for a
few warmup epochs, then ``C / (gamma + t)`` with ``C = 2n`` for the
S-MISO family (the step is the mixing weight alpha) and ``C = 2/mu`` for
SGD (the step is the learning rate eta). ``gamma`` is chosen so the first
decayed step equals the constant one.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

SMISO_METHODS = ("smiso", "smiso_nu")
SGD_METHODS = ("sgd", "sgd_nu", "prox_sgd")
METHODS = SMISO_METHODS + SGD_METHODS + ("nsaga",)
NONUNIFORM_METHODS = ("smiso_nu", "sgd_nu")


def _check_kappa(n, kappa):
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if not kappa >= 1:
        raise InvalidInputError(f"condition number must be >= 1, got {kappa}")


def alpha_max_smooth(n, kappa):
    """Largest admissible first step ``min(1/2, n / (2(2 kappa - 1)))``."""
    _check_kappa(n, kappa)
    return min(0.5, n / (2.0 * (2.0 * kappa - 1.0)))


def alpha_max_averaging(n, kappa):
    """First-step bound when the iterates are averaged: ``min(1/2, n/(4(2 kappa - 1)))``."""
    _check_kappa(n, kappa)
    return min(0.5, n / (4.0 * (2.0 * kappa - 1.0)))


@dataclass(frozen=True, eq=False)
class SamplingDist:
    """A sampling distribution over the n examples.

    ``uniform`` distributions are sampled with integer draws and give every
    example a step multiplier of exactly 1; others use an inverse CDF.
    """

    q: np.ndarray
    uniform: bool = False
    cdf: np.ndarray = field(init=False, repr=False)
    step_scale: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or q.size == 0:
            raise InvalidInputError("q must be a non-empty vector")
        if np.any(~np.isfinite(q)) or np.any(q <= 0):
            raise InvalidInputError("all sampling probabilities must be positive")
        if abs(q.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"probabilities sum to {q.sum()!r}, not 1")
        n = q.size
        cdf = np.cumsum(q)
        cdf[-1] = 1.0
        scale = np.ones(n) if self.uniform else 1.0 / (q * n)
        for arr in (q, cdf, scale):
            arr.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "cdf", cdf)
        object.__setattr__(self, "step_scale", scale)

    @classmethod
    def make_uniform(cls, n):
        return cls(np.full(n, 1.0 / n), uniform=True)

    @property
    def n(self):
        return self.q.size

    @property
    def q_min(self):
        return float(self.q.min())

    def L_q(self, L, mu):
        """``max_i (L_i - mu) / (q_i n)``, the constant in the S-MISO bound."""
        return float(np.max((np.asarray(L) - mu) * self.step_scale))

    def L_q_sgd(self, L):
        """``max_i L_i / (q_i n)``, the constant in the non-uniform SGD bound."""
        return float(np.max(np.asarray(L) * self.step_scale))

    def sigma_q_sq(self, sigma_i_sq):
        """``(1/n) sum_i sigma_i^2 / (q_i n)``."""
        return float(np.mean(np.asarray(sigma_i_sq) * self.step_scale))

    def sample(self, gen, size):
        if self.uniform:
            return gen.integers(self.n, size=size)
        idx = np.searchsorted(self.cdf, gen.random(size), side="right")
        return np.minimum(idx, self.n - 1)


def _as_dist(q):
    if isinstance(q, SamplingDist):
        return q
    return SamplingDist(np.asarray(q, dtype=np.float64))


def alpha_max_composite(n, q, L, mu):
    """First-step bound ``min(n q_min / 2, n mu / (4 L_q))`` for Algorithm-2 style updates."""
    q = _as_dist(q)
    L = np.asarray(L, dtype=np.float64)
    if np.any(L < mu):
        raise InvalidInputError("every L_i must be at least mu")
    if q.n != n or L.size != n:
        raise InvalidInputError("q and L must have n entries")
    L_q = q.L_q(L, mu)
    second = math.inf if L_q == 0 else n * mu / (4.0 * L_q)
    return min(n * q.q_min / 2.0, second)


def q_default(L, mu, n=None):
    """Half uniform, half proportional to ``L_i - mu``.

    Falls back to the uniform distribution when all ``L_i == mu``.
    """
    L = np.asarray(L, dtype=np.float64)
    n = L.size if n is None else n
    if L.size != n:
        raise InvalidInputError("L must have n entries")
    excess = L - mu
    if np.any(excess < 0):
        raise InvalidInputError("every L_i must be at least mu")
    total = excess.sum()
    if total <= 0 or np.all(excess == excess[0]):
        if total <= 0:
            logger.warning("all L_i equal mu; using uniform sampling")
        return SamplingDist.make_uniform(n)
    q = 0.5 / n + excess / (2.0 * total)
    q /= q.sum()
    return SamplingDist(q)


def eta_to_initial_step(method, eta, n, mu, L):
    """Map the multiplier ``eta`` to an initial step.

    S-MISO family: ``eta * n * mu / (L - mu)`` (a mixing weight); SGD family
    and N-SAGA: ``eta / L`` (a learning rate). Non-uniform variants should
    be given the average smoothness instead of the maximum.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}")
    if not eta > 0:
        raise InvalidInputError(f"eta must be positive, got {eta}")
    if not L > mu:
        raise InvalidInputError(f"L ({L}) must exceed mu ({mu})")
    if method in SMISO_METHODS:
        return eta * n * mu / (L - mu)
    return eta / L


def theory_bound(method, n, mu, L, q=None, composite=False, averaging=False):
    """The largest first step the analysis supports for ``method``."""
    L = np.asarray(L, dtype=np.float64)
    L_max = float(L.max())
    if method in SMISO_METHODS:
        if method == "smiso_nu" or composite:
            q = q if q is not None else SamplingDist.make_uniform(n)
            return alpha_max_composite(n, q, L, mu)
        kappa = L_max / mu
        return alpha_max_averaging(n, kappa) if averaging else alpha_max_smooth(n, kappa)
    if method == "sgd_nu":
        q = q if q is not None else SamplingDist.make_uniform(n)
        L_q = q.L_q_sgd(L)
        return 1.0 / ((4.0 if averaging else 2.0) * L_q)
    return 1.0 / ((4.0 if averaging else 2.0) * L_max)


@dataclass
class StepSchedule:
    """Constant ``alpha_bar`` for ``warmup_epochs`` epochs, then ``C / (gamma + t)``.

    ``decay=False`` keeps the constant step forever (N-SAGA, or pure
    linear-convergence runs).
    """

    method: str
    n: int
    mu: float
    alpha_bar: float
    mode: str = "tuned"
    eta: float = 1.0
    warmup_epochs: int = 2
    decay: bool = True
    bound: float = math.inf
    C: float = field(init=False)
    gamma: float = field(init=False)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        if self.mode not in ("theory", "tuned"):
            raise InvalidInputError(f"mode must be 'theory' or 'tuned', got {self.mode!r}")
        if not self.alpha_bar > 0:
            raise InvalidInputError("initial step must be positive")
        if self.warmup_epochs < 0:
            raise InvalidInputError("warmup_epochs must be >= 0")
        if self.method == "nsaga":
            self.decay = False
        self.C = 2.0 * self.n if self.method in SMISO_METHODS else 2.0 / self.mu
        t0 = self.warmup_epochs * self.n
        gamma = self.C / self.alpha_bar - (t0 + 1)
        if self.decay and gamma < 0:
            self.warnings.append(
                f"initial step {self.alpha_bar:.6g} exceeds C/(t0+1); gamma clamped to 0")
            logger.info(self.warnings[-1])
            gamma = 0.0
        self.gamma = gamma

    @classmethod
    def build(cls, method, n, mu, L, eta=1.0, mode="tuned", warmup_epochs=2,
              q=None, composite=False, averaging=False, decay=True):
        """Schedule from the eta multiplier, as done in the experiments.

        ``L`` is the list of per-example smoothness constants. Non-uniform
        methods map eta through the mean of ``L``, the others through its max.
        In theory mode the initial step is capped at the method's bound; in
        tuned mode an over-large step only leaves a warning.
        """
        L = np.asarray(L, dtype=np.float64)
        L_ref = float(L.mean()) if method in NONUNIFORM_METHODS else float(L.max())
        alpha = eta_to_initial_step(method, eta, n, mu, L_ref)
        bound = theory_bound(method, n, mu, L, q=q, composite=composite, averaging=averaging)
        warnings = []
        if mode == "theory":
            alpha = min(alpha, bound)
        elif alpha > bound:
            warnings.append(f"tuned step {alpha:.6g} exceeds theoretical bound {bound:.6g}")
        # a mixing weight above 1 is meaningless; small-n problems hit this
        cap = 1.0
        if method in SMISO_METHODS and q is not None and not q.uniform:
            cap = 1.0 / float(np.max(q.step_scale))
        if method in SMISO_METHODS and alpha > cap:
            warnings.append(f"mixing weight {alpha:.6g} clamped to {cap:.6g}")
            alpha = cap
        for w in warnings:
            logger.info(w)
        return cls(method, n, mu, alpha, mode=mode, eta=eta, warmup_epochs=warmup_epochs,
                   decay=decay, bound=bound, warnings=warnings)

    @property
    def switch_step(self):
        """Last step of the constant phase (``t0``)."""
        return self.warmup_epochs * self.n if self.decay else math.inf

    def step_at(self, t):
        if t < 1:
            raise InvalidInputError("steps are numbered from 1")
        if t <= self.switch_step:
            return self.alpha_bar
        return self.C / (self.gamma + t)

    def averaging_gamma(self):
        """Weight offset making averaging weights ``gamma + t`` in absolute time."""
        return self.gamma + self.switch_step


class AveragingAccumulator:
    """Running ``sum_t (gamma + t) x_t / sum_t (gamma + t)`` over t = 0, 1, ..."""

    def __init__(self, gamma):
        if not gamma >= 1:
            raise InvalidInputError(f"averaging gamma must be >= 1, got {gamma}")
        self.gamma = float(gamma)
        self.weighted_sum = None
        self.weight_total = 0.0
        self.count = 0

    def update(self, x, t=None):
        if t is not None and t != self.count:
            raise InvalidInputError(f"expected iterate t={self.count}, got t={t}")
        w = self.gamma + self.count
        if self.weighted_sum is None:
            self.weighted_sum = w * np.asarray(x, dtype=np.float64)
        else:
            self.weighted_sum += w * x
        self.weight_total += w
        self.count += 1

    def result(self):
        if self.count == 0:
            raise InvalidInputError("no iterates have been averaged yet")
        return self.weighted_sum / self.weight_total

    def weights(self):
        """The normalized weights applied so far (for inspection)."""
        w = self.gamma + np.arange(self.count)
        return w / w.sum()


def averaging_update(acc, x, t):
    acc.update(x, t)
    return acc


def averaging_result(acc):
    return acc.result()
