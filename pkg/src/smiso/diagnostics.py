"""Reference optima, variance estimates, Lyapunov functions and bound checks.

Exact diagnostics need the expectation over perturbations to be a finite
average, so they work on a :class:`~smiso.perturb.FinitePool` (or on the
unperturbed data). Each f_i is then the mean over the example's pool copies.
"""
import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .exceptions import InvalidInputError
from .lowerbound import LowerBoundTracker
from .model import prox_l1, stacked_gradient, stacked_objective
from .perturb import TAG_OBJECTIVE, TAG_PROXY, FinitePool, KeyedStreams, MonteCarlo, as_source
from .solvers import smiso_step

__all__ = [
    "LowerBoundTracker", "ReferenceSolution", "reference_solve", "VarianceReport",
    "estimate_variances", "feature_variance_ratio", "LyapunovValue", "lyapunov_smooth",
    "lyapunov_composite", "lyapunov_sgd", "ObjectiveEstimator", "objective_estimate",
    "decay_bound_constant", "bound_holds", "expected_direction", "sgd_expected_distance",
    "gradient_bound_check", "pool_smoothness",
]

logger = logging.getLogger(__name__)


def _rows(dataset, pool):
    """Stacked (M, y, K): the K copies of example i are rows i*K .. i*K+K-1."""
    if pool is None:
        return dataset.matrix(), dataset.labels, 1
    M, y = pool.stacked(dataset)
    return M, y, M.shape[0] // dataset.n


def _dense(M):
    return M.toarray() if sparse.issparse(M) else np.asarray(M)


def _spectral_norm_sq(M):
    if min(M.shape) == 0:
        return 0.0
    if sparse.issparse(M):
        if min(M.shape) <= 2:
            return float(np.linalg.norm(M.toarray(), 2) ** 2)
        s = splinalg.svds(M.astype(np.float64), k=1, return_singular_vectors=False,
                          random_state=0)
        return float(s[0] ** 2)
    return float(np.linalg.norm(M, 2) ** 2)


def pool_smoothness(spec, dataset, pool=None):
    """Largest smoothness constant over every stored copy: ``L_phi max ||xi||^2 + mu``."""
    M, _, _ = _rows(dataset, pool)
    if sparse.issparse(M):
        nsq = np.asarray(M.multiply(M).sum(axis=1)).ravel()
    else:
        nsq = np.einsum("ij,ij->i", M, M)
    return spec.loss.smoothness * float(nsq.max(initial=0.0)) + spec.mu


@dataclass
class ReferenceSolution:
    """Minimizer ``x_star``, value ``F_star`` and the optimal table.

    ``z_star[i] = x* - grad f_i(x*)/mu`` restricted to example i's stored
    coordinates, the same layout as the solver's table.
    """

    x_star: np.ndarray
    F_star: float
    z_star: list
    residual: float
    tol: float
    iterations: int
    converged: bool

    def z_star_dense(self, dataset):
        out = np.zeros((dataset.n, dataset.dim))
        for i, zi in enumerate(self.z_star):
            out[i, dataset.features(i).slot] = zi
        return out


def example_gradients(spec, dataset, pool, x):
    """(n, d) array whose row i is ``grad f_i(x)`` (smooth part, mu*x included)."""
    M, y, K = _rows(dataset, pool)
    s = spec.loss.deriv(y, M @ x)
    G = _dense(M) * s[:, None] if not sparse.issparse(M) else _dense(M.multiply(s[:, None]))
    G = G.reshape(dataset.n, K, dataset.dim).mean(axis=1)
    return G + spec.mu * x


def reference_solve(spec, dataset, pool=None, tol=1e-12, max_iter=200_000):
    """Accelerated proximal gradient on the exact finite objective.

    Stops when the gradient-mapping norm ``L ||x - prox(x - grad/L)||`` falls
    below ``tol``. Momentum uses the strongly convex constant and restarts
    whenever the objective increases. On hitting ``max_iter`` the returned
    solution carries ``converged=False`` and the achieved residual.
    """
    if dataset.n == 0:
        raise InvalidInputError("empty dataset")
    M, y, K = _rows(dataset, pool)
    N = M.shape[0]
    L = spec.loss.smoothness * _spectral_norm_sq(M) * (1 + 1e-9) / N + spec.mu
    mu = spec.mu
    q = math.sqrt(mu / L)
    beta = (1 - q) / (1 + q)
    thr = spec.l1_weight / L

    def grad(x):
        return stacked_gradient(spec, M, y, x)

    def obj(x):
        return stacked_objective(spec, M, y, x)

    x = np.zeros(dataset.dim)
    x_prev = x.copy()
    f_prev = obj(x)
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        yk = x + beta * (x - x_prev)
        x_new = prox_l1(yk - grad(yk) / L, thr)
        f_new = obj(x_new)
        if f_new > f_prev:
            # restart momentum from the current point
            x_new = prox_l1(x - grad(x) / L, thr)
            f_new = obj(x_new)
            x_prev = x_new.copy()
        else:
            x_prev = x
        x = x_new
        f_prev = f_new
        if it % 10 == 0 or it < 10:
            residual = float(np.linalg.norm(L * (x - prox_l1(x - grad(x) / L, thr))))
            if residual <= tol:
                break
    converged = residual <= tol
    if not converged:
        logger.warning("reference solve stopped after %d iterations, residual %.3g", it, residual)
    G = example_gradients(spec, dataset, pool, x)
    z_dense = x[None, :] - G / mu
    z_star = [z_dense[i, dataset.features(i).slot].copy() for i in range(dataset.n)]
    return ReferenceSolution(x, obj(x), z_star, residual, tol, it, converged)


# ---------------------------------------------------------------------------
# variances

@dataclass
class VarianceReport:
    sigma_p_sq: float
    sigma_tot_sq: float
    sigma_i_sq: np.ndarray
    mode: str
    sigma_q_sq: float | None = None

    @property
    def ratio(self):
        if self.sigma_p_sq == 0:
            return math.inf
        return self.sigma_tot_sq / self.sigma_p_sq


def estimate_variances(spec, dataset, source, ref, q=None):
    """Gradient variances at the optimum.

    ``sigma_i^2`` is the variance of the perturbed gradient of example i at
    ``x*``; ``sigma_p^2`` its mean over examples and ``sigma_tot^2`` adds the
    spread of the per-example gradients. Exact on a :class:`FinitePool`;
    on a :class:`MonteCarlo` source each ``sigma_i^2`` uses the unbiased
    sample variance of its k draws.
    """
    if ref is None:
        raise InvalidInputError("a reference solution is required")
    x = ref.x_star
    if source is None or (not isinstance(source, (FinitePool, MonteCarlo))
                          and as_source(source).is_identity):
        mode = "exact-pool"
        M, y, K = _rows(dataset, None)
    elif isinstance(source, FinitePool):
        mode = "exact-pool"
        M, y, K = _rows(dataset, source)
    elif isinstance(source, MonteCarlo):
        mode = f"monte-carlo(k={source.k}, seed={source.seed})"
        M, y, K = _rows(dataset, source)
    else:
        raise InvalidInputError("variance estimation needs a finite pool or a Monte Carlo source")
    s = spec.loss.deriv(y, M @ x)
    G = _dense(M) * s[:, None] + spec.mu * x[None, :]
    G = G.reshape(dataset.n, K, dataset.dim)
    g_mean = G.mean(axis=1)
    dev = ((G - g_mean[:, None, :]) ** 2).sum(axis=2).mean(axis=1)
    if isinstance(source, MonteCarlo) and K > 1:
        dev *= K / (K - 1)
    sigma_p = float(dev.mean())
    # centered at grad f(x*), which is zero unless the objective is composite
    spread = g_mean - g_mean.mean(axis=0)
    sigma_tot = sigma_p + float((spread ** 2).sum(axis=1).mean())
    sigma_q = None
    if q is not None:
        sigma_q = q.sigma_q_sq(dev)
    return VarianceReport(sigma_p, sigma_tot, dev, mode, sigma_q)


def feature_variance_ratio(dataset, pert, k_draws=100, seed=0):
    """Total feature variance over within-example perturbation variance.

    Draws ``k_draws`` perturbed copies of every example. The numerator is
    the variance of all copies around their global mean, the denominator
    the average (unbiased) variance of each example's copies around their
    own mean. Returns ``inf`` when the perturbation does nothing.
    """
    if k_draws < 2:
        raise InvalidInputError("k_draws must be >= 2")
    pert = as_source(pert)
    if not isinstance(pert, FinitePool) and pert.is_identity:
        return math.inf
    streams = KeyedStreams(seed, getattr(pert, "master_seed", 0))
    d = dataset.dim
    total_sum = np.zeros(d)
    total_sq = 0.0
    within = 0.0
    count = 0
    for i in range(dataset.n):
        X = np.empty((k_draws, d))
        for j in range(k_draws):
            X[j] = pert.sample(dataset, i, streams.generator(TAG_PROXY, i, j)).to_dense()
        m = X.mean(axis=0)
        within += float(((X - m) ** 2).sum()) / (k_draws - 1)
        total_sum += X.sum(axis=0)
        total_sq += float((X ** 2).sum())
        count += k_draws
    within /= dataset.n
    g = total_sum / count
    total = total_sq / count - float(g @ g)
    # within-example spread at rounding level means nothing was perturbed
    if within <= 1e-12 * max(total, 1e-300):
        return math.inf
    return total / within


# ---------------------------------------------------------------------------
# Lyapunov functions

@dataclass
class LyapunovValue:
    value: float
    iterate_term: float
    table_term: float
    bound_term: float | None = None


def _table_sq_dists(z, z_star):
    return np.array([float(((a - b) ** 2).sum()) for a, b in zip(z, z_star)])


def lyapunov_smooth(state, ref, alpha_t, n=None):
    """``(1/2)||x - x*||^2 + (alpha_t/n^2) sum_i ||z_i - z_i*||^2``."""
    n = len(state.z) if n is None else n
    if len(state.z) != len(ref.z_star) or state.x.shape != ref.x_star.shape:
        raise InvalidInputError("state and reference solution do not match")
    it = 0.5 * float(((state.x - ref.x_star) ** 2).sum())
    tab = alpha_t / n ** 2 * float(_table_sq_dists(state.z, ref.z_star).sum())
    return LyapunovValue(it + tab, it, tab)


def lyapunov_composite(state, ref, alpha_t, spec, q=None):
    """``F* - D_t(x_t) + (mu alpha_t / n^2) sum_i ||z_i - z_i*||^2 / (q_i n)``.

    Needs the lower-bound tracker enabled on ``state``.
    """
    if state.tracker is None:
        raise InvalidInputError("lower-bound tracking is not enabled on this state")
    n = len(state.z)
    scale = (q if q is not None else state.dist).step_scale
    gap = ref.F_star - state.tracker.evaluate(state.x, spec)
    tab = spec.mu * alpha_t / n ** 2 * float((_table_sq_dists(state.z, ref.z_star) * scale).sum())
    it = 0.5 * spec.mu * float(((state.x - ref.x_star) ** 2).sum())
    return LyapunovValue(gap + tab, it, tab, gap)


def lyapunov_sgd(state, ref):
    """``B_t = (1/2)||x_t - x*||^2``."""
    b = 0.5 * float(((state.x - ref.x_star) ** 2).sum())
    return LyapunovValue(b, b, 0.0)


def decay_bound_constant(gamma, C0, sigma_p_sq, mu):
    """``max(8 sigma_p^2 / mu^2, (gamma + 1) C_0)``."""
    if min(gamma, C0, sigma_p_sq) < 0 or not mu > 0:
        raise InvalidInputError("gamma, C0 and sigma_p^2 must be >= 0 and mu > 0")
    return max(8.0 * sigma_p_sq / mu ** 2, (gamma + 1.0) * C0)


def bound_holds(C_t, t, nu, gamma, slack=1.0):
    """Whether ``C_t <= slack * nu / (gamma + t + 1)``."""
    return C_t <= slack * nu / (gamma + t + 1.0)


# ---------------------------------------------------------------------------
# objective estimates

class ObjectiveEstimator:
    """Objective averaged over ``k`` fixed perturbations per example.

    The perturbation set depends only on ``seed``, so every method and every
    epoch is scored on the same draws. Unperturbed data is scored exactly.
    """

    def __init__(self, spec, dataset, pert, k=5, seed=0, in_order=False):
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        self.spec = spec
        self.dataset = dataset
        pert = as_source(pert)
        if not isinstance(pert, FinitePool) and pert.is_identity:
            self.M, self.y = dataset.matrix(), dataset.labels
        else:
            mc = MonteCarlo(pert, k, seed, in_order=in_order, tag=TAG_OBJECTIVE)
            self.M, self.y = mc.stacked(dataset)

    def __call__(self, x):
        return stacked_objective(self.spec, self.M, self.y, np.asarray(x, dtype=np.float64))


def objective_estimate(spec, dataset, x, pert, k=5, seed=0, in_order=False):
    return ObjectiveEstimator(spec, dataset, pert, k, seed, in_order)(x)


# ---------------------------------------------------------------------------
# exhaustive expectations over (example, pool copy)

def expected_direction(state, spec, dataset, pool, schedule):
    """Average of S-MISO's ``v_t`` over every (example, pool copy) pair.

    Each pair is run through :func:`smiso_step` on a copy of ``state``, so
    this checks the solver's own arithmetic.
    """
    acc = np.zeros(dataset.dim)
    for i in range(dataset.n):
        slot = dataset.features(i).slot
        copies = pool.vectors[i]
        for feats in copies:
            trial = copy.deepcopy(state)
            smiso_step(trial, spec, dataset, pool, schedule, i=i, pert_features=feats)
            v = np.zeros(dataset.dim)
            v[slot] = trial.last_v
            acc += v / len(copies)
    return acc / dataset.n


def sgd_expected_distance(spec, dataset, pool, x, eta, x_star, q=None):
    """``E[(1/2)||x_next - x*||^2]`` for one (proximal) SGD step from ``x``, by enumeration.

    With a sampling distribution ``q`` the step on example i is
    ``eta / (q_i n)`` and the average is weighted by ``q_i``.
    """
    M, y, K = _rows(dataset, pool)
    s = spec.loss.deriv(y, M @ x)
    if q is None:
        w = np.full(M.shape[0], 1.0 / M.shape[0])
        steps = np.full(M.shape[0], float(eta))
    else:
        w = np.repeat(q.q / K, K)
        steps = np.repeat(eta * q.step_scale, K)
    shrink = 1.0 - steps * spec.mu
    if spec.composite:
        X = shrink[:, None] * x[None, :] - (steps * s)[:, None] * _dense(M)
        # row-wise soft threshold, each row with its own step
        X = np.sign(X) * np.maximum(np.abs(X) - (steps * spec.l1_weight)[:, None], 0.0)
        d2 = ((X - x_star[None, :]) ** 2).sum(axis=1)
        return 0.5 * float(w @ d2)
    if sparse.issparse(M):
        nsq = np.asarray(M.multiply(M).sum(axis=1)).ravel()
    else:
        nsq = np.einsum("ij,ij->i", M, M)
    # ||shrink x - x* - step s xi||^2 expanded row by row
    xx, xs, ss = float(x @ x), float(x @ x_star), float(x_star @ x_star)
    Mx, Ms = M @ x, M @ x_star
    d2 = (shrink ** 2 * xx - 2 * shrink * xs + ss
          - 2 * steps * s * (shrink * Mx - Ms) + (steps * s) ** 2 * nsq)
    return 0.5 * float(w @ d2)


def gradient_bound_check(spec, dataset, pool, ref, x, L=None, sigma_p_sq=None):
    """Both sides of ``E||grad f_i(x, rho) - grad f_i(x*)||^2 <= 4L(f(x) - f*) + 2 sigma_p^2``.

    Returns ``(lhs, rhs)``. Smooth objectives only.
    """
    if spec.composite:
        raise InvalidInputError("the gradient bound is stated for smooth objectives")
    M, y, K = _rows(dataset, pool)
    L = pool_smoothness(spec, dataset, pool) if L is None else L
    if sigma_p_sq is None:
        sigma_p_sq = estimate_variances(spec, dataset, pool, ref).sigma_p_sq
    s = spec.loss.deriv(y, M @ x)
    G = _dense(M) * s[:, None] + spec.mu * x[None, :]
    G_star = example_gradients(spec, dataset, pool, ref.x_star)
    diff = G.reshape(dataset.n, K, dataset.dim) - G_star[:, None, :]
    lhs = float((diff ** 2).sum(axis=2).mean())
    f_gap = stacked_objective(spec, M, y, x) - ref.F_star
    return lhs, 4.0 * L * f_gap + 2.0 * sigma_p_sq
