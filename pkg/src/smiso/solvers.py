"""Stochastic solvers for perturbed finite sums.

All solvers share :class:`SolverState` and the same noise layout: the
example index at step t comes from the sampling stream, and the
perturbation of example i on its k-th visit comes from stream (i, k).
Two solvers run with the same seed therefore see identical
perturbations for identical visits.

Step functions mutate the state in place and return it. Each accepts an
optional ``i`` to force the sampled index (for hand traces and
exhaustive checks) and an optional ``pert_features`` to force the
perturbed vector.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, ScheduleError
from .lowerbound import LowerBoundTracker
from .model import prox_l1
from .perturb import TAG_PERTURB, TAG_SAMPLE, KeyedStreams, as_source, check_compatible
from .schedule import (METHODS, NONUNIFORM_METHODS, AveragingAccumulator, SamplingDist,
                       q_default)

logger = logging.getLogger(__name__)


class IndexSampler:
    """Draws one epoch of indices at a time from the sampling stream."""

    def __init__(self, dist, streams):
        self.dist = dist
        self.streams = streams
        self._block = None
        self._epoch = -1

    def index_at(self, t):
        n = self.dist.n
        epoch, pos = divmod(t - 1, n)
        if epoch != self._epoch:
            gen = self.streams.generator(TAG_SAMPLE, 0, epoch)
            self._block = self.dist.sample(gen, n)
            self._epoch = epoch
        return int(self._block[pos])


@dataclass
class SolverState:
    """Iterate, memory and bookkeeping of one solver run.

    ``z`` holds the S-MISO table, one array per example aligned with the
    example's stored coordinates (all of them for dense data). ``memory``
    holds N-SAGA's stored gradients (dense rows).
    """

    method: str
    x: np.ndarray
    seed: int
    dist: SamplingDist
    t: int = 0
    z: list | None = None
    z_bar: np.ndarray | None = None
    memory: np.ndarray | None = None
    memory_mean: np.ndarray | None = None
    visits: np.ndarray | None = None
    tracker: LowerBoundTracker | None = None
    last_i: int | None = None
    last_step: float | None = None
    last_v: np.ndarray | None = None
    streams: KeyedStreams = field(default=None, repr=False)
    sampler: IndexSampler = field(default=None, repr=False)

    @property
    def n(self):
        return self.dist.n

    def z_dense(self, dataset):
        """The z table as an (n, d) array."""
        out = np.zeros((self.n, dataset.dim))
        for i, zi in enumerate(self.z):
            out[i, dataset.features(i).slot] = zi
        return out


def _new_state(method, dataset, seed, dist, master_seed=0):
    if dataset.n == 0:
        raise InvalidInputError("cannot optimize over an empty dataset")
    streams = KeyedStreams(seed, master_seed)
    dist = dist if dist is not None else SamplingDist.make_uniform(dataset.n)
    if dist.n != dataset.n:
        raise InvalidInputError("sampling distribution and dataset differ in size")
    return SolverState(method=method, x=np.zeros(dataset.dim), seed=seed, dist=dist,
                       visits=np.zeros(dataset.n, dtype=np.int64), streams=streams,
                       sampler=IndexSampler(dist, streams))


def smiso_init(spec, dataset, seed=0, q=None, init_rule="zeros", track_lower_bound=False,
               master_seed=0, method="smiso"):
    """Zero-initialized table, so ``x_0 = prox(0) = 0`` for either variant.

    Zero centers give valid lower bounds because both supported losses are
    non-negative.
    """
    if init_rule != "zeros":
        raise InvalidInputError(f"unsupported init rule {init_rule!r}")
    state = _new_state(method, dataset, seed, q, master_seed)
    state.z = [np.zeros(dataset.features(i).values.shape[0]) for i in range(dataset.n)]
    state.z_bar = np.zeros(dataset.dim)
    if spec.composite:
        state.x = prox_l1(state.z_bar, spec.prox_threshold)
    else:
        state.x = state.z_bar
    if track_lower_bound:
        state.tracker = LowerBoundTracker(dataset, spec.mu)
    return state


def sgd_init(spec, dataset, seed=0, q=None, master_seed=0, method="sgd"):
    return _new_state(method, dataset, seed, q, master_seed)


def nsaga_init(spec, dataset, seed=0, master_seed=0):
    """Zero gradient memory; the first pass therefore behaves like SGD."""
    state = _new_state("nsaga", dataset, seed, None, master_seed)
    state.memory = np.zeros((dataset.n, dataset.dim))
    state.memory_mean = np.zeros(dataset.dim)
    return state


def _draw(state, dataset, pert, i, pert_features):
    if pert_features is None and pert is None:
        pert_features = dataset.features(i)
    elif pert_features is None:
        gen = state.streams.generator(TAG_PERTURB, i, int(state.visits[i]))
        pert_features = pert.sample(dataset, i, gen)
    state.visits[i] += 1
    return pert_features


def _pick(state, i):
    t = state.t + 1
    if i is None:
        i = state.sampler.index_at(t)
    return t, i


def _recompute_zbar(state, dataset):
    zbar = np.zeros(dataset.dim)
    for i, zi in enumerate(state.z):
        zbar[dataset.features(i).slot] += zi
    return zbar / state.n


def _smiso_update(state, spec, dataset, pert, a, t, i, pert_features):
    """Shared table update; returns (slot, z_new - z_old)."""
    sample = dataset[i]
    feats = _draw(state, dataset, pert, i, pert_features)
    slot = feats.slot
    xs = state.x[slot]
    margin = float(feats.values @ xs)
    s = spec.loss.deriv_scalar(sample.label, margin)
    mu = spec.mu
    z_old = state.z[i]
    grad_term = (s / mu) * feats.values
    # v_t = x - grad/mu - z_old; the mu*x part of grad cancels with x
    state.last_v = -grad_term - z_old
    z_new = (1.0 - a) * z_old - a * grad_term
    if state.tracker is not None:
        loss_val = float(spec.loss.value(sample.label, margin))
        state.tracker.update(t, i, a, loss_val, s, margin, feats.values)
    state.z[i] = z_new
    return slot, z_new - z_old


def _finish(state, dataset, spec, t, i, step):
    state.t = t
    state.last_i = i
    state.last_step = step


def smiso_step(state, spec, dataset, pert, schedule, i=None, pert_features=None):
    """One S-MISO step with uniform sampling on a smooth objective."""
    t, i = _pick(state, i)
    a = schedule.step_at(t)
    if not 0.0 < a <= 1.0:
        raise ScheduleError(f"S-MISO step {a} at t={t} is outside (0, 1]")
    slot, delta = _smiso_update(state, spec, dataset, pert, a, t, i, pert_features)
    state.x[slot] += delta / state.n
    _finish(state, dataset, spec, t, i, a)
    if t % state.n == 0:
        state.x = _recompute_zbar(state, dataset)
    state.z_bar = state.x
    return state


def smiso_composite_step(state, spec, dataset, pert, schedule, q=None, i=None,
                         pert_features=None):
    """One step of S-MISO with per-example step ``alpha_t / (q_i n)`` and a prox."""
    t, i = _pick(state, i)
    a = schedule.step_at(t)
    if not a > 0.0:
        raise ScheduleError(f"non-positive step {a} at t={t}")
    q = state.dist if q is None else q
    if q.q[i] <= 0:
        raise RuntimeError(f"sampled example {i} has zero probability")
    a_i = a * q.step_scale[i]
    if a_i > 1.0 + 1e-12:
        raise ScheduleError(f"effective step {a_i} for example {i} exceeds 1")
    a_i = min(a_i, 1.0)
    slot, delta = _smiso_update(state, spec, dataset, pert, a_i, t, i, pert_features)
    state.z_bar[slot] += delta / state.n
    _finish(state, dataset, spec, t, i, a)
    if t % state.n == 0:
        state.z_bar = _recompute_zbar(state, dataset)
    if spec.composite:
        state.x = prox_l1(state.z_bar, spec.prox_threshold)
    else:
        state.x = state.z_bar.copy()
    return state


def _sgd_update(state, spec, dataset, pert, eta, t, i, pert_features):
    sample = dataset[i]
    feats = _draw(state, dataset, pert, i, pert_features)
    slot = feats.slot
    s = spec.loss.deriv_scalar(sample.label, float(feats.values @ state.x[slot]))
    x = state.x
    x *= 1.0 - eta * spec.mu
    x[slot] -= (eta * s) * feats.values


def sgd_step(state, spec, dataset, pert, schedule, i=None, pert_features=None):
    """``x <- x - eta_t * grad f_i(x, rho)``."""
    t, i = _pick(state, i)
    eta = schedule.step_at(t)
    if not eta > 0:
        raise ScheduleError(f"non-positive step {eta} at t={t}")
    _sgd_update(state, spec, dataset, pert, eta, t, i, pert_features)
    _finish(state, dataset, spec, t, i, eta)
    return state


def sgd_nu_step(state, spec, dataset, pert, schedule, q=None, i=None, pert_features=None):
    """SGD with ``i ~ q`` and step ``eta_t / (q_i n)``, an unbiased direction."""
    t, i = _pick(state, i)
    eta = schedule.step_at(t)
    if not eta > 0:
        raise ScheduleError(f"non-positive step {eta} at t={t}")
    q = state.dist if q is None else q
    _sgd_update(state, spec, dataset, pert, eta * q.step_scale[i], t, i, pert_features)
    _finish(state, dataset, spec, t, i, eta)
    return state


def prox_sgd_step(state, spec, dataset, pert, schedule, i=None, pert_features=None):
    """Gradient step on the smooth part, then ``prox_{eta_t h}``."""
    t, i = _pick(state, i)
    eta = schedule.step_at(t)
    if not eta > 0:
        raise ScheduleError(f"non-positive step {eta} at t={t}")
    _sgd_update(state, spec, dataset, pert, eta, t, i, pert_features)
    if spec.l1_weight > 0:
        state.x = prox_l1(state.x, eta * spec.l1_weight)
    _finish(state, dataset, spec, t, i, eta)
    return state


def nsaga_step(state, spec, dataset, pert, schedule, i=None, pert_features=None):
    """SAGA on noisy gradients: the fresh noisy gradient is used and stored.

    Storing a noisy gradient is what leaves a bias at convergence.
    """
    t, i = _pick(state, i)
    eta = schedule.step_at(t)
    if not eta > 0:
        raise ScheduleError(f"non-positive step {eta} at t={t}")
    sample = dataset[i]
    feats = _draw(state, dataset, pert, i, pert_features)
    slot = feats.slot
    x = state.x
    s = spec.loss.deriv_scalar(sample.label, float(feats.values @ x[slot]))
    g = spec.mu * x
    g[slot] += s * feats.values
    old = state.memory[i]
    x -= eta * (g - old + state.memory_mean)
    state.memory_mean += (g - old) / state.n
    state.memory[i] = g
    _finish(state, dataset, spec, t, i, eta)
    if t % state.n == 0:
        state.memory_mean = state.memory.mean(axis=0)
    return state


# ---------------------------------------------------------------------------
# drivers

def sampling_for(method, L, mu, n):
    """Distribution a method samples from (``q_default`` for NU methods)."""
    if method in NONUNIFORM_METHODS:
        return q_default(L, mu, n)
    return SamplingDist.make_uniform(n)


def init_state(method, spec, dataset, seed=0, q=None, track_lower_bound=False, master_seed=0):
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}; expected one of {METHODS}")
    if method in ("smiso", "smiso_nu"):
        return smiso_init(spec, dataset, seed, q=q, track_lower_bound=track_lower_bound,
                          master_seed=master_seed, method=method)
    if method == "nsaga":
        return nsaga_init(spec, dataset, seed, master_seed=master_seed)
    return sgd_init(spec, dataset, seed, q=q, master_seed=master_seed, method=method)


def step(state, spec, dataset, pert, schedule, i=None, pert_features=None):
    """Dispatch one step according to ``state.method``."""
    m = state.method
    if m == "smiso":
        if spec.composite:
            return smiso_composite_step(state, spec, dataset, pert, schedule, i=i,
                                        pert_features=pert_features)
        return smiso_step(state, spec, dataset, pert, schedule, i=i, pert_features=pert_features)
    if m == "smiso_nu":
        return smiso_composite_step(state, spec, dataset, pert, schedule, i=i,
                                    pert_features=pert_features)
    if m == "sgd":
        if spec.composite:
            return prox_sgd_step(state, spec, dataset, pert, schedule, i=i,
                                 pert_features=pert_features)
        return sgd_step(state, spec, dataset, pert, schedule, i=i, pert_features=pert_features)
    if m == "sgd_nu":
        out = sgd_nu_step(state, spec, dataset, pert, schedule, i=i, pert_features=pert_features)
        if spec.composite:
            eta = schedule.step_at(state.t) * state.dist.step_scale[state.last_i]
            state.x = prox_l1(state.x, eta * spec.l1_weight)
        return out
    if m == "prox_sgd":
        return prox_sgd_step(state, spec, dataset, pert, schedule, i=i,
                             pert_features=pert_features)
    return nsaga_step(state, spec, dataset, pert, schedule, i=i, pert_features=pert_features)


@dataclass
class Trace:
    """Per-epoch records plus the final state (and averager, if any)."""

    records: list
    state: SolverState
    averager: AveragingAccumulator | None = None
    steps: int = 0


def run_epochs(method, spec, dataset, pert, schedule, epochs, seed=0, callbacks=(), q=None,
               averaging_start=None, track_lower_bound=False, master_seed=0, state=None):
    """Run ``epochs * n`` steps, recording once per epoch (epoch 0 included).

    Each callback is called as ``cb(state, epoch, info)`` at every epoch
    boundary and returns a dict merged into the record; ``info`` carries
    the averaged iterate (or None) under ``"x_avg"``. With
    ``averaging_start`` (an epoch), iterates from that epoch on are
    averaged with weights ``gamma + t`` from the schedule's decay phase.
    """
    if epochs < 0:
        raise InvalidInputError("epochs must be >= 0")
    pert = as_source(pert)
    check_compatible(pert, dataset)
    n = dataset.n
    if state is None:
        state = init_state(method, spec, dataset, seed, q=q,
                           track_lower_bound=track_lower_bound, master_seed=master_seed)
    averager = None
    avg_t0 = None
    if averaging_start is not None:
        avg_t0 = averaging_start * n
        gamma = schedule.gamma + avg_t0 if schedule.decay else 1.0
        averager = AveragingAccumulator(max(gamma, 1.0))

    records = []

    def record(epoch, wall):
        step_size = schedule.step_at(max(state.t, 1))
        x_avg = averager.result() if averager is not None and averager.count else None
        rec = {"epoch": epoch, "t": state.t, "step_size": step_size, "wall_ms": wall}
        info = {"x_avg": x_avg}
        for cb in callbacks:
            rec.update(cb(state, epoch, info) or {})
        records.append(rec)

    start = time.perf_counter()
    if averager is not None and avg_t0 == state.t:
        averager.update(state.x)
    record(0, 0.0)
    steps = 0
    for epoch in range(1, epochs + 1):
        for _ in range(n):
            step(state, spec, dataset, pert, schedule)
            steps += 1
            if averager is not None and state.t >= avg_t0:
                averager.update(state.x)
        record(epoch, 1000.0 * (time.perf_counter() - start))
    return Trace(records, state, averager, steps)
