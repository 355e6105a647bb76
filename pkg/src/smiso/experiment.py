"""Running configured experiments: cells, traces, variance and bound reports.

A cell is one (method block, seed) pair. Cells are independent; every
method sees the same perturbation of example i on its k-th visit for a
given seed, so comparisons between methods are noise-paired.
"""
import csv
import io
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .diagnostics import (ObjectiveEstimator, estimate_variances, example_gradients,
                          feature_variance_ratio, lyapunov_composite, lyapunov_sgd,
                          lyapunov_smooth, reference_solve, sgd_expected_distance, decay_bound_constant)
from .exceptions import ConfigError, InvalidInputError, ParseError
from .model import ProblemSpec, full_objective
from .perturb import analytic_ratio, build_finite_pool, max_perturbed_norm_sq
from .schedule import NONUNIFORM_METHODS, SMISO_METHODS, StepSchedule, q_default
from .solvers import run_epochs

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "seed", "epoch", "step_size", "objective", "objective_avg",
               "lyapunov", "suboptimality", "wall_ms")
SLACK = 1.1


# ---------------------------------------------------------------------------
# problem construction

def load_dataset(source, normalize=True):
    """Materialize a :class:`~smiso.config.DataSource`."""
    p = source.params
    try:
        if source.kind == "synth_gaussian":
            ds = data_mod.synth_gaussian(p["n"], p["d"], p["seed"], p.get("label_noise", 0.0))
        elif source.kind == "synth_heterogeneous":
            ds = data_mod.synth_heterogeneous(p["n"], p["d"], p["seed"], p["spread"],
                                              p.get("density", 0.1), p.get("label_noise", 0.0))
        elif source.kind == "libsvm":
            ds = data_mod.load_libsvm(p["path"], p.get("dim"))
        else:
            ds = data_mod.load_csv(p["path"])
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc}") from None
    except (ParseError, InvalidInputError) as exc:
        raise ConfigError(f"bad data source {source}: {exc}") from None
    if ds.n == 0:
        raise ConfigError(f"data source {source} is empty")
    if normalize:
        try:
            ds = data_mod.normalize_l2(ds)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None
    return ds


@dataclass
class Problem:
    """Everything shared by the cells of one configuration."""

    config: object
    dataset: object
    spec: ProblemSpec
    source: object
    L: np.ndarray
    ref: object = None

    @property
    def pool_mode(self):
        return self.config.pool_mode


def build_problem(cfg, with_reference=None):
    """Load data, freeze the pool (if any) and solve for the reference optimum.

    Step-size constants use the data's ``L_i``; in pool mode they use the
    largest copy of each example instead, so theory-mode bounds hold for
    every function the solver actually sees.
    """
    ds = load_dataset(cfg.data, cfg.normalize)
    if cfg.perturbation.kind == "gaussian" and ds.is_sparse:
        raise ConfigError("gaussian perturbation requires dense data")
    spec = ProblemSpec(cfg.loss, cfg.mu, cfg.l1_weight)
    if cfg.pool_mode:
        source = build_finite_pool(ds, cfg.perturbation, cfg.pool_size, cfg.pool_seed)
        L = spec.loss.smoothness * max_perturbed_norm_sq(ds, source) + spec.mu
    else:
        source = cfg.perturbation
        L = data_mod.smoothness_constants(ds, spec.loss, spec.mu).L
    prob = Problem(cfg, ds, spec, source, L)
    if with_reference is None:
        with_reference = cfg.pool_mode
    if with_reference:
        prob.ref = reference_solve(spec, ds, source if cfg.pool_mode else None)
    return prob


def sampling_dist(method, prob):
    if method in NONUNIFORM_METHODS:
        return q_default(prob.L, prob.spec.mu, prob.dataset.n)
    return None


def build_schedule(mcfg, prob, warmup_epochs=None, decay=True):
    q = sampling_dist(mcfg.name, prob)
    L = prob.L
    if float(np.max(L)) <= prob.spec.mu:
        raise ConfigError("every example has zero norm; nothing to optimize")
    return StepSchedule.build(
        mcfg.name, prob.dataset.n, prob.spec.mu, L, eta=mcfg.eta, mode=mcfg.mode,
        warmup_epochs=mcfg.warmup_epochs if warmup_epochs is None else warmup_epochs,
        q=q, composite=prob.spec.composite, averaging=prob.config.averaging, decay=decay), q


def _lyapunov_fn(method, prob, schedule, q):
    ref = prob.ref
    if ref is None:
        return None, False
    if method in SMISO_METHODS:
        if method == "smiso_nu" or prob.spec.composite:
            return (lambda s: lyapunov_composite(s, ref, schedule.step_at(max(s.t, 1)),
                                                 prob.spec, q).value), True
        return (lambda s: lyapunov_smooth(s, ref, schedule.step_at(max(s.t, 1))).value), False
    return (lambda s: lyapunov_sgd(s, ref).value), False


def run_cell(prob, mcfg, seed):
    """One (method, seed) trace as a list of CSV-ready dicts (without suboptimality)."""
    cfg = prob.config
    schedule, q = build_schedule(mcfg, prob)
    for w in schedule.warnings:
        logger.info("%s seed %d: %s", mcfg.label, seed, w)
    if cfg.pool_mode:
        def objective(x):
            return full_objective(prob.spec, prob.dataset, x, prob.source)
    else:
        objective = ObjectiveEstimator(prob.spec, prob.dataset, prob.source, cfg.objective_k,
                                       cfg.objective_seed)
    lyap, needs_tracker = _lyapunov_fn(mcfg.name, prob, schedule, q)

    def cb(state, epoch, info):
        rec = {"objective": objective(state.x)}
        rec["objective_avg"] = objective(info["x_avg"]) if info["x_avg"] is not None else None
        rec["lyapunov"] = lyap(state) if lyap is not None else None
        return rec

    avg_start = None
    if cfg.averaging:
        avg_start = cfg.averaging_start if cfg.averaging_start is not None else mcfg.warmup_epochs
    trace = run_epochs(mcfg.name, prob.spec, prob.dataset, prob.source, schedule, cfg.epochs,
                       seed=seed, callbacks=[cb], q=q, averaging_start=avg_start,
                       track_lower_bound=needs_tracker, master_seed=cfg.master_seed)
    return [{"method": mcfg.label, "seed": seed, "epoch": r["epoch"],
             "step_size": r["step_size"], "objective": r["objective"],
             "objective_avg": r["objective_avg"], "lyapunov": r["lyapunov"],
             "wall_ms": r["wall_ms"]} for r in trace.records]


def _cell_task(args):
    prob, mcfg, seed = args
    try:
        return mcfg.label, seed, run_cell(prob, mcfg, seed), None
    except Exception as exc:  # isolate the failure to this cell
        logger.debug(traceback.format_exc())
        return mcfg.label, seed, None, f"{type(exc).__name__}: {exc}"


def map_cells(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


@dataclass
class RunResult:
    rows: list
    failures: list = field(default_factory=list)
    best: float = math.nan


def run_experiment(cfg, workers=None, prob=None):
    """Run every (method, seed) cell; failed cells are reported, not fatal."""
    prob = prob if prob is not None else build_problem(cfg)
    workers = cfg.workers if workers is None else workers
    tasks = [(prob, m, s) for m in cfg.methods for s in cfg.seeds]
    rows, failures = [], []
    for label, seed, recs, err in map_cells(_cell_task, tasks, workers):
        if err is not None:
            logger.error("cell %s seed %d failed: %s", label, seed, err)
            failures.append((label, seed, err))
        else:
            rows.extend(recs)
    best = add_suboptimality(rows)
    return RunResult(rows, failures, best)


def add_suboptimality(rows):
    """Suboptimality against the best objective seen anywhere (iterate or average)."""
    vals = [r[k] for r in rows for k in ("objective", "objective_avg")
            if r.get(k) is not None and math.isfinite(r[k])]
    best = min(vals) if vals else math.nan
    for r in rows:
        r["suboptimality"] = r["objective"] - best if vals and r["objective"] is not None else None
    return best


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([f"{r['wall_ms']:.3f}" if k == "wall_ms" else _fmt(r.get(k))
                    for k in CSV_COLUMNS])
    return buf.getvalue()


def summarize(result, cfg):
    """Per-method final-epoch medians as CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "runs", "final_objective_median", "final_suboptimality_median",
                "final_suboptimality_min", "final_suboptimality_max", "failed_seeds",
                "best_objective"))
    labels = list(dict.fromkeys(m.label for m in cfg.methods))
    for label in labels:
        final = [r for r in result.rows if r["method"] == label and r["epoch"] == cfg.epochs]
        failed = sorted({s for lab, s, _ in result.failures if lab == label})
        objs = np.array([r["objective"] for r in final])
        subs = np.array([r["suboptimality"] for r in final])
        if final:
            w.writerow((label, len(final), repr(float(np.median(objs))),
                        repr(float(np.median(subs))), repr(float(subs.min())),
                        repr(float(subs.max())), " ".join(map(str, failed)), repr(result.best)))
        else:
            w.writerow((label, 0, "", "", "", "", " ".join(map(str, failed)), repr(result.best)))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# variance report

def variance_report(cfg):
    """Lines comparing analytic, feature-proxy and (pool mode) gradient ratios."""
    pert = cfg.perturbation
    lines = [f"perturbation: {pert}"]
    if pert.is_identity:
        lines.append("no perturbation: sigma_p^2 = 0, ratio is infinite")
        return lines
    ds = load_dataset(cfg.data, cfg.normalize)
    lines.append(f"analytic ratio (unit-norm features): {analytic_ratio(pert):.6g}")
    proxy = feature_variance_ratio(ds, pert, cfg.variance_draws, cfg.variance_seed)
    lines.append(f"feature-proxy ratio ({cfg.variance_draws} draws/example): {proxy:.6g}")
    if cfg.pool_mode:
        prob = build_problem(cfg, with_reference=True)
        rep = estimate_variances(prob.spec, prob.dataset, prob.source, prob.ref)
        lines.append(f"gradient ratio (exact, pool K={cfg.pool_size}): {rep.ratio:.6g}")
        lines.append(f"sigma_p^2 = {rep.sigma_p_sq:.6g}, sigma_tot^2 = {rep.sigma_tot_sq:.6g}")
    return lines


# ---------------------------------------------------------------------------
# bound checks

MIN_SEEDS = 50


@dataclass
class BoundCheck:
    method: str
    check: str
    epochs: list
    lhs: list
    rhs: list
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(a <= b for a, b in zip(self.lhs, self.rhs))

    def table(self):
        out = []
        for e, a, b in zip(self.epochs, self.lhs, self.rhs):
            margin = b / a if a > 0 else math.inf
            out.append((self.method, self.check, e, a, b, margin, a <= b))
        return out


def _bound_task(args):
    prob, mcfg, seed, kind, schedule, q = args
    spec, ds, ref, pool = prob.spec, prob.dataset, prob.ref, prob.source
    cfg = prob.config
    rows = []

    def cb(state, epoch, info):
        if kind == "linear":
            rows.append(full_objective(spec, ds, state.x, pool) - ref.F_star)
        elif kind == "smooth":
            rows.append(lyapunov_smooth(state, ref, schedule.step_at(max(state.t, 1))).value)
        elif kind == "composite":
            rows.append(lyapunov_composite(state, ref, schedule.step_at(max(state.t, 1)),
                                           spec, q).value / spec.mu)
        else:
            eta = schedule.step_at(state.t + 1)
            rows.append((0.5 * float(((state.x - ref.x_star) ** 2).sum()),
                         sgd_expected_distance(spec, ds, pool, state.x, eta, ref.x_star, q)))
        return {}

    run_epochs(mcfg.name, spec, ds, pool, schedule, cfg.epochs, seed=seed, callbacks=[cb], q=q,
               track_lower_bound=(kind == "composite"), master_seed=cfg.master_seed)
    return rows


def _sgd_sigma(prob, q):
    """Second moment at x* of the (importance-weighted) stochastic gradient, centered."""
    spec, ds, pool, ref = prob.spec, prob.dataset, prob.source, prob.ref
    M, y = pool.stacked(ds)
    K = M.shape[0] // ds.n
    x = ref.x_star
    s = spec.loss.deriv(y, M @ x)
    G = (M.toarray() if hasattr(M, "toarray") else M) * s[:, None] + spec.mu * x
    G -= example_gradients(spec, ds, pool, x).mean(axis=0)
    sq = (G ** 2).sum(axis=1).reshape(ds.n, K).mean(axis=1)
    if q is None:
        return float(sq.mean())
    return float(np.sum(q.q * sq * q.step_scale ** 2))


def run_boundcheck(cfg, workers=None):
    """Statistical checks of the convergence bounds on an exact pool problem.

    ``linear``: zero perturbation, constant step, final median gap < 1e-10.
    ``lyapunov``: decaying steps from t=1; mean Lyapunov value within
    ``SLACK`` of ``nu / (gamma + t + 1)``.
    ``sgd``: mean exact one-step expectation of ``||x - x*||^2/2`` within
    ``SLACK`` of ``(1 - mu eta) B + eta^2 sigma_tot^2``.
    Raises :class:`ConfigError` when the configuration cannot support a check.
    """
    if not cfg.pool_mode:
        raise ConfigError("boundcheck needs exact expectations: set pool_size > 0")
    if len(cfg.seeds) < MIN_SEEDS:
        raise ConfigError(f"boundcheck needs at least {MIN_SEEDS} seeds, got {len(cfg.seeds)}")
    prob = build_problem(cfg, with_reference=True)
    workers = cfg.workers if workers is None else workers
    n, mu = prob.dataset.n, prob.spec.mu
    zero_noise = cfg.perturbation.is_identity
    results = []
    for mcfg in cfg.methods:
        if mcfg.name == "nsaga":
            results.append(BoundCheck(mcfg.label, "none", [], [], [],
                                      ["no convergence bound exists for this method; skipped"]))
            continue
        smiso = mcfg.name in SMISO_METHODS
        linear = zero_noise and smiso
        schedule, q = build_schedule(mcfg, prob, warmup_epochs=0, decay=not linear)
        if schedule.alpha_bar > schedule.bound * (1 + 1e-12):
            raise ConfigError(
                f"{mcfg.label}: initial step {schedule.alpha_bar:.6g} violates the bound "
                f"{schedule.bound:.6g}; bound checks require theory-mode steps")
        if smiso:
            kind = "linear" if linear else (
                "composite" if (mcfg.name == "smiso_nu" or prob.spec.composite) else "smooth")
        else:
            kind = "sgd"
        tasks = [(prob, mcfg, s, kind, schedule, q) for s in cfg.seeds]
        per_seed = np.array(map_cells(_bound_task, tasks, workers))
        epochs = list(range(cfg.epochs + 1))
        t = np.array(epochs) * n
        if kind == "linear":
            med = np.median(per_seed, axis=0)
            chk = BoundCheck(mcfg.label, "linear", [epochs[-1]], [float(med[-1])], [1e-10],
                             [f"median gap per epoch: {' '.join(f'{v:.2e}' for v in med)}"])
        elif kind in ("smooth", "composite"):
            rep = estimate_variances(prob.spec, prob.dataset, prob.source, prob.ref, q)
            sig = rep.sigma_q_sq if q is not None else rep.sigma_p_sq
            C = per_seed.mean(axis=0)
            nu = decay_bound_constant(schedule.gamma, float(C[0]), sig, mu)
            rhs = SLACK * nu / (schedule.gamma + t + 1.0)
            chk = BoundCheck(mcfg.label, "lyapunov", epochs, list(C), list(rhs),
                             [f"nu = {nu:.6g}, gamma = {schedule.gamma:.6g}"])
        else:
            sig = _sgd_sigma(prob, q)
            B = per_seed[:, :, 0].mean(axis=0)
            EB = per_seed[:, :, 1].mean(axis=0)
            etas = np.array([schedule.step_at(tt + 1) for tt in t])
            rhs = (1.0 - mu * etas) * B + SLACK * etas ** 2 * sig
            chk = BoundCheck(mcfg.label, "sgd", epochs, list(EB), list(rhs),
                             [f"sigma_tot^2 = {sig:.6g}"])
        results.append(chk)
    return results


def format_boundcheck(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "check", "epoch", "lhs", "rhs", "margin", "ok"))
    for r in results:
        for row in r.table():
            w.writerow([_fmt(v) for v in row])
    verdicts = []
    for r in results:
        for note in r.notes:
            verdicts.append(f"# {r.method}: {note}")
        if r.check != "none":
            verdicts.append(f"# {r.method} {r.check}: {'PASS' if r.passed else 'FAIL'}")
    return buf.getvalue() + "\n".join(verdicts) + "\n"
