"""An l1 penalty on sparse LIBSVM-style data.

With a nonzero l1 weight S-MISO keeps a running average of its table and
returns the soft-thresholded average as the iterate. The table itself only
ever touches the coordinates where each example is nonzero, so memory stays
proportional to the number of stored features.
"""
import numpy as np

from smiso.data import parse_libsvm, serialize_libsvm, smoothness_constants, synth_heterogeneous
from smiso.diagnostics import reference_solve
from smiso.model import ProblemSpec, full_objective
from smiso.perturb import PerturbationSpec, build_finite_pool
from smiso.schedule import StepSchedule
from smiso.solvers import run_epochs

# round-trip through the text format to show the loader in action
text = serialize_libsvm(synth_heterogeneous(400, 300, seed=5, norm_spread=3.0, density=0.05))
ds = parse_libsvm(text, dim=300)
print(f"{ds.n} examples, {sum(len(ds.features(i).values) for i in range(ds.n))} stored values")

spec = ProblemSpec("logistic", 1e-3, l1_weight=2e-3)
pool = build_finite_pool(ds, PerturbationSpec("dropout", 0.2), 4, seed=0)
ref = reference_solve(spec, ds, pool)
print(f"optimum has {np.count_nonzero(ref.x_star)} of {ds.dim} coordinates nonzero")

L = smoothness_constants(ds, spec.loss, spec.mu).L
for method in ("smiso", "prox_sgd"):
    sched = StepSchedule.build(method, ds.n, spec.mu, L, eta=1.0, mode="tuned", composite=True)
    tr = run_epochs(method, spec, ds, pool, sched, 30, seed=0)
    gap = full_objective(spec, ds, tr.state.x, pool) - ref.F_star
    print(f"{method:<9} gap {gap:.2e}, nonzeros {np.count_nonzero(tr.state.x)}")
