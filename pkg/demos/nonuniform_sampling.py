"""Sampling big examples more often.

When a few examples have much larger norms than the rest, the uniform
method must take steps small enough for the worst one. Sampling example i
with probability that grows with its smoothness constant, and scaling its
step down to compensate, lets the step follow the average constant.
"""
import numpy as np

from smiso.data import smoothness_constants, synth_heterogeneous
from smiso.diagnostics import ObjectiveEstimator
from smiso.model import ProblemSpec
from smiso.perturb import PerturbationSpec
from smiso.schedule import StepSchedule, q_default
from smiso.solvers import run_epochs

ds = synth_heterogeneous(1000, 200, seed=2, norm_spread=100.0, density=0.05)
spec = ProblemSpec("squared_hinge", 1e-3)
pert = PerturbationSpec("dropout", 0.1)
sm = smoothness_constants(ds, spec.loss, spec.mu)
print(f"largest smoothness constant / mean: {sm.L_max / sm.L_mean:.0f}")

q = q_default(sm.L, spec.mu)
print(f"sampling probabilities range from {q.q.min():.2e} to {q.q.max():.2e}")

score = ObjectiveEstimator(spec, ds, pert, k=5, seed=99)
for method in ("smiso", "smiso_nu"):
    sched = StepSchedule.build(method, ds.n, spec.mu, sm.L, eta=1.0, mode="theory", q=q)
    finals = []
    for seed in range(3):
        tr = run_epochs(method, spec, ds, pert, sched, 10, seed=seed,
                        q=q if method == "smiso_nu" else None)
        finals.append(score(tr.state.x))
    print(f"{method:<9} initial step {sched.alpha_bar:.3g}  "
          f"objective after 10 epochs {np.median(finals):.5f}")
