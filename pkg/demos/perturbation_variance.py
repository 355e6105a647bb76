"""How much of the gradient noise comes from the perturbations?

Variance reduction can only remove the part of the gradient variance that
comes from sampling different examples. The part that comes from
perturbing a single example stays. Their ratio bounds how much a
variance-reduced method can gain over plain SGD, so we look at it three ways:

* a closed form that assumes unit-norm features,
* a proxy measured on the features alone,
* the exact gradient variances at the optimum of a finite-pool problem.
"""
from smiso.data import synth_gaussian
from smiso.diagnostics import estimate_variances, feature_variance_ratio, reference_solve
from smiso.model import ProblemSpec
from smiso.perturb import PerturbationSpec, analytic_ratio, build_finite_pool

ds = synth_gaussian(200, 50, seed=1)
spec = ProblemSpec("logistic", 0.01)

print(f"{'perturbation':<16}{'formula':>10}{'proxy':>10}{'gradient':>10}")
for pert in (PerturbationSpec("dropout", 0.1), PerturbationSpec("dropout", 0.3),
             PerturbationSpec("rescale", 0.1), PerturbationSpec("gaussian", 1.0)):
    proxy = feature_variance_ratio(ds, pert, k_draws=50, seed=0)
    # a pool of 10 copies per example makes the expectation a finite average,
    # so the optimum and the variances there are exact
    pool = build_finite_pool(ds, pert, 10, seed=0)
    ref = reference_solve(spec, ds, pool)
    rep = estimate_variances(spec, ds, pool, ref)
    print(f"{str(pert):<16}{analytic_ratio(pert):>10.3g}{proxy:>10.3g}{rep.ratio:>10.3g}")

# For dropout the closed form 1 + 1/delta sits about one above the two
# measured columns, which come out near 1/delta. For rescaling the gradient
# ratio is far from the feature proxy because it also depends on the loss
# and the regularization. Larger is better news for variance reduction.
