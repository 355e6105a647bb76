"""Variance-reduced stochastic optimization for finite sums of expectations.

The objective is ``F(x) = (1/n) sum_i E_rho[phi(y_i x.xi_i^rho)] + (mu/2)||x||^2
+ l1_weight ||x||_1`` where each example is randomly perturbed on every
access (dropout, additive noise, rescaling). The main solver, S-MISO,
keeps one memory vector per example and converges with a noise floor set
by the perturbation variance only, rather than the full gradient variance.
"""
from .data import (Dataset, FeatureVector, Sample, load_csv, load_libsvm, normalize_l2,
                   parse_csv, parse_libsvm, serialize_csv, serialize_libsvm,
                   smoothness_constants, synth_gaussian, synth_heterogeneous)
from .exceptions import ConfigError, InvalidInputError, ParseError, ScheduleError
from .model import ProblemSpec, full_objective, get_loss, prox_l1
from .perturb import (FinitePool, MonteCarlo, PerturbationSpec, analytic_ratio,
                      build_finite_pool)
from .schedule import (SamplingDist, StepSchedule, alpha_max_averaging, alpha_max_composite,
                       alpha_max_smooth, q_default)
from .solvers import SolverState, init_state, run_epochs, step

__version__ = "0.1.0"
