"""Quadratic lower-bound model maintained alongside S-MISO.

Each example keeps ``d_i(x) = c_i + (mu/2)||x - z_i||^2``. A step on example
i with effective weight ``a`` mixes ``d_i`` with the strong-convexity
minorant of the sampled function at the previous iterate,

    l(x) = f(x_prev) + <g, x - x_prev> + (mu/2)||x - x_prev||^2
         = c_l + (mu/2)||x - w||^2,   w = x_prev - g/mu,

and since both are quadratics with curvature mu the mixture stays in the
same family:

    z_i <- (1-a) z_i + a w
    c_i <- (1-a) c_i + a c_l + (mu/2) a (1-a) ||z_i - w||^2.
"""
import numpy as np

from .exceptions import InvalidInputError
from .model import prox_l1


class LowerBoundTracker:
    """Offsets ``c_i`` and centers ``z_i`` of the per-example minorants.

    Centers are stored on each example's support, like the solver's table.
    Starts from ``z_i = 0`` and ``c_i = 0``, valid for non-negative losses.
    """

    def __init__(self, dataset, mu):
        self.mu = float(mu)
        self.n = dataset.n
        self.dim = dataset.dim
        self.slots = [dataset.features(i).slot for i in range(self.n)]
        self.centers = [np.zeros(dataset.features(i).values.shape[0]) for i in range(self.n)]
        self.c = np.zeros(self.n)
        self.t = 0

    def update(self, t, i, a, loss_value, deriv, margin, pert_values):
        """Mix example ``i``'s minorant with the linearization at the previous iterate.

        ``loss_value``/``deriv`` are phi and phi' at ``margin = x_prev . xi``,
        ``pert_values`` the perturbed features on the example's support.
        """
        if t != self.t + 1:
            raise InvalidInputError(f"tracker is at t={self.t}, got update for t={t}")
        mu = self.mu
        w = (-deriv / mu) * pert_values
        c_l = loss_value - deriv * margin - deriv * deriv * float(pert_values @ pert_values) / (2 * mu)
        z = self.centers[i]
        diff = z - w
        self.c[i] = (1 - a) * self.c[i] + a * c_l + 0.5 * mu * a * (1 - a) * float(diff @ diff)
        self.centers[i] = (1 - a) * z + a * w
        self.t = t

    def center_mean(self):
        zbar = np.zeros(self.dim)
        for slot, z in zip(self.slots, self.centers):
            zbar[slot] += z
        return zbar / self.n

    def evaluate(self, x, spec=None):
        """``D(x) = mean_i d_i(x) + h(x)``."""
        x = np.asarray(x, dtype=np.float64)
        xx = float(x @ x)
        acc = 0.0
        for slot, z in zip(self.slots, self.centers):
            xs = x[slot]
            acc += xx - 2.0 * float(xs @ z) + float(z @ z)
        val = float(self.c.mean()) + 0.5 * self.mu * acc / self.n
        if spec is not None:
            val += spec.h(x)
        return val

    def argmin(self, spec=None):
        zbar = self.center_mean()
        if spec is None or not spec.composite:
            return zbar
        return prox_l1(zbar, spec.prox_threshold)
