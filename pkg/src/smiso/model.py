"""Losses, regularizers and gradient oracles for perturbed linear models.

The per-example function is ``phi(y * x.xi) + (mu/2)||x||^2`` where ``xi``
is a (possibly perturbed) feature vector; the l1 term ``l1_weight*||x||_1``
is the non-smooth part handled through its proximal operator. The
quadratic regularizer always belongs to the smooth part.

Note on the squared hinge: it is defined with a factor 1/2,
``phi(m) = max(0, 1 - m)^2 / 2``, so that its derivative is 1-Lipschitz
and unit-norm features give ``L = 1 + mu``. Several libraries omit the 1/2.
"""
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError


class Loss:
    """A convex margin loss ``phi(y, z)`` with ``smoothness``-Lipschitz derivative."""

    name = None
    smoothness = None

    def value(self, y, z):
        raise NotImplementedError

    def deriv(self, y, z):
        raise NotImplementedError

    def deriv_scalar(self, y, z):
        return float(self.deriv(np.float64(y), np.float64(z)))

    def __repr__(self):
        return f"{type(self).__name__}()"


class LogisticLoss(Loss):
    name = "logistic"
    smoothness = 0.25

    def value(self, y, z):
        return np.logaddexp(0.0, -np.multiply(y, z))

    def deriv(self, y, z):
        m = np.multiply(y, z)
        # -y * sigmoid(-m), computed without overflow
        e = np.exp(-np.abs(m))
        s = np.where(m >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        return -np.multiply(y, s)

    def deriv_scalar(self, y, z):
        m = y * z
        if m >= 0:
            e = math.exp(-m)
            return -y * e / (1.0 + e)
        return -y / (1.0 + math.exp(m))


class SquaredHingeLoss(Loss):
    name = "squared_hinge"
    smoothness = 1.0

    def value(self, y, z):
        r = np.maximum(0.0, 1.0 - np.multiply(y, z))
        return 0.5 * r * r

    def deriv(self, y, z):
        return -np.multiply(y, np.maximum(0.0, 1.0 - np.multiply(y, z)))

    def deriv_scalar(self, y, z):
        r = 1.0 - y * z
        return -y * r if r > 0.0 else 0.0


LOSSES = {cls.name: cls for cls in (LogisticLoss, SquaredHingeLoss)}


def get_loss(kind):
    """Resolve a loss name (or pass through a :class:`Loss` instance)."""
    if isinstance(kind, Loss):
        return kind
    try:
        return LOSSES[kind]()
    except KeyError:
        raise InvalidInputError(
            f"unknown loss {kind!r}; expected one of {sorted(LOSSES)}") from None


def loss_value(kind, y, z):
    return get_loss(kind).value(y, z)


def loss_deriv(kind, y, z):
    return get_loss(kind).deriv(y, z)


@dataclass(frozen=True)
class ProblemSpec:
    """Loss, l2 strength ``mu`` and l1 weight of the regularized objective."""

    loss: Loss
    mu: float
    l1_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "loss", get_loss(self.loss))
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise InvalidInputError(f"mu must be positive, got {self.mu}")
        if not (self.l1_weight >= 0 and math.isfinite(self.l1_weight)):
            raise InvalidInputError(f"l1_weight must be >= 0, got {self.l1_weight}")

    @property
    def composite(self):
        return self.l1_weight > 0

    @property
    def prox_threshold(self):
        """Soft-threshold level of prox_{h/mu}."""
        return self.l1_weight / self.mu

    def h(self, x):
        return self.l1_weight * float(np.abs(x).sum()) if self.l1_weight else 0.0


def _check_dims(x, features):
    if x.shape != (features.dim,):
        raise InvalidInputError(
            f"iterate has shape {x.shape}, features have dim {features.dim}")


def loss_grad_only(spec, x, sample, pert_features):
    """Loss-term gradient ``phi'(x.xi) * xi`` on the support of ``pert_features``.

    Returns ``(scale, pert_features)`` meaning ``scale * pert_features``;
    the pair form keeps sparse updates sparse.
    """
    _check_dims(x, pert_features)
    return spec.loss.deriv_scalar(sample.label, pert_features.dot(x)), pert_features


def perturbed_grad(spec, x, sample, pert_features):
    """Full gradient of ``phi(y x.xi) + (mu/2)||x||^2`` as a dense vector."""
    x = np.asarray(x, dtype=np.float64)
    scale, feats = loss_grad_only(spec, x, sample, pert_features)
    g = spec.mu * x
    g[feats.slot] += scale * feats.values
    return g


def perturbed_value(spec, x, sample, pert_features):
    x = np.asarray(x, dtype=np.float64)
    _check_dims(x, pert_features)
    z = pert_features.dot(x)
    return float(spec.loss.value(sample.label, z)) + 0.5 * spec.mu * float(x @ x)


def prox_l1(z, threshold):
    """Soft thresholding ``sign(z) * max(|z| - threshold, 0)``."""
    if threshold < 0:
        raise InvalidInputError("threshold must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    if threshold == 0:
        return z.copy()
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


def stacked_objective(spec, M, y, x):
    """Mean loss over the rows of ``M`` plus both regularizers.

    ``M`` may be dense or scipy-sparse; each row carries its own label.
    """
    if M.shape[0] == 0:
        return 0.5 * spec.mu * float(x @ x) + spec.h(x)
    margins = M @ x
    return (float(np.mean(spec.loss.value(y, margins)))
            + 0.5 * spec.mu * float(x @ x) + spec.h(x))


def stacked_gradient(spec, M, y, x):
    """Gradient of the smooth part of :func:`stacked_objective`."""
    margins = M @ x
    d = spec.loss.deriv(y, margins) / M.shape[0]
    return np.asarray(M.T @ d).ravel() + spec.mu * x


def full_objective(spec, dataset, x, pert_model=None):
    """Objective value ``F(x)`` with the expectation over perturbations.

    ``pert_model`` is anything exposing ``stacked(dataset) -> (M, y)`` with
    the same number of rows per example (a finite pool, or a Monte Carlo
    estimator with fixed seed); ``None`` means unperturbed data.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dataset.dim,):
        raise InvalidInputError(f"iterate has shape {x.shape}, dataset dim is {dataset.dim}")
    if pert_model is None:
        M, y = dataset.matrix(), dataset.labels
    else:
        M, y = pert_model.stacked(dataset)
    return stacked_objective(spec, M, y, x)
