"""Losses, their conjugates, the L2 regularizer and single-coordinate dual updates."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError, NumericalError

LOSS_CODES = {
    "squared_hinge": kernels.SQUARED_HINGE,
    "logistic": kernels.LOGISTIC,
    "least_squares": kernels.LEAST_SQUARES,
}

DEFAULT_SMOOTHNESS = {
    "squared_hinge": 2.0,
    "logistic": 0.5,
    "least_squares": 1.0,
}

CLASSIFICATION_LOSSES = ("squared_hinge", "logistic")


@dataclass(frozen=True)
class LossModel:
    """A smooth loss phi(z, y) with its smoothness constant L.

    Logistic defaults to L = 1/2; pass ``smoothness=0.25`` for the tight value.
    """

    kind: str = "squared_hinge"
    smoothness: float = None

    def __post_init__(self):
        if self.kind not in LOSS_CODES:
            raise ConfigError(f"unknown loss {self.kind!r}; expected one of {sorted(LOSS_CODES)}")
        if self.smoothness is None:
            object.__setattr__(self, "smoothness", DEFAULT_SMOOTHNESS[self.kind])
        if not self.smoothness > 0:
            raise ConfigError("loss smoothness must be positive")

    @property
    def code(self):
        return LOSS_CODES[self.kind]

    @property
    def is_classification(self):
        return self.kind in CLASSIFICATION_LOSSES


@dataclass(frozen=True)
class Regularizer:
    """g(w) = (lam/2) ||w||^2."""

    lam: float
    kind: str = "l2"

    def __post_init__(self):
        if self.kind != "l2":
            raise ConfigError(f"only the l2 regularizer is implemented, got {self.kind!r}")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")

    def value(self, w):
        w = np.asarray(w, dtype=float)
        return 0.5 * self.lam * float(w @ w)

    def conjugate(self, v):
        v = np.asarray(v, dtype=float)
        return float(v @ v) / (2.0 * self.lam)

    def conjugate_grad(self, v):
        return np.asarray(v, dtype=float) / self.lam


@dataclass(frozen=True)
class IncrementProblem:
    alpha: float
    margin: float
    x_norm_sq: float
    scale: float
    lam: float
    n: int
    label: float


def _as_loss(loss):
    return loss if isinstance(loss, LossModel) else LossModel(loss)


def loss_value(loss, z, y):
    return kernels.loss_value(_as_loss(loss).code, float(z), float(y))


def loss_grad(loss, z, y):
    return kernels.loss_grad(_as_loss(loss).code, float(z), float(y))


def conjugate_neg(loss, a, y):
    """phi*(-a), the form that enters the dual objective.

    Raises DomainError when -a is outside the conjugate's domain
    (a*y < 0 for squared hinge, a*y outside [0, 1] for logistic).
    """
    loss = _as_loss(loss)
    val = kernels.conj_neg(loss.code, float(a), float(y))
    if val == np.inf:
        raise DomainError(f"a={a!r} (label {y!r}) is outside the {loss.kind} conjugate domain")
    return val


def increment_objective(loss, p, delta):
    """The concave 1-D function of delta that a dual update maximizes."""
    return kernels.increment_objective(
        _as_loss(loss).code, float(delta), p.alpha, p.margin, p.x_norm_sq, p.scale, p.lam, p.n, p.label
    )


def dual_increment(loss, p, constrained=True):
    """Optimal change of one dual variable.

    ``constrained=False`` lets squared hinge leave its conjugate domain
    (the textbook closed form); logistic and least squares ignore the flag.
    """
    loss = _as_loss(loss)
    delta = kernels.dual_increment(
        loss.code, float(p.alpha), float(p.margin), float(p.x_norm_sq), float(p.scale),
        float(p.lam), float(p.n), float(p.label), bool(constrained),
    )
    if delta != delta:
        raise NumericalError(
            f"logistic dual update did not converge in {kernels.NEWTON_MAX_ITER} iterations "
            f"(alpha={p.alpha}, margin={p.margin})"
        )
    return delta


def primal_from_dual(reg, v):
    return reg.conjugate_grad(v)
