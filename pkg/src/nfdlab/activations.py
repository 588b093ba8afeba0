"""Activation functions with derivatives and Lipschitz metadata."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity phi with derivative and Lipschitz constants.

    k1 is the Lipschitz constant of phi. k2 is the Lipschitz constant of
    phi' where it exists; relu has no Lipschitz derivative (k2 is None), so
    tanh is the right choice wherever smooth-derivative assumptions matter.
    relu's derivative at 0 is defined as 0.
    """

    kind: str
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    deriv: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    k1: float
    k2: Optional[float]

    def __call__(self, x):
        return self.fn(x)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_deriv(x):
    return np.where(np.asarray(x) > 0.0, 1.0, 0.0)


def _tanh_deriv(x):
    t = np.tanh(x)
    return 1.0 - t * t


_ACTIVATIONS = {
    "relu": Activation("relu", _relu, _relu_deriv, k1=1.0, k2=None),
    "identity": Activation(
        "identity", lambda x: np.asarray(x, dtype=np.float64) + 0.0,
        lambda x: np.ones_like(np.asarray(x, dtype=np.float64)),
        k1=1.0, k2=0.0,
    ),
    # max |d/dx (1 - tanh^2 x)| = 4/(3*sqrt(3))
    "tanh": Activation("tanh", np.tanh, _tanh_deriv, k1=1.0, k2=4.0 / (3.0 * np.sqrt(3.0))),
}


def get_activation(kind) -> Activation:
    if isinstance(kind, Activation):
        return kind
    try:
        return _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}",
            field="activation",
        ) from None
