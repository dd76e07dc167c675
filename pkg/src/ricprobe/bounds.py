"""Bound fields K (interior) and sigma (boundary) that enter the random measure."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBoundError
from .geometry import ricci_z_norm, second_form_norm


def _as_field(v, name):
    if callable(v):
        return v
    c = float(v)
    if not np.isfinite(c) or c < 0:
        raise InvalidBoundError(f"{name} must be finite and nonnegative, got {v}")

    def const(x):
        return np.full(np.shape(x)[:-1], c)

    const.constant = c
    return const


@dataclass
class Bounds:
    """``K: M -> [0, inf)`` and ``sigma: boundary -> [0, inf)``.

    Either may be a nonnegative constant or a vectorised callable on points.
    """

    K: object = 0.0
    sigma: object = 0.0

    def __post_init__(self):
        self._K = _as_field(self.K, "K")
        self._s = _as_field(self.sigma, "sigma")

    def k(self, x):
        v = np.asarray(self._K(x), dtype=float)
        if np.any(~(v >= 0)):
            raise InvalidBoundError("K takes negative or non-finite values")
        return v

    def s(self, b):
        v = np.asarray(self._s(b), dtype=float)
        if np.any(~(v >= 0)):
            raise InvalidBoundError("sigma takes negative or non-finite values")
        return v

    def scaled(self, factor):
        """Bounds multiplied pointwise by ``factor`` (used for monotonicity checks)."""
        return Bounds(lambda x: factor * self.k(x), lambda b: factor * self.s(b))

    def describe(self):
        k = getattr(self._K, "constant", "field")
        s = getattr(self._s, "constant", "field")
        return {"K": k, "sigma": s}


def true_bounds(M, slack=0.0):
    """The pointwise tensor norms of ``M`` (plus ``slack``) as a Bounds pair."""

    def K(x):
        return ricci_z_norm(M, x) + slack

    def sigma(b):
        return second_form_norm(M, b) + slack

    return Bounds(K, sigma)
