"""Closed-form BPST one-instanton family with analytic curvature.

Both gauges of the standard charge-one anti-self-dual connection on R^4:

* regular:  A^a_mu = sqrt(2) etabar^a_{mu nu} y_nu / (|y|^2 + lam^2)
* singular: A^a_mu = sqrt(2) eta^a_{mu nu} lam^2 y_nu / (|y|^2 (|y|^2 + lam^2))

with y = x - q and su(2) coefficients in the orthonormal basis of
`su2`.  The curvature density is 48 lam^4 / (lam^2 + r^2)^4 in both
gauges and integrates to 8 pi^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gauge import ConnectionField, constant_gauge_rotation, zero_connection
from .geometry import DomainError, as_points
from .su2 import ETA, ETABAR, PAIRS, SQRT2, quat_normalize

_SINGULAR_GUARD = 1e-12


@dataclass(frozen=True)
class BpstParams:
    centre: np.ndarray = field(default_factory=lambda: np.zeros(4))
    lam: float = 1.0
    rho: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    flavor: str = "regular"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("instanton scale must be positive")
        if self.flavor not in ("regular", "singular"):
            raise ValueError("flavor must be 'regular' or 'singular'")
        object.__setattr__(self, "centre", np.asarray(self.centre, dtype=float))
        object.__setattr__(self, "rho", quat_normalize(np.asarray(self.rho, dtype=float)))

    def to_json(self):
        return {
            "q": list(map(float, self.centre)),
            "lambda": float(self.lam),
            "rho": list(map(float, self.rho)),
            "flavor": self.flavor,
        }

    @staticmethod
    def from_json(obj) -> "BpstParams":
        return BpstParams(
            centre=np.asarray(obj.get("q", [0, 0, 0, 0]), dtype=float),
            lam=float(obj.get("lambda", 1.0)),
            rho=np.asarray(obj.get("rho", [1, 0, 0, 0]), dtype=float),
            flavor=obj.get("flavor", "regular"),
        )

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


# eta symbols reduced to the mu < nu pairs, shape (6, 3)
_ETA6 = np.array([[ETA[a, mu, nu] for a in range(3)] for (mu, nu) in PAIRS])
_ETABAR6 = np.array([[ETABAR[a, mu, nu] for a in range(3)] for (mu, nu) in PAIRS])


def _regular_ev(centre, lam):
    def ev(x):
        x, _ = as_points(x)
        y = x - centre
        denom = np.sum(y * y, axis=-1) + lam * lam
        # A[n, mu, a] = sqrt(2) etabar[a, mu, nu] y[n, nu] / denom
        return SQRT2 * np.einsum("amn,xn->xma", ETABAR, y) / denom[:, None, None]

    def curv(x):
        x, _ = as_points(x)
        y = x - centre
        denom = (np.sum(y * y, axis=-1) + lam * lam) ** 2
        scale = -2.0 * SQRT2 * lam * lam / denom
        return scale[:, None, None] * _ETABAR6[None, :, :]

    return ev, curv


def _singular_ev(centre, lam):
    def ev(x):
        x, _ = as_points(x)
        y = x - centre
        r2 = np.sum(y * y, axis=-1)
        if np.any(r2 < _SINGULAR_GUARD**2):
            raise DomainError("singular-gauge instanton evaluated at its centre")
        denom = r2 * (r2 + lam * lam)
        return SQRT2 * lam * lam * np.einsum("amn,xn->xma", ETA, y) / denom[:, None, None]

    def curv(x):
        x, _ = as_points(x)
        y = x - centre
        r2 = np.sum(y * y, axis=-1)
        if np.any(r2 < _SINGULAR_GUARD**2):
            raise DomainError("singular-gauge instanton evaluated at its centre")
        w = np.einsum("amn,xn->xma", ETA, y)  # w[x, mu, a] = eta^a_{mu nu} y_nu
        f = np.empty((x.shape[0], 6, 3))
        for i, (mu, nu) in enumerate(PAIRS):
            f[:, i] = _ETA6[i][None, :] + (2.0 / r2)[:, None] * (
                y[:, mu, None] * w[:, nu] - y[:, nu, None] * w[:, mu]
            )
        scale = -2.0 * SQRT2 * lam * lam / (r2 + lam * lam) ** 2
        return scale[:, None, None] * f

    return ev, curv


def bpst(params: BpstParams) -> ConnectionField:
    """Charge-one anti-self-dual instanton field with analytic curvature."""
    centre = params.centre
    lam = float(params.lam)
    if params.flavor == "regular":
        ev, curv = _regular_ev(centre, lam)
    else:
        ev, curv = _singular_ev(centre, lam)
    out = ConnectionField(ev=ev, curv_ev=curv, provenance="bpst")
    return constant_gauge_rotation(out, params.rho)


def product_connection() -> ConnectionField:
    """The flat connection Theta: A = 0 with Centre 0 and Scale 0."""
    return zero_connection()


def bpst_density(params: BpstParams):
    """Analytic curvature density |F|^2 = 48 lam^4 / (lam^2 + r^2)^4."""
    centre, lam = params.centre, float(params.lam)

    def density(x):
        x, _ = as_points(x)
        r2 = np.sum((x - centre) ** 2, axis=-1)
        return 48.0 * lam**4 / (lam**2 + r2) ** 4

    return density
