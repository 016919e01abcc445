"""Charts on the four-sphere, conformal maps, metrics, and quadrature.

The base manifold is S^4 with its round metric of radius one, represented
in the north stereographic chart, so every metric in this package is
conformally flat: g = h(x)^2 delta.  Points are plain numpy arrays of
shape (..., 4).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .su2 import PAIRS


class DomainError(ValueError):
    """A field or map was evaluated outside its domain."""


class ConfigError(ValueError):
    """Invalid grid or run configuration."""


def as_points(x):
    """Coerce input to an (N, 4) array, remembering if it was a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


# ---------------------------------------------------------------------------
# conformal maps of R^4 (dilation + translation + optional rotation)

@dataclass(frozen=True)
class ConformalMap:
    """The map x -> R (x - q) / lam with constant Jacobian R / lam."""

    lam: float = 1.0
    q: np.ndarray = field(default_factory=lambda: np.zeros(4))
    rot: Optional[np.ndarray] = None  # 4x4 orthogonal, None means identity

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("conformal map scale must be positive")
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        if self.rot is not None:
            r = np.asarray(self.rot, dtype=float)
            if np.max(np.abs(r.T @ r - np.eye(4))) > 1e-12:
                raise ConfigError("rotation must be orthogonal to 1e-12")
            object.__setattr__(self, "rot", r)

    @property
    def jacobian(self):
        r = np.eye(4) if self.rot is None else self.rot
        return r / self.lam

    def apply(self, x):
        x, single = as_points(x)
        y = (x - self.q) / self.lam
        if self.rot is not None:
            y = y @ self.rot.T
        return y[0] if single else y

    def inverse(self):
        r = np.eye(4) if self.rot is None else self.rot
        return ConformalMap(lam=1.0 / self.lam, q=-(r @ self.q) / self.lam, rot=r.T)

    def compose(self, other: "ConformalMap") -> "ConformalMap":
        """self after other: (self.compose(other)).apply = self.apply(other.apply(x))."""
        r_s = np.eye(4) if self.rot is None else self.rot
        r_o = np.eye(4) if other.rot is None else other.rot
        # self(other(x)) = Rs (Ro (x - qo)/lo - qs)/ls
        lam = self.lam * other.lam
        q = other.q + other.lam * (r_o.T @ self.q)
        rot = r_s @ r_o
        if np.max(np.abs(rot - np.eye(4))) < 1e-15:
            rot = None
        return ConformalMap(lam=lam, q=q, rot=rot)


def conformal_eval(cmap: ConformalMap, x):
    """Evaluate a conformal map and its (constant) Jacobian."""
    return cmap.apply(x), cmap.jacobian


def chart_transition(x):
    """North-to-south chart transition: quaternionic inversion.

    |output| = 1/|x|; the origin (south pole seen from the north chart's
    target) is not in the domain.
    """
    x, single = as_points(x)
    n2 = np.sum(x * x, axis=-1, keepdims=True)
    if np.any(n2 == 0.0):
        raise DomainError("chart transition is undefined at the origin")
    out = x / n2
    out[:, 1:] *= -1.0
    return out[0] if single else out


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricField:
    """Pointwise metric, conformally flat whenever `factor` is given.

    `factor` returns h with g = h^2 delta; `tensor` returns the full 4x4
    matrix field (derived from `factor` when conformally flat).
    """

    factor: Optional[Callable[[np.ndarray], np.ndarray]] = None
    tensor_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "metric"

    def conformal_factor(self, x):
        if self.factor is None:
            return None
        x, single = as_points(x)
        h = self.factor(x)
        return h[0] if single else h

    def tensor(self, x):
        x, single = as_points(x)
        if self.factor is not None:
            h = self.factor(x)
            g = np.einsum("n,ij->nij", h * h, np.eye(4))
        else:
            g = self.tensor_fn(x)
        return g[0] if single else g


def round_factor(x):
    """Conformal factor h_1(x) = 2 / (1 + |x|^2) of the round metric."""
    x = np.asarray(x, dtype=float)
    return 2.0 / (1.0 + np.sum(x * x, axis=-1))


def round_metric() -> MetricField:
    """Round metric of the unit S^4 in the north stereographic chart."""
    return MetricField(factor=round_factor, name="round")


def flat_metric() -> MetricField:
    return MetricField(factor=lambda x: np.ones(x.shape[0]), name="flat")


def conformal_metric(factor, name="conformal") -> MetricField:
    return MetricField(factor=factor, name=name)


# ---------------------------------------------------------------------------
# quadrature

def _gauss_legendre(n):
    return np.polynomial.legendre.leggauss(n)


def _generic_rotation():
    """A fixed SO(4) rotation leaving no coordinate direction special.

    Applied to every S^3 rule so that structures sitting on coordinate
    axes (the product mesh's worst covering directions) are sampled like
    generic directions.
    """
    rng = np.random.default_rng(1234321)
    m = rng.normal(size=(4, 4))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


_S3_ROTATION = _generic_rotation()


def _s3_rule(order):
    """Product rule on the unit S^3, exact total weight 2 pi^2.

    Chebyshev (second kind) nodes in cos(theta1) carry the sin^2 weight
    exactly, Gauss-Legendre handles cos(theta2), and a trapezoid rule in
    phi closes the product; a fixed generic rotation de-aligns the mesh
    from the coordinate axes.  Returns (directions, weights).
    """
    n = int(order)
    if n < 2:
        raise ConfigError("s3 order must be >= 2")
    i = np.arange(1, n + 1)
    t1 = np.cos(i * np.pi / (n + 1))
    w1 = (np.pi / (n + 1)) * np.sin(i * np.pi / (n + 1)) ** 2
    t2, w2 = _gauss_legendre(n)
    nphi = 2 * n
    phi = 2.0 * np.pi * (np.arange(nphi) + 0.5) / nphi
    wphi = np.full(nphi, 2.0 * np.pi / nphi)

    s1 = np.sqrt(1.0 - t1**2)
    s2 = np.sqrt(1.0 - t2**2)
    dirs = np.empty((n, n, nphi, 4))
    dirs[..., 0] = t1[:, None, None]
    dirs[..., 1] = s1[:, None, None] * t2[None, :, None]
    dirs[..., 2] = (s1[:, None] * s2[None, :])[:, :, None] * np.cos(phi)[None, None, :]
    dirs[..., 3] = (s1[:, None] * s2[None, :])[:, :, None] * np.sin(phi)[None, None, :]
    w = w1[:, None, None] * w2[None, :, None] * wphi[None, None, :]
    return dirs.reshape(-1, 4) @ _S3_ROTATION.T, w.reshape(-1)


def _radial_breakpoints(r_min, r_max, panels, min_ratio=1e-8):
    """Log-spaced panel breakpoints; a leading [0, r_small] panel if r_min = 0."""
    if not (0 <= r_min < r_max):
        raise ConfigError("need 0 <= r_min < r_max")
    if panels < 1:
        raise ConfigError("need at least one radial panel")
    if r_min > 0:
        return np.geomspace(r_min, r_max, panels + 1)
    if panels == 1:
        return np.array([0.0, r_max])
    r_small = r_max * min_ratio
    return np.concatenate([[0.0], np.geomspace(r_small, r_max, panels)])


@dataclass
class QuadratureGrid:
    """Radial-panel x S^3 product rule with flat-measure weights.

    `nodes` has shape (M, 4) (chart coordinates), `weights` (M,) include
    the flat volume element r^3 dr dOmega; metric volume factors are
    applied by the norm routines.
    """

    nodes: np.ndarray
    weights: np.ndarray
    region: str
    centre: np.ndarray
    r_min: float
    r_max: float
    radial_nodes: int
    s3_nodes: int
    breakpoints: np.ndarray

    @property
    def node_count(self):
        return self.nodes.shape[0]

    def radii(self):
        return np.linalg.norm(self.nodes - self.centre, axis=-1)

    def restrict(self, mask):
        """Sub-grid on a boolean node mask (for tail/region integrals)."""
        return QuadratureGrid(
            nodes=self.nodes[mask],
            weights=self.weights[mask],
            region=self.region + "|restricted",
            centre=self.centre,
            r_min=self.r_min,
            r_max=self.r_max,
            radial_nodes=self.radial_nodes,
            s3_nodes=self.s3_nodes,
            breakpoints=self.breakpoints,
        )


def build_grid(
    r_min=0.0,
    r_max=1.0,
    panels=8,
    gauss_order=6,
    s3_order=4,
    region="ball",
    centre=(0.0, 0.0, 0.0, 0.0),
    min_ratio=None,
) -> QuadratureGrid:
    """Composite Gauss-Legendre x S^3 grid with log-spaced radial panels.

    `region` is a tag: "ball", "annulus", or "full_chart"; it does not
    change the rule, only records intent (full-chart grids should use a
    large r_max so the round volume tail is negligible).
    """
    if gauss_order < 2 or s3_order < 2:
        raise ConfigError("quadrature orders must be >= 2")
    if min_ratio is None:
        min_ratio = 1e-8
    bp = _radial_breakpoints(float(r_min), float(r_max), int(panels), min_ratio)
    gl_x, gl_w = _gauss_legendre(int(gauss_order))
    r_nodes, r_weights = [], []
    for a, b in zip(bp[:-1], bp[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        r_nodes.append(mid + half * gl_x)
        r_weights.append(half * gl_w)
    r_nodes = np.concatenate(r_nodes)
    r_weights = np.concatenate(r_weights)

    dirs, s3_w = _s3_rule(s3_order)
    centre = np.asarray(centre, dtype=float)
    nodes = centre[None, None, :] + r_nodes[:, None, None] * dirs[None, :, :]
    weights = (r_weights * r_nodes**3)[:, None] * s3_w[None, :]
    return QuadratureGrid(
        nodes=nodes.reshape(-1, 4),
        weights=weights.reshape(-1),
        region=str(region),
        centre=centre,
        r_min=float(r_min),
        r_max=float(r_max),
        radial_nodes=r_nodes.size,
        s3_nodes=dirs.shape[0],
        breakpoints=bp,
    )


def grid_from_spec(spec: dict) -> QuadratureGrid:
    """Build a grid from the JSON object {r_min, r_max, panels, ...}."""
    known = {"r_min", "r_max", "panels", "gauss_order", "s3_order", "region", "centre", "min_ratio"}
    extra = set(spec) - known
    if extra:
        raise ConfigError(f"unknown grid keys: {sorted(extra)}")
    return build_grid(**spec)


# ---------------------------------------------------------------------------
# integration

def integrate(values, grid: QuadratureGrid, metric: Optional[MetricField] = None):
    """Integrate scalar node values against the grid, dV_g = h^4 d^4x."""
    values = np.asarray(values, dtype=float)
    w = grid.weights
    if metric is not None and metric.name != "flat":
        h = metric.conformal_factor(grid.nodes)
        if h is None:
            g = metric.tensor(grid.nodes)
            w = w * np.sqrt(np.linalg.det(g))
        else:
            w = w * h**4
    return float(np.sum(values * w))


def pointwise_norm(values, metric: Optional[MetricField], nodes):
    """Metric pointwise norm of field values at nodes.

    Shapes: (N,) or (N, 3) scalars, (N, 4, 3) one-forms, (N, 6, 3)
    two-forms (mu < nu pairs).  Index raising uses g = h^2 delta.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        flat = np.abs(values)
        power = 0
    elif values.ndim == 2 and values.shape[1] == 3:
        flat = np.linalg.norm(values, axis=-1)
        power = 0
    elif values.ndim == 3 and values.shape[1] == 4:
        flat = np.sqrt(np.sum(values**2, axis=(1, 2)))
        power = 1
    elif values.ndim == 3 and values.shape[1] == 6:
        flat = np.sqrt(np.sum(values**2, axis=(1, 2)))
        power = 2
    else:
        raise ValueError(f"unsupported field value shape {values.shape}")
    if power == 0 or metric is None or metric.name == "flat":
        return flat
    h = metric.conformal_factor(nodes)
    if h is None:
        raise NotImplementedError("pointwise norms for non-conformal metrics")
    return flat / h**power


def lp_norm(field, p, metric: Optional[MetricField], grid: QuadratureGrid):
    """(integral |field|_g^p dV_g)^(1/p) over the grid region.

    `field` maps (N, 4) nodes to values of any supported rank; evaluation
    errors at specific nodes are reported with the node location.
    """
    if p < 1:
        raise ConfigError("p must be >= 1")
    values = np.asarray(field(grid.nodes), dtype=float)
    if not np.all(np.isfinite(values)):
        bad = np.where(~np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1))[0]
        raise DomainError(f"non-finite field value at node {grid.nodes[bad[0]]}")
    norms = pointwise_norm(values, metric, grid.nodes)
    return integrate(norms**p, grid, metric) ** (1.0 / p)


def l2_inner(field_a, field_b, metric, grid: QuadratureGrid):
    """L^2 pairing of two fields of equal rank (indices raised with g)."""
    va = np.asarray(field_a(grid.nodes), dtype=float)
    vb = np.asarray(field_b(grid.nodes), dtype=float)
    if va.shape != vb.shape:
        raise ValueError("fields must have matching shape")
    if va.ndim == 1:
        dots, power = va * vb, 0
    elif va.ndim == 2:
        dots, power = np.sum(va * vb, axis=-1), 0
    else:
        dots = np.sum(va * vb, axis=(1, 2))
        power = 1 if va.shape[1] == 4 else 2
    if power and metric is not None and metric.name != "flat":
        h = metric.conformal_factor(grid.nodes)
        dots = dots / h ** (2 * power)
    return integrate(dots, grid, metric)


STAR_SIGNS = np.array([1.0, -1.0, 1.0, 1.0, -1.0, 1.0])
STAR_PERM = np.array([5, 4, 3, 2, 1, 0])


def hodge_star_flat(f6):
    """Flat Hodge star on two-form components ordered as PAIRS."""
    f6 = np.asarray(f6, dtype=float)
    return STAR_SIGNS[:, None] * f6[..., STAR_PERM, :]


def two_form_pullback_matrix(jac):
    """Induced action of a linear map on the six mu < nu components."""
    m = np.empty((6, 6))
    for i, (mu, nu) in enumerate(PAIRS):
        for j, (r, s) in enumerate(PAIRS):
            m[i, j] = jac[r, mu] * jac[s, nu] - jac[r, nu] * jac[s, mu]
    return m
