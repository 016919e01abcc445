"""Finite-difference differentials of the approximate gluing maps.

Central differences of the spliced connection A' (per vertex chart) and
of its base pullback A-hat' in the gluing-parameter directions: scales
lam_I (with cutoffs b_I = 4 N sqrt(lam_I) co-varying), centres p_I,
bundle gluing rotations v_I, and the k = 1 lower moduli (the bubble's own
centre and scale).  L^2 norms are taken chart by chart over the kept
regions with the connected-sum metric, and raw L^2 pairings provide the
upper-bound surrogate for the moduli-space metric (no horizontal
projection).  Log-log fits check the predicted scaling exponents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .geometry import ConfigError, as_points, build_grid, l2_inner
from .instanton import BpstParams
from .splice import GluingTree, SplicedConnection, gamma_profile_d, splice
from .su2 import bracket


@dataclass(frozen=True)
class ParamDirection:
    """One tangent direction of the gluing-parameter space.

    kind: "scale" | "centre" | "rotation" | "modulus_scale" | "modulus_centre";
    `direction` is a unit 4-vector for centre kinds and an su(2)
    coefficient vector (|v| <= 1) for rotations.
    """

    kind: str
    vertex: str
    direction: Optional[np.ndarray] = None

    def __post_init__(self):
        kinds = ("scale", "centre", "rotation", "modulus_scale", "modulus_centre")
        if self.kind not in kinds:
            raise ConfigError(f"direction kind must be one of {kinds}")
        if self.kind in ("centre", "rotation", "modulus_centre"):
            if self.direction is None:
                raise ConfigError(f"{self.kind} direction needs a vector")
            object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))


def _step_size(tree: GluingTree, direction: ParamDirection, h: float) -> float:
    """Absolute parameter increment used on each side of the difference."""
    node = tree.nodes[direction.vertex]
    if direction.kind == "scale":
        return h * node.lam
    if direction.kind == "modulus_scale":
        return h * node.conn.lam
    if direction.kind == "centre":
        return h * np.sqrt(node.lam)  # resolves the cutoff annulus structure
    if direction.kind == "modulus_centre":
        return h * node.conn.lam
    return h


def _perturbed_tree(tree: GluingTree, direction: ParamDirection, delta: float, sign: int) -> GluingTree:
    node = tree.nodes[direction.vertex]
    s = sign * delta
    if direction.kind == "scale":
        return tree.replace_node(direction.vertex, lam=node.lam + s, b=None)
    if direction.kind == "centre":
        return tree.replace_node(direction.vertex, site=node.site + s * direction.direction)
    if direction.kind == "modulus_scale":
        params = node.conn
        return tree.replace_node(direction.vertex, conn=replace(params, lam=params.lam + s))
    if direction.kind == "modulus_centre":
        params = node.conn
        return tree.replace_node(
            direction.vertex, conn=replace(params, centre=params.centre + s * direction.direction)
        )
    raise ConfigError("rotation directions do not perturb the tree")


class DerivativeField:
    """Central difference of A' (and A-hat') in one parameter direction."""

    def __init__(self, tree: GluingTree, direction: ParamDirection, h=1e-3, ode_steps=64):
        self.tree = tree
        self.direction = direction
        self.h = float(h)
        self.ode_steps = ode_steps
        self.centre_spliced = splice(tree, validate=False, ode_steps=ode_steps)
        if direction.kind == "rotation":
            self.delta = self.h
            self.plus = self.minus = None
        else:
            self.delta = _step_size(tree, direction, self.h)
            self.plus = splice(_perturbed_tree(tree, direction, self.delta, +1), validate=False, ode_steps=ode_steps)
            self.minus = splice(_perturbed_tree(tree, direction, self.delta, -1), validate=False, ode_steps=ode_steps)

    # -- rotation direction: analytic gamma-cutoff gauge family ------------

    def _gamma_tilde(self, z, with_grad=False):
        """Sphere-side partition function pulled to the parent chart."""
        node = self.tree.nodes[self.direction.vertex]
        y = z - node.site
        r = np.linalg.norm(y, axis=-1)
        root = np.sqrt(node.lam)
        from .splice import gamma_profile

        val = 1.0 - gamma_profile(r / root)
        if not with_grad:
            return val
        rsafe = np.maximum(r, 1e-300)
        grad = (-gamma_profile_d(r / root) / root)[:, None] * (y / rsafe[:, None])
        return val, grad

    def chart_values(self, nid, pts):
        """Derivative of the chart-nid local form of A' at chart points."""
        pts, _ = as_points(pts)
        if self.direction.kind == "rotation":
            node = self.tree.nodes[self.direction.vertex]
            if nid != node.parent:
                return np.zeros((pts.shape[0], 4, 3))
            # splice-gauge family exp(s gamma~ v): exactly d(gamma~) ^ v
            # plus the bracket with the (flat, zero) spliced form.
            _, grad = self._gamma_tilde(pts, with_grad=True)
            v = self.direction.direction
            return grad[:, :, None] * v[None, None, :]
        ap = self.plus.chart_field(nid).ev(pts)
        am = self.minus.chart_field(nid).ev(pts)
        return (ap - am) / (2.0 * self.delta)

    def base_values(self, pts):
        """Derivative of the base pullback A-hat' at base-chart points."""
        pts, _ = as_points(pts)
        if self.direction.kind == "rotation":
            # push the parent-chart annulus form down to the base chart
            groups = self.centre_spliced.descend(pts)
            out = np.zeros((pts.shape[0], 4, 3))
            parent = self.tree.nodes[self.direction.vertex].parent
            for gid, indices, chart_pts, jac in groups:
                if gid != parent or indices.size == 0:
                    continue
                vals = self.chart_values(parent, chart_pts)
                out[indices] = np.einsum("nm,xnc->xmc", jac, vals)
            return out
        ap = self.plus.pullback_to_base().ev(pts)
        am = self.minus.pullback_to_base().ev(pts)
        return (ap - am) / (2.0 * self.delta)

    # -- support and norms ---------------------------------------------------

    def _support(self):
        """(chart grids, base grids) adapted to the direction's support."""
        tree = self.tree
        direction = self.direction
        node = tree.nodes[direction.vertex]
        parent = node.parent
        b = tree.b_of(direction.vertex)
        root = np.sqrt(node.lam)
        n = tree.n_width
        chart_grids = []  # (vertex id, grid)
        base_grids = []

        def parent_to_base(radii, centre):
            """Root-chart image of a parent-chart annulus of the vertex."""
            lam_chain, point = 1.0, np.asarray(centre, dtype=float)
            nid = parent
            while tree.nodes[nid].parent is not None:
                pnode = tree.nodes[nid]
                point = pnode.site + pnode.lam * point
                lam_chain *= pnode.lam
                nid = tree.nodes[nid].parent
            return (radii[0] * lam_chain, radii[1] * lam_chain), point

        if direction.kind == "rotation":
            ann = (0.45 * root, 2.1 * root)
            chart_grids.append((parent, self._annulus(ann, node.site)))
            (r0, r1), cen = parent_to_base(ann, node.site)
            base_grids.append(self._annulus((r0, r1), cen))
            return chart_grids, base_grids

        if direction.kind == "scale":
            site_ann = (0.45 * b, 1.1 * b)
            chart_grids.append((parent, self._annulus(site_ann, node.site)))
            south_ann = (0.85 / b, 2.3 / b)
            chart_grids.append((direction.vertex, self._annulus(south_ann, np.zeros(4))))
        elif direction.kind == "centre":
            ball = (0.9 * root / n, 1.1 * b)
            chart_grids.append((parent, self._annulus(ball, node.site, panels=10)))
        else:  # lower moduli: the vertex's whole cut bubble
            lam_b = node.conn.lam
            grid = build_grid(
                r_min=0.0,
                r_max=2.3 / b,
                panels=16,
                gauss_order=8,
                s3_order=4,
                region="chart",
                centre=node.conn.centre,
                min_ratio=min(1e-3 * lam_b / (2.3 / b), 1e-8),
            )
            chart_grids.append((direction.vertex, grid))

        # base support: the bubble image ball plus the parent-side annulus
        lam_b = node.conn.lam if node.conn != "product" else 1.0
        (r0, r1), cen = parent_to_base((node.lam * lam_b, 1.1 * b), node.site)
        base_grids.append(
            build_grid(
                r_min=0.0,
                r_max=r1,
                panels=18,
                gauss_order=8,
                s3_order=4,
                region="ball",
                centre=cen,
                min_ratio=min(1e-3 * r0 / r1, 1e-8),
            )
        )
        return chart_grids, base_grids

    @staticmethod
    def _annulus(radii, centre, panels=8, gauss_order=8, s3_order=4):
        return build_grid(
            r_min=radii[0],
            r_max=radii[1],
            panels=panels,
            gauss_order=gauss_order,
            s3_order=s3_order,
            region="annulus",
            centre=centre,
        )

    def norm_x(self) -> float:
        """|| dA'/dtheta ||_{L^2(X, g)} summed over the kept regions."""
        chart_grids, _ = self._support()
        total = 0.0
        for nid, grid in chart_grids:
            keep = self.centre_spliced.region_mask(nid, grid.nodes)
            sub = grid.restrict(keep)
            if sub.node_count == 0:
                continue
            vals = self.chart_values(nid, sub.nodes)
            h = self.centre_spliced.metric.conformal_factor(nid)(sub.nodes)
            total += float(np.sum(np.sum(vals**2, axis=(1, 2)) * h**2 * sub.weights))
        return float(np.sqrt(total))

    def norm_base(self) -> float:
        """|| dA-hat'/dtheta ||_{L^2(X_0, g_0)}."""
        from .geometry import round_factor

        _, base_grids = self._support()
        total = 0.0
        for grid in base_grids:
            vals = self.base_values(grid.nodes)
            h = round_factor(grid.nodes)
            total += float(np.sum(np.sum(vals**2, axis=(1, 2)) * h**2 * grid.weights))
        return float(np.sqrt(total))


def param_derivative(tree: GluingTree, direction: ParamDirection, h=1e-3, ode_steps=64) -> DerivativeField:
    """Central-difference derivative of the spliced family; cutoffs co-vary."""
    for sign in (+1, -1):
        if direction.kind != "rotation":
            _ = _perturbed_tree(tree, direction, h, sign)  # raises on bad params
    return DerivativeField(tree, direction, h=h, ode_steps=ode_steps)


def gluing_rotation_derivative(tree: GluingTree, vertex: str, v) -> "AnalyticRotationField":
    """The analytic moduli tangent d_{A'}(gamma_I v) for a gluing rotation."""
    return AnalyticRotationField(tree, vertex, np.asarray(v, dtype=float))


class AnalyticRotationField:
    """d_{A'}(gamma_I v): d(gamma) ^ v plus the bracket with A' (flat there)."""

    def __init__(self, tree: GluingTree, vertex: str, v):
        self.tree = tree
        self.vertex = vertex
        self.v = v
        self.spliced = splice(tree, validate=False)
        self._fd = DerivativeField(tree, ParamDirection(kind="rotation", vertex=vertex, direction=v))

    def chart_values(self, nid, pts):
        pts, _ = as_points(pts)
        node = self.tree.nodes[self.vertex]
        if nid != node.parent:
            return np.zeros((pts.shape[0], 4, 3))
        val, grad = self._fd._gamma_tilde(pts, with_grad=True)
        out = grad[:, :, None] * self.v[None, None, :]
        a_splice = self.spliced.splice_gauge_field(nid).ev(pts)
        for mu in range(4):
            out[:, mu] += bracket(a_splice[:, mu], val[:, None] * self.v[None, :])
        return out

    def norm_x(self) -> float:
        node = self.tree.nodes[self.vertex]
        root = np.sqrt(node.lam)
        grid = DerivativeField._annulus((0.45 * root, 2.1 * root), node.site)
        vals = self.chart_values(node.parent, grid.nodes)
        h = self.spliced.metric.conformal_factor(node.parent)(grid.nodes)
        return float(np.sqrt(np.sum(np.sum(vals**2, axis=(1, 2)) * h**2 * grid.weights)))


def l2_pairing(field_a, field_b, metric, grid) -> float:
    """Raw L^2 pairing: the upper-bound surrogate for the moduli metric."""
    return l2_inner(field_a, field_b, metric, grid)


@dataclass
class ScalingFit:
    samples: List[tuple]
    slope: float
    intercept: float
    r2: float

    def to_json(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "n": len(self.samples),
            "samples": [[float(a), float(b)] for a, b in self.samples],
        }


def exponent_fit(samples) -> ScalingFit:
    """Least-squares slope of log(value) against log(lam)."""
    samples = [(float(a), float(b)) for a, b in samples]
    if len(samples) < 3:
        raise ConfigError("need >= 3 samples for an exponent fit")
    lam = np.array([s[0] for s in samples])
    val = np.array([s[1] for s in samples])
    if np.any(lam <= 0) or np.any(val <= 0):
        raise ConfigError("exponent fit needs positive scales and values")
    if np.unique(lam).size != lam.size:
        raise ConfigError("scales must be distinct")
    x, y = np.log(lam), np.log(val)
    a = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    pred = a @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return ScalingFit(samples=samples, slope=float(coef[0]), intercept=float(coef[1]), r2=r2)


def differential_table(tree: GluingTree, lam_grid, directions, vertex="1", h=1e-3):
    """Norm table of the gluing-map differentials over a scale grid.

    Rows are dicts {direction, vertex, lambda, norm_X, norm_base}; the
    tree is re-scaled at `vertex` for each grid value.
    """
    rows = []
    for lam in lam_grid:
        scaled = tree.replace_node(vertex, lam=float(lam), b=None)
        for direction in directions:
            d = param_derivative(scaled, direction, h=h)
            rows.append(
                {
                    "direction": direction.kind,
                    "vertex": direction.vertex,
                    "lambda": float(lam),
                    "norm_X": d.norm_x(),
                    "norm_base": d.norm_base(),
                }
            )
    return rows


def table_csv(rows) -> str:
    lines = ["direction,vertex,lambda,norm_X,norm_base"]
    for r in rows:
        lines.append(f"{r['direction']},{r['vertex']},{r['lambda']:.6e},{r['norm_X']:.10e},{r['norm_base']:.10e}")
    return "\n".join(lines) + "\n"


def fit_rows(rows, direction_kind, column="norm_X") -> ScalingFit:
    samples = [(r["lambda"], r[column]) for r in rows if r["direction"] == direction_kind and r[column] > 0]
    return exponent_fit(samples)
