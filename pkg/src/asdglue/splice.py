"""Cutoff splicing of instantons over gluing trees.

A gluing tree hangs sphere vertices off a base chart: each edge carries a
site q_I in the parent chart, a scale lam_I, a cutoff radius
b_I >= 4 N sqrt(lam_I), and an SU(2) gluing rotation.  The spliced
connection A' is represented per vertex chart; the chart identification
maps are x = R (z - q) / lam, under which all metrics here are exactly
round (the base is S^4 in its north chart, so the recursive pulled-back
metrics collapse to h_1^2 delta on every summand) and only the conformal
neck factors m_I carry structure.

Curvature of the spliced field is analytic via
F(psi A) = psi F + d psi ^ A + (psi^2 - psi) [A, A].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .gauge import (
    ConnectionField,
    constant_gauge_rotation,
    curvature,
    radial_transport,
    selfdual_part,
    selfdual_norm,
)
from .geometry import (
    ConfigError,
    MetricField,
    QuadratureGrid,
    as_points,
    build_grid,
    round_factor,
    two_form_pullback_matrix,
)
from .instanton import BpstParams, bpst, product_connection
from .su2 import PAIRS, bracket, quat_conj, quat_mult, quat_normalize, quat_to_alg

# ---------------------------------------------------------------------------
# cutoff profiles

def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 + s * (-15.0 + 6.0 * s))


def smoothstep_d(s):
    s = np.clip(s, 0.0, 1.0)  # clamp before evaluating: avoids overflow at huge s
    return 30.0 * s * s * (1.0 - s) ** 2


def zeta(t):
    """C^2 bump: 0 for t <= 1/2, 1 for t >= 1."""
    return smoothstep(2.0 * np.asarray(t, dtype=float) - 1.0)


def zeta_d(t):
    return 2.0 * smoothstep_d(2.0 * np.asarray(t, dtype=float) - 1.0)


def gamma_profile(t):
    """C^2 bump: 0 for t <= 1/2, 1 for t >= 2."""
    return smoothstep((np.asarray(t, dtype=float) - 0.5) / 1.5)


def gamma_profile_d(t):
    return smoothstep_d((np.asarray(t, dtype=float) - 0.5) / 1.5) / 1.5


BETA_LOG_FRACTION = 0.6  # ramp covers this fraction of log N (exact -3/4 law)


@dataclass(frozen=True)
class CutoffFn:
    """One of the splicing cutoffs: psi_b, gamma_lam, or beta_{lam,N}."""

    kind: str  # psi | gamma | beta
    b: float = 0.0
    lam: float = 0.0
    n_width: float = 0.0

    def __post_init__(self):
        if self.kind not in ("psi", "gamma", "beta"):
            raise ConfigError("cutoff kind must be psi, gamma, or beta")
        if self.kind == "psi" and not self.b > 0:
            raise ConfigError("psi cutoff needs b > 0")
        if self.kind in ("gamma", "beta") and not self.lam > 0:
            raise ConfigError("gamma/beta cutoffs need lam > 0")
        if self.kind == "beta" and not self.n_width > 4:
            raise ConfigError("beta cutoff needs N > 4")


def cutoff_eval(c: CutoffFn, x):
    """Value and gradient of a cutoff; gradients live on the transition annulus."""
    x, single = as_points(x)
    r = np.linalg.norm(x, axis=-1)
    rsafe = np.maximum(r, 1e-300)
    xhat = x / rsafe[:, None]
    if c.kind == "psi":
        t = r / c.b
        val = zeta(t)
        dval = zeta_d(t) / c.b
    elif c.kind == "gamma":
        t = r / np.sqrt(c.lam)
        val = gamma_profile(t)
        dval = gamma_profile_d(t) / np.sqrt(c.lam)
    else:
        root = np.sqrt(c.lam)
        theta = BETA_LOG_FRACTION
        max_theta = 1.0 - np.log(2.0) / np.log(c.n_width)
        theta = min(theta, 0.95 * max_theta)
        width = theta * np.log(c.n_width)
        with np.errstate(divide="ignore"):
            u = np.log(np.maximum(c.n_width * r / root, 1e-300)) / width
        val = smoothstep(u)
        dval = smoothstep_d(u) / (width * rsafe)
    grad = dval[:, None] * xhat
    if single:
        return val[0], grad[0]
    return val, grad


# ---------------------------------------------------------------------------
# gluing trees

@dataclass(frozen=True)
class TreeNode:
    id: str
    parent: Optional[str]
    k: int
    conn: object  # "product" or BpstParams
    site: np.ndarray = field(default_factory=lambda: np.zeros(4))
    lam: float = 1.0
    b: Optional[float] = None
    rho: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    rot: Optional[np.ndarray] = None  # SO(4) chart rotation, None = identity

    def __post_init__(self):
        object.__setattr__(self, "site", np.asarray(self.site, dtype=float))
        object.__setattr__(self, "rho", quat_normalize(np.asarray(self.rho, dtype=float)))
        if self.rot is not None:
            object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float))


@dataclass
class GluingTree:
    nodes: Dict[str, TreeNode]
    n_width: float = 8.0
    lam0: float = 0.1
    b0: float = 0.25
    d0: Optional[float] = None

    ROOT = "0"

    def node(self, nid):
        return self.nodes[nid]

    def children(self, nid):
        return sorted(n.id for n in self.nodes.values() if n.parent == nid)

    def order(self):
        """Vertices sorted by depth then id (deterministic walk)."""
        return sorted(self.nodes, key=lambda nid: (self.depth(nid), nid))

    def depth(self, nid):
        d = 0
        seen = set()
        while self.nodes[nid].parent is not None:
            if nid in seen:
                raise ConfigError("gluing tree has a parent cycle")
            seen.add(nid)
            nid = self.nodes[nid].parent
            d += 1
        return d

    def b_of(self, nid):
        node = self.nodes[nid]
        if node.b is not None:
            return float(node.b)
        return 4.0 * self.n_width * np.sqrt(node.lam)

    def total_charge(self):
        return sum(n.k for n in self.nodes.values())

    def replace_node(self, nid, **edits) -> "GluingTree":
        nodes = dict(self.nodes)
        nodes[nid] = replace(nodes[nid], **edits)
        return GluingTree(nodes=nodes, n_width=self.n_width, lam0=self.lam0, b0=self.b0, d0=self.d0)

    # -- serialization ------------------------------------------------------

    def to_json(self):
        out = {"N": float(self.n_width), "lambda0": float(self.lam0), "b0": float(self.b0)}
        if self.d0 is not None:
            out["d0"] = float(self.d0)
        nodes = []
        for nid in self.order():
            n = self.nodes[nid]
            conn = "product" if n.conn == "product" else {"bpst": n.conn.to_json()}
            entry = {"id": n.id, "k": n.k, "conn": conn}
            if n.parent is not None:
                entry.update(
                    parent=n.parent,
                    x=list(map(float, n.site)),
                    **{"lambda": float(n.lam)},
                    rho=list(map(float, n.rho)),
                )
                if n.b is not None:
                    entry["b"] = float(n.b)
                if n.rot is not None:
                    entry["v"] = [list(map(float, row)) for row in n.rot]
            nodes.append(entry)
        out["nodes"] = nodes
        return out

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)

    @staticmethod
    def from_json(obj) -> "GluingTree":
        nodes = {}
        for entry in obj["nodes"]:
            conn = entry["conn"]
            conn = "product" if conn == "product" else BpstParams.from_json(conn["bpst"])
            nodes[entry["id"]] = TreeNode(
                id=entry["id"],
                parent=entry.get("parent"),
                k=int(entry["k"]),
                conn=conn,
                site=np.asarray(entry.get("x", [0, 0, 0, 0]), dtype=float),
                lam=float(entry.get("lambda", 1.0)),
                b=entry.get("b"),
                rho=np.asarray(entry.get("rho", [1, 0, 0, 0]), dtype=float),
                rot=np.asarray(entry["v"], dtype=float) if "v" in entry else None,
            )
        return GluingTree(
            nodes=nodes,
            n_width=float(obj.get("N", 8.0)),
            lam0=float(obj.get("lambda0", 0.1)),
            b0=float(obj.get("b0", 0.25)),
            d0=obj.get("d0"),
        )

    @staticmethod
    def loads(text) -> "GluingTree":
        return GluingTree.from_json(json.loads(text))


def validate_gluing_tree(tree: GluingTree) -> List[str]:
    """All gluing-data constraints; an empty list means the tree is usable.

    Size constraints are checked against the scales that actually interfere
    (sibling separation, parent-chart clearance); see the sibling rule
    dist > 4 (b_I + b_I').
    """
    v = []
    if tree.ROOT not in tree.nodes:
        v.append("structure: missing root vertex '0'")
        return v
    if tree.nodes[tree.ROOT].parent is not None:
        v.append("structure: root must have no parent")
    for nid, node in tree.nodes.items():
        if node.parent is not None and node.parent not in tree.nodes:
            v.append(f"structure: vertex {nid} has unknown parent {node.parent}")
    try:
        for nid in tree.nodes:
            tree.depth(nid)
    except ConfigError:
        v.append("structure: parent links contain a cycle")
        return v

    if not tree.n_width > 4:
        v.append("scales: neck parameter N must exceed 4")
    total = tree.total_charge()
    if total < 1:
        v.append("topology: total charge must be >= 1")
    if not any(n.k > 0 for n in tree.nodes.values() if n.parent is not None):
        v.append("topology: some vertex I > 0 must carry charge")

    for nid, node in tree.nodes.items():
        kids = tree.children(nid)
        if node.parent is not None and node.conn == "product" and len(kids) < 2:
            v.append(f"theta-branching: vertex {nid} is flat with {len(kids)} outgoing edges")
        if node.parent is not None and not kids and node.k <= 0:
            v.append(f"topology: terminal vertex {nid} must have k > 0")
        expected = 0 if node.conn == "product" else 1
        if node.k != expected:
            v.append(f"topology: vertex {nid} charge {node.k} does not match its connection")
        if node.parent is None:
            continue
        b = tree.b_of(nid)
        if node.lam <= 0 or node.lam > tree.lam0:
            v.append(f"scales: vertex {nid} scale {node.lam} outside (0, lambda0]")
        if b < 4.0 * tree.n_width * np.sqrt(node.lam) * (1 - 1e-12):
            v.append(f"scales: vertex {nid} cutoff b < 4 N sqrt(lambda)")
        if tree.d0 is not None and b >= 0.25 * min(1.0, tree.d0):
            v.append(f"scales: vertex {nid} cutoff b >= d0/4")
        parent = tree.nodes[node.parent]
        if parent.parent is not None:
            # keep the site clear of the parent's south cutoff ball
            bp = tree.b_of(node.parent)
            if (np.linalg.norm(node.site) + b) * bp > 0.5:
                v.append(f"south-clearance: vertex {nid} site too close to the south cutoff")
        if parent.conn != "product" and parent.conn.flavor == "singular":
            d_sing = np.linalg.norm(node.site - parent.conn.centre)
            if d_sing <= 4.0 * b:
                v.append(f"site-singularity: vertex {nid} site within 4b of the parent gauge singularity")

    for nid in tree.nodes:
        kids = tree.children(nid)
        for i, a in enumerate(kids):
            for bb in kids[i + 1 :]:
                na, nb = tree.nodes[a], tree.nodes[bb]
                sep = np.linalg.norm(na.site - nb.site)
                if sep <= 4.0 * (tree.b_of(a) + tree.b_of(bb)):
                    v.append(f"separation: vertices {a} and {bb} are closer than 4(b+b')")
    return v


# ---------------------------------------------------------------------------
# chart maps

def to_child(node: TreeNode, z):
    """Parent-chart points to child-chart coordinates x = R (z - q) / lam."""
    y = (z - node.site) / node.lam
    return y if node.rot is None else y @ node.rot.T


def to_parent(node: TreeNode, x):
    y = x if node.rot is None else x @ node.rot
    return node.site + node.lam * y


def chart_jacobian(node: TreeNode):
    r = np.eye(4) if node.rot is None else node.rot
    return r / node.lam


# ---------------------------------------------------------------------------
# connected-sum metric

@dataclass
class ConnectedSumMetric:
    """Per-vertex conformal factors of the honest metric g = m_I h_1^2 delta.

    With the base S^4 in its north chart and affine chart maps, every
    tilde-g_I is exactly round; the neck factors m_I interpolate the
    conformal mismatch rho across each neck in log radius so that
    m_parent tilde-g_parent = f^* (m_child tilde-g_child) holds there.
    """

    tree: GluingTree

    def _rho(self, child: TreeNode, z):
        """Conformal mismatch at parent-chart points z near the site."""
        r2 = np.sum((z - child.site) ** 2, axis=-1)
        lam = child.lam
        return 4.0 * lam**2 / ((lam**2 + r2) ** 2 * round_factor(z) ** 2)

    @staticmethod
    def _blend(r, lam):
        """Smoothstep in log r from 0 below sqrt(lam)/2 to 1 above 2 sqrt(lam)."""
        root = np.sqrt(lam)
        with np.errstate(divide="ignore"):
            u = np.log(np.maximum(2.0 * r / root, 1e-300)) / np.log(4.0)
        return smoothstep(u)

    def m_factor(self, nid, x):
        """m_I at chart-I points, product over incident necks."""
        x, single = as_points(x)
        tree = self.tree
        node = tree.nodes[nid]
        out = np.ones(x.shape[0])
        if node.parent is not None:
            z = to_parent(node, x)
            r = np.linalg.norm(z - node.site, axis=-1)
            s = self._blend(r, node.lam)
            active = s < 1.0
            if np.any(active):
                rho = self._rho(node, z[active])
                out[active] *= rho ** (-s[active])
        for cid in tree.children(nid):
            child = tree.nodes[cid]
            r = np.linalg.norm(x - child.site, axis=-1)
            s = self._blend(r, child.lam)
            active = s > 0.0
            if np.any(active):
                rho = self._rho(child, x[active])
                out[active] *= rho ** (1.0 - s[active])
        return out[0] if single else out

    def conformal_factor(self, nid):
        def factor(x):
            x, _ = as_points(x)
            return np.sqrt(self.m_factor(nid, x)) * round_factor(x)

        return factor

    def metric_for(self, nid) -> MetricField:
        return MetricField(factor=self.conformal_factor(nid), name=f"connected-sum:{nid}")

    def matching_residual(self, cid, samples=64):
        """Relative residual of m_- g_- = f^*(m g) across the neck of cid."""
        tree = self.tree
        child = tree.nodes[cid]
        rng = np.random.default_rng(7)
        root = np.sqrt(child.lam)
        r = np.exp(rng.uniform(np.log(root / tree.n_width), np.log(root * tree.n_width), samples))
        dirs = rng.normal(size=(samples, 4))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        z = child.site + r[:, None] * dirs
        x = to_child(child, z)
        parent_side = self.m_factor(child.parent, z) * round_factor(z) ** 2
        child_side = self.m_factor(cid, x) * round_factor(x) ** 2 / child.lam**2
        return float(np.max(np.abs(parent_side / child_side - 1.0)))

    def band_report(self, nid, samples=256):
        """Measured m_I extrema over the three bands of its incoming neck."""
        tree = self.tree
        node = tree.nodes[nid]
        if node.parent is None:
            return None
        rng = np.random.default_rng(11)
        lam, n = node.lam, tree.n_width
        root = np.sqrt(lam)
        bands = {
            "prime": (root / n, n * root),
            "doubleprime": (root / n, 2.0 * root),
            "tripleprime": (root / n, 0.5 * root / n),
        }
        out = {}
        for name, (lo, hi) in bands.items():
            lo, hi = min(lo, hi), max(lo, hi)
            r = np.exp(rng.uniform(np.log(lo), np.log(hi), samples))
            x = np.zeros((samples, 4))
            x[:, 0] = r / lam  # chart-I radius corresponding to parent radius r
            vals = self.m_factor(nid, x)
            out[name] = (float(np.min(vals)), float(np.max(vals)))
        return out


def connected_sum_metric(tree: GluingTree, validate=True) -> ConnectedSumMetric:
    if validate:
        problems = validate_gluing_tree(tree)
        if problems:
            raise ConfigError("invalid gluing tree: " + "; ".join(problems))
    return ConnectedSumMetric(tree=tree)


# ---------------------------------------------------------------------------
# site gauges: the parent connection in radial gauge about a gluing site

class SiteGauge:
    """Radial-gauge presentation of a vertex connection about a child site.

    `pure_gauge_term` returns p_mu = (d_mu u) u^{-1} as su(2) coefficients;
    it vanishes identically when the connection is already radial about
    the site (flat background, or an instanton centred there).
    """

    def __init__(self, conn: ConnectionField, base_params, site, ode_steps=64):
        self.conn = conn
        self.site = np.asarray(site, dtype=float)
        self.ode_steps = ode_steps
        self.trivial = False
        if conn.provenance == "product":
            self.trivial = True
        elif isinstance(base_params, BpstParams) and np.allclose(base_params.centre, self.site, atol=1e-13):
            # both BPST gauges are radial about their own centre
            self.trivial = True

    def transport(self, z):
        return radial_transport(self.conn, self.site, z, self.ode_steps)

    def pure_gauge_term(self, z):
        z, _ = as_points(z)
        if self.trivial:
            return np.zeros((z.shape[0], 4, 3))
        u = self.transport(z)
        h = 1e-5 * np.maximum(1.0, np.linalg.norm(z, axis=-1))
        du = np.empty((z.shape[0], 4, 4))
        for mu in range(4):
            zp = z.copy()
            zp[:, mu] += h
            zm = z.copy()
            zm[:, mu] -= h
            du[:, mu] = (self.transport(zp) - self.transport(zm)) / (2.0 * h[:, None])
        return quat_to_alg(quat_mult(du, quat_conj(u)[:, None, :]))

    def radial_values(self, z):
        """(A_rad, F_rad) at parent-chart points z (radial trivialization)."""
        z, _ = as_points(z)
        a = self.conn.ev(z)
        f = curvature(self.conn, z)
        if self.trivial:
            return a, f
        u = self.transport(z)
        uc = quat_conj(u)
        h = 1e-5 * np.maximum(1.0, np.linalg.norm(z, axis=-1))
        du = np.empty((z.shape[0], 4, 4))
        for mu in range(4):
            zp = z.copy()
            zp[:, mu] += h
            zm = z.copy()
            zm[:, mu] -= h
            du[:, mu] = (self.transport(zp) - self.transport(zm)) / (2.0 * h[:, None])
        from .su2 import adjoint_many

        a_rad = adjoint_many(uc, a) + quat_to_alg(quat_mult(uc[:, None, :], du))
        f_rad = adjoint_many(uc, f)
        return a_rad, f_rad


# ---------------------------------------------------------------------------
# the spliced connection

class SplicedConnection:
    """A' over the multiple connected sum, one local form per vertex chart."""

    def __init__(self, tree: GluingTree, ode_steps=64):
        self.tree = tree
        self.metric = ConnectedSumMetric(tree=tree)
        self.ode_steps = ode_steps
        self._conns: Dict[str, ConnectionField] = {}
        self._params: Dict[str, object] = {}
        self._gauges: Dict[str, SiteGauge] = {}
        for nid in tree.order():
            node = tree.nodes[nid]
            if node.conn == "product":
                conn = product_connection()
                params = "product"
            else:
                conn = bpst(node.conn)
                params = node.conn
            if node.parent is not None:
                conn = constant_gauge_rotation(conn, node.rho)
            self._conns[nid] = conn
            self._params[nid] = params
        for nid in tree.order():
            node = tree.nodes[nid]
            if node.parent is None:
                continue
            self._gauges[nid] = SiteGauge(
                self._conns[node.parent], self._params[node.parent], node.site, ode_steps
            )

    # -- cutoffs -------------------------------------------------------------

    def south_cut(self, nid, x, with_grad=False):
        """South-pole cutoff factor of vertex nid at its own chart points."""
        node = self.tree.nodes[nid]
        x, _ = as_points(x)
        if node.parent is None:
            val = np.ones(x.shape[0])
            return (val, np.zeros_like(x)) if with_grad else val
        b = self.tree.b_of(nid)
        r = np.linalg.norm(x, axis=-1)
        rsafe = np.maximum(r, 1e-300)
        t = 1.0 / (rsafe * b)
        val = zeta(t)
        if not with_grad:
            return val
        dval = -zeta_d(t) / (rsafe**2 * b)
        grad = dval[:, None] * (x / rsafe[:, None])
        return val, grad

    def site_cut(self, cid, z, with_grad=False):
        """Cutoff around the site of child cid, at parent-chart points z."""
        child = self.tree.nodes[cid]
        b = self.tree.b_of(cid)
        y = z - child.site
        r = np.linalg.norm(y, axis=-1)
        rsafe = np.maximum(r, 1e-300)
        t = r / b
        val = zeta(t)
        if not with_grad:
            return val
        grad = (zeta_d(t) / b)[:, None] * (y / rsafe[:, None])
        return val, grad

    def psi_total(self, nid, x, with_grad=False):
        """psi_I at chart-I points: south factor times child-site factors."""
        x, _ = as_points(x)
        if with_grad:
            val, grad = self.south_cut(nid, x, with_grad=True)
            for cid in self.tree.children(nid):
                v, g = self.site_cut(cid, x, with_grad=True)
                grad = grad * v[:, None] + g * val[:, None]
                val = val * v
            return val, grad
        val = self.south_cut(nid, x)
        for cid in self.tree.children(nid):
            val = val * self.site_cut(cid, x)
        return val

    # -- local forms ----------------------------------------------------------

    def chart_field(self, nid) -> ConnectionField:
        """A' on the chart of vertex nid, in the vertex's own trivialization.

        Inside each child cutoff ball the form is the gauge image of the
        cutoff radial-gauge form, so it extends the outside form
        continuously: A' = psi A + (psi - 1) (du) u^{-1}.
        """
        tree = self.tree
        conn = self._conns[nid]
        kids = tree.children(nid)

        def ev(x):
            x, _ = as_points(x)
            psi = self.psi_total(nid, x)
            val = np.zeros((x.shape[0], 4, 3))
            live = psi > 0.0
            if np.any(live):
                val[live] = psi[live, None, None] * conn.ev(x[live])
            for cid in kids:
                gauge = self._gauges[cid]
                if gauge.trivial:
                    continue
                child = tree.nodes[cid]
                b = tree.b_of(cid)
                mask = np.linalg.norm(x - child.site, axis=-1) < b
                if not np.any(mask):
                    continue
                p = gauge.pure_gauge_term(x[mask])
                val[mask] += (psi[mask, None, None] - 1.0) * p
            return val

        def curv(x):
            return self._chart_curvature(nid, x)

        return ConnectionField(ev=ev, curv_ev=curv, provenance="spliced")

    def splice_gauge_field(self, nid) -> ConnectionField:
        """A' in the splice trivialization: psi A_rad inside child patches."""
        tree = self.tree
        conn = self._conns[nid]
        kids = tree.children(nid)

        def ev(x):
            x, _ = as_points(x)
            psi = self.psi_total(nid, x)
            val = np.zeros((x.shape[0], 4, 3))
            live = psi > 0.0
            patch = np.zeros(x.shape[0], dtype=bool)
            for cid in kids:
                child = tree.nodes[cid]
                mask = np.linalg.norm(x - child.site, axis=-1) < tree.b_of(cid)
                sub = mask & live
                if np.any(sub):
                    a_rad, _ = self._gauges[cid].radial_values(x[sub])
                    val[sub] = psi[sub, None, None] * a_rad
                patch |= mask
            rest = live & ~patch
            if np.any(rest):
                val[rest] = psi[rest, None, None] * conn.ev(x[rest])
            return val

        return ConnectionField(ev=ev, provenance="spliced|splice-gauge")

    def _chart_curvature(self, nid, x):
        """F(A') on chart nid: psi F + dpsi ^ A + (psi^2 - psi) [A, A].

        Evaluated patchwise in the radial trivialization around each child
        site (gauge-covariant, so all norms and the self-dual projection
        are unaffected).
        """
        tree = self.tree
        conn = self._conns[nid]
        x, _ = as_points(x)
        psi, dpsi = self.psi_total(nid, x, with_grad=True)
        out = np.zeros((x.shape[0], 6, 3))
        patch = np.zeros(x.shape[0], dtype=bool)

        def accumulate(mask, a, f):
            p = psi[mask]
            dp = dpsi[mask]
            term = p[:, None, None] * f
            for i, (mu, nu) in enumerate(PAIRS):
                term[:, i] += dp[:, mu, None] * a[:, nu] - dp[:, nu, None] * a[:, mu]
                term[:, i] += (p * p - p)[:, None] * bracket(a[:, mu], a[:, nu])
            out[mask] = term

        for cid in tree.children(nid):
            gauge = self._gauges[cid]
            child = tree.nodes[cid]
            mask = np.linalg.norm(x - child.site, axis=-1) < tree.b_of(cid)
            if gauge.trivial or not np.any(mask):
                patch |= mask
                if np.any(mask):
                    zz = x[mask]
                    accumulate(mask, conn.ev(zz), curvature(conn, zz))
                continue
            a_rad, f_rad = gauge.radial_values(x[mask])
            accumulate(mask, a_rad, f_rad)
            patch |= mask
        rest = ~patch
        if np.any(rest):
            live = rest & (psi > 0.0)
            if np.any(live):
                accumulate(live, conn.ev(x[live]), curvature(conn, x[live]))
        return out

    def curvature_density(self, nid):
        """|F(A')|^2 on chart nid (flat pointwise norm; conf. invariant)."""

        def dens(x):
            f = self._chart_curvature(nid, x)
            return np.sum(f * f, axis=(1, 2))

        return dens

    def selfdual_field(self, nid):
        """F^{+,g}(A') on chart nid as two-form components."""

        def ev(x):
            f = self._chart_curvature(nid, x)
            from .gauge import selfdual_embed

            return selfdual_embed(selfdual_part(f))

        return ev

    # -- regions and support ---------------------------------------------------

    def region_mask(self, nid, x):
        """X_I': the vertex's kept region; necks belong to the parent."""
        tree = self.tree
        node = tree.nodes[nid]
        x, _ = as_points(x)
        keep = np.ones(x.shape[0], dtype=bool)
        if node.parent is not None:
            keep &= np.linalg.norm(x, axis=-1) < 1.0 / (tree.n_width * np.sqrt(node.lam))
        for cid in tree.children(nid):
            child = tree.nodes[cid]
            keep &= np.linalg.norm(x - child.site, axis=-1) >= np.sqrt(child.lam) / tree.n_width
        return keep

    def support_annuli(self, nid):
        """Annuli carrying F(A') - psi F and the gamma bands, chart-I coords."""
        tree = self.tree
        node = tree.nodes[nid]
        out = []
        if node.parent is not None:
            b = tree.b_of(nid)
            out.append({"kind": "south", "centre": np.zeros(4), "r_in": 1.0 / b, "r_out": 2.0 / b})
        for cid in tree.children(nid):
            child = tree.nodes[cid]
            b = tree.b_of(cid)
            if node.conn != "product":
                out.append({"kind": "site", "centre": child.site, "r_in": 0.5 * b, "r_out": b})
            out.append(
                {
                    "kind": "gamma",
                    "centre": child.site,
                    "r_in": 0.5 * np.sqrt(child.lam),
                    "r_out": 2.0 * np.sqrt(child.lam),
                    "child": cid,
                }
            )
        return out

    def annulus_grid(self, annulus, gauss_order=8, s3_order=4, panels=6):
        pad = 1e-3 * (annulus["r_out"] - annulus["r_in"])
        return build_grid(
            r_min=annulus["r_in"] - pad,
            r_max=annulus["r_out"] + pad,
            panels=panels,
            gauss_order=gauss_order,
            s3_order=s3_order,
            region="annulus",
            centre=annulus["centre"],
        )

    # -- pullback to the base chart ---------------------------------------------

    def descend(self, z):
        """Route root-chart points to their deepest vertex chart.

        Returns (labels, coords, jacobians): for each distinct routing a
        (vertex id, point-index array, chart coordinates, d x_chart / d z).
        """
        tree = self.tree
        z, _ = as_points(z)
        idx = np.arange(z.shape[0])
        groups = []

        def walk(nid, indices, pts, jac):
            for cid in tree.children(nid):
                child = tree.nodes[cid]
                seam = np.sqrt(child.lam)
                inside = np.linalg.norm(pts - child.site, axis=-1) < seam
                if np.any(inside):
                    walk(cid, indices[inside], to_child(child, pts[inside]), chart_jacobian(child) @ jac)
                keepmask = ~inside
                indices, pts = indices[keepmask], pts[keepmask]
            groups.append((nid, indices, pts, jac))

        walk(tree.ROOT, idx, z, np.eye(4))
        return groups

    def pullback_to_base(self) -> ConnectionField:
        """A-hat': the spliced connection pulled back to the base chart."""
        fields = {nid: self.chart_field(nid) for nid in self.tree.order()}

        def ev(z):
            z, _ = as_points(z)
            out = np.zeros((z.shape[0], 4, 3))
            for nid, indices, pts, jac in self.descend(z):
                if indices.size == 0:
                    continue
                vals = fields[nid].ev(pts)
                out[indices] = np.einsum("nm,xnc->xmc", jac, vals)
            return out

        def curv(z):
            z, _ = as_points(z)
            out = np.zeros((z.shape[0], 6, 3))
            for nid, indices, pts, jac in self.descend(z):
                if indices.size == 0:
                    continue
                f = self._chart_curvature(nid, pts)
                m2 = two_form_pullback_matrix(jac)
                out[indices] = np.einsum("ij,xjc->xic", m2, f)
            return out

        return ConnectionField(ev=ev, curv_ev=curv, provenance="pulled-back|spliced")

    def base_density(self):
        field = self.pullback_to_base()

        def dens(z):
            f = field.curv_ev(z)
            return np.sum(f * f, axis=(1, 2))

        return dens


def splice(tree: GluingTree, validate=True, ode_steps=64) -> SplicedConnection:
    """Build the spliced almost-anti-self-dual connection for a gluing tree."""
    if validate:
        problems = validate_gluing_tree(tree)
        if problems:
            raise ConfigError("invalid gluing tree: " + "; ".join(problems))
    return SplicedConnection(tree, ode_steps=ode_steps)


def pullback_to_base(spliced: SplicedConnection) -> ConnectionField:
    return spliced.pullback_to_base()


# ---------------------------------------------------------------------------
# energies and the self-dual error functional

def max_cutoff(tree: GluingTree, nid) -> float:
    """Largest cutoff radius b_I compatible with the tree's clearances.

    Used when building degenerating families whose early members have
    scales too large for b = 4 N sqrt(lam): capping b keeps those members
    honest connections of the right charge (the deep members satisfy the
    uncapped rule and are exactly the standard construction).
    """
    node = tree.nodes[nid]
    cap = 0.2
    parent = tree.nodes[node.parent]
    for sib in tree.children(node.parent):
        if sib != nid:
            sep = np.linalg.norm(node.site - tree.nodes[sib].site)
            cap = min(cap, sep / 8.02)
    if parent.conn != "product" and parent.conn.flavor == "singular":
        cap = min(cap, np.linalg.norm(node.site - parent.conn.centre) / 4.04)
    return cap


def spliced_family(tree: GluingTree, steps: int, shrink=0.5, ode_steps=64):
    """Degenerating spliced family ending at the given tree.

    The tree's scales are the deepest member's; earlier members grow every
    edge scale by the inverse of the per-step shrink factors (a scalar or
    a coarse-to-deep sequence of length steps-1 -- a gentle head keeps the
    first re-acquisition of moving structures cheap).  Early cutoffs are
    capped by the tree clearances so those members stay honest connections
    of the right charge; the deep members satisfy b = 4 N sqrt(lam)
    exactly.  Returns (trees, spliced connections).
    """
    if np.isscalar(shrink):
        factors = [float(shrink)] * (steps - 1)
    else:
        factors = [float(s) for s in shrink]
        if len(factors) != steps - 1:
            raise ConfigError("need one shrink factor per family transition")
    if any(not 0 < s < 1 for s in factors):
        raise ConfigError("family shrink factors must be in (0, 1)")
    trees = []
    for j in range(steps):
        grow = 1.0 / float(np.prod(factors[j:])) if j < steps - 1 else 1.0
        scaled = tree
        for nid in tree.order():
            if tree.nodes[nid].parent is None:
                continue
            lam_j = tree.nodes[nid].lam * grow
            b_j = min(4.0 * tree.n_width * np.sqrt(lam_j), max_cutoff(tree, nid))
            scaled = scaled.replace_node(nid, lam=lam_j, b=b_j)
        trees.append(scaled)
    return trees, [SplicedConnection(t, ode_steps=ode_steps) for t in trees]


def _chi(r, b):
    """Smooth site indicator: 0 inside 2b, 1 outside 4b."""
    return zeta(r / (4.0 * b))


def region_quadrature(spliced: SplicedConnection, nid, r_max=300.0, panels=20, gauss_order=8, s3_order=4):
    """Quadrature over the kept region X_I' as (grid, weight multiplier) pairs.

    The region is split with a smooth partition of unity: a concentric
    chart grid carries prod_c chi_c (suppressed inside the child balls),
    and one site-centred grid per child carries 1 - chi_c down to the
    region boundary sqrt(lam_c)/N (which lies in the flat band of A').
    Every piece is smooth on its grid, so the split is exact.
    """
    tree = spliced.tree
    node = tree.nodes[nid]
    kids = tree.children(nid)
    if node.parent is not None:
        r_max = 2.0 / tree.b_of(nid) * 1.05  # F(A') vanishes beyond the south band
    cen = np.zeros(4) if node.conn == "product" else node.conn.centre
    pieces = []
    if node.conn != "product":
        min_ratio = min(1e-3 * node.conn.lam / r_max, 1e-8)
        grid = build_grid(
            r_min=0.0,
            r_max=r_max,
            panels=panels,
            gauss_order=gauss_order,
            s3_order=s3_order,
            region="chart",
            centre=cen,
            min_ratio=min_ratio,
        )
        mult = np.ones(grid.node_count)
        for cid in kids:
            child = tree.nodes[cid]
            r = np.linalg.norm(grid.nodes - child.site, axis=-1)
            mult *= _chi(r, tree.b_of(cid))
        if node.parent is not None:
            # discard the part beyond the vertex's own region boundary
            mult *= (np.linalg.norm(grid.nodes, axis=-1) < 1.0 / (tree.n_width * np.sqrt(node.lam))).astype(float)
        pieces.append((grid, mult))
    for cid in kids:
        child = tree.nodes[cid]
        b = tree.b_of(cid)
        grid = build_grid(
            r_min=np.sqrt(child.lam) / tree.n_width,
            r_max=4.0 * b,
            panels=10,
            gauss_order=gauss_order,
            s3_order=s3_order,
            region="annulus",
            centre=child.site,
        )
        r = np.linalg.norm(grid.nodes - child.site, axis=-1)
        mult = 1.0 - _chi(r, b)
        for other in kids:
            if other != cid:
                ro = np.linalg.norm(grid.nodes - tree.nodes[other].site, axis=-1)
                mult *= _chi(ro, tree.b_of(other))
        pieces.append((grid, mult))
    return pieces


def total_energy(spliced: SplicedConnection, **grid_kw) -> float:
    """Charge integral of A' summed chart by chart over the kept regions."""
    total = 0.0
    for nid in spliced.tree.order():
        dens = spliced.curvature_density(nid)
        for grid, mult in region_quadrature(spliced, nid, **grid_kw):
            live = mult > 0.0
            if not np.any(live):
                continue
            total += float(np.sum(dens(grid.nodes[live]) * grid.weights[live] * mult[live]))
    return total


def selfdual_error(spliced: SplicedConnection, p=2.0, gauss_order=8, s3_order=4) -> float:
    """Sum over vertices of || F^{+,g}(A') ||_{L^p(X_I', g)}.

    The error is supported on the cutoff transition annuli (the metrics
    are all conformally flat, so the projection carries no metric term).
    """
    if not 1.0 <= p < 4.0:
        raise ConfigError("selfdual_error expects 1 <= p < 4")
    total = 0.0
    for nid in spliced.tree.order():
        metric = spliced.metric.metric_for(nid)
        fplus = spliced.selfdual_field(nid)
        acc = 0.0
        for ann in spliced.support_annuli(nid):
            if ann["kind"] == "gamma":
                continue
            grid = spliced.annulus_grid(ann, gauss_order=gauss_order, s3_order=s3_order)
            keep = spliced.region_mask(nid, grid.nodes)
            sub = grid.restrict(keep)
            vals = fplus(sub.nodes)
            norms = np.sqrt(np.sum(vals**2, axis=(1, 2)))
            h = metric.conformal_factor(sub.nodes)
            acc += float(np.sum((norms / h**2) ** p * h**4 * sub.weights))
        total += acc ** (1.0 / p)
    return total
