"""Bubble-tree extraction from degenerating connection families.

Given a family of connections whose curvature concentrates as the family
parameter advances, the algorithm detects concentration points, applies
centred conformal blow-ups, classifies each local limit (flat or a fitted
one-instanton), and recurses to emit a bubble-tree ideal connection.
Recursion depth is bounded by the total charge; residual point masses are
kept symbolically in a multiplicity table.

Detection seeds on pointwise peaks of the (background-subtracted)
curvature density and zooms in with recentred ball grids, so spikes far
below the detection grid's resolution are still located; a known weak
limit may be passed as `background` exactly as in the ball-moment
definitions, otherwise the per-level vertex fit plays that role.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .gauge import ConnectionField, pullback_connection
from .geometry import ConfigError, ConformalMap, build_grid
from .instanton import BpstParams, bpst_density
from .moments import CHARGE_QUANTUM, density_on


class ExtractionError(RuntimeError):
    """The extraction algorithm hit its termination guard or bad data."""


@dataclass
class ExtractionThresholds:
    mass_eps: float = 0.5 * CHARGE_QUANTUM  # candidate mass threshold
    window_start: float = 0.4               # initial detection radius
    window_shrink: float = 0.6              # persistence-test shrink per step
    flat_sup: float = 0.05                  # sup|A| below which a vertex is flat
    candidate_scale: float = 0.25           # candidate local scale bound
    fit_annulus: tuple = (0.2, 5.0)         # classification annulus
    max_candidates: int = 8
    detect_r_max: float = 6.0
    detect_panels: int = 16
    detect_s3: int = 10       # must graze the footprints of unresolved bubbles
    detect_s3_fine: int = 22  # escalation tier when the charge count is short
    seed_cloud_radius: float = 0.9   # lattice sweep guaranteeing small-footprint pickup
    seed_cloud_spacing: float = 0.04
    local_panels: int = 18
    gauss_order: int = 6
    s3_order: int = 6

    def to_json(self):
        return {
            "mass_eps": self.mass_eps,
            "window_start": self.window_start,
            "window_shrink": self.window_shrink,
            "flat_sup": self.flat_sup,
            "candidate_scale": self.candidate_scale,
            "fit_annulus": list(self.fit_annulus),
        }

    @staticmethod
    def from_json(obj) -> "ExtractionThresholds":
        t = ExtractionThresholds()
        for key, val in obj.items():
            if hasattr(t, key):
                setattr(t, key, tuple(val) if key == "fit_annulus" else val)
        return t


@dataclass
class Candidate:
    centre: np.ndarray
    mass: float
    radius: float
    centres: List[np.ndarray] = field(default_factory=list)  # per family step
    scales: List[float] = field(default_factory=list)
    masses: List[float] = field(default_factory=list)


@dataclass
class ConcentrationReport:
    candidates: List[Candidate]
    total_mass: float
    charge: int

    def to_json(self):
        return {
            "total_mass": self.total_mass,
            "charge": self.charge,
            "candidates": [
                {
                    "centre": list(map(float, c.centre)),
                    "mass": c.mass,
                    "radius": c.radius,
                    "scales": list(map(float, c.scales)),
                }
                for c in self.candidates
            ],
        }


@dataclass
class IdealVertex:
    id: str
    k: int
    limit: str  # "theta" | "bpst" | "base" | "open"
    site: Optional[np.ndarray] = None  # attachment point, parent chart
    lam: Optional[float] = None        # extracted scale at the deepest step
    params: Optional[BpstParams] = None
    multiplicities: Dict[str, int] = field(default_factory=dict)
    diagnostics: Dict[str, float] = field(default_factory=dict)


@dataclass
class IdealConnection:
    vertices: Dict[str, IdealVertex]
    thresholds: ExtractionThresholds
    neck_energies: Dict[str, List[float]] = field(default_factory=dict)

    ROOT = "0"

    def children(self, nid):
        prefix = nid + "."
        return sorted(v for v in self.vertices if v.startswith(prefix) and "." not in v[len(prefix):])

    def depth(self):
        return max(v.count(".") for v in self.vertices)

    def total_charge(self):
        return sum(v.k for v in self.vertices.values()) + sum(
            sum(v.multiplicities.values()) for v in self.vertices.values()
        )

    def shape_signature(self, nid=ROOT):
        """Canonical (limit, k, sorted child shapes) for isomorphism tests."""
        v = self.vertices[nid]
        kids = tuple(sorted(self.shape_signature(c) for c in self.children(nid)))
        return (v.limit, v.k, kids)

    def to_json(self):
        out = {"thresholds": self.thresholds.to_json(), "nodes": []}
        for nid in sorted(self.vertices, key=lambda s: (s.count("."), s)):
            v = self.vertices[nid]
            entry = {"id": nid, "k": v.k, "limit": v.limit}
            if v.site is not None:
                entry["x"] = list(map(float, v.site))
            if v.lam is not None:
                entry["lambda"] = float(v.lam)
            if v.params is not None:
                entry["conn"] = {"bpst": v.params.to_json()}
            if v.multiplicities:
                entry["multiplicities"] = dict(v.multiplicities)
            if v.diagnostics:
                entry["diagnostics"] = {key: float(val) for key, val in v.diagnostics.items()}
            out["nodes"].append(entry)
        if self.neck_energies:
            out["neck_energies"] = {key: list(map(float, v)) for key, v in self.neck_energies.items()}
        return out

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


def moduli_dimension(k: int, b1: int = 0, bplus: int = 0) -> int:
    """Expected dimension 8k - 3(1 - b_1 + b^+) of the ASD moduli space."""
    if k < 0:
        raise ConfigError("charge must be nonnegative")
    return 8 * k - 3 * (1 - b1 + bplus)


# ---------------------------------------------------------------------------
# concentration detection

def _local_grid(centre, r_out, r_in_hint, thresholds):
    return build_grid(
        r_min=0.0,
        r_max=r_out,
        panels=thresholds.local_panels,
        gauss_order=thresholds.gauss_order,
        s3_order=thresholds.s3_order,
        region="ball",
        centre=centre,
        min_ratio=float(np.clip(r_in_hint / r_out, 1e-12, 1e-6)),
    )


def _ball_stats(density, centre, radius, thresholds, floor=1e-12):
    grid = _local_grid(centre, radius, floor, thresholds)
    w = density(grid.nodes) * grid.weights
    mass = float(np.sum(w))
    if mass <= 0.0:
        return mass, centre, 0.0
    c = (w @ grid.nodes) / mass
    r2 = np.sum((grid.nodes - c) ** 2, axis=-1)
    scale = float(np.sqrt(max(np.sum(w * r2) / mass, 0.0)))
    return mass, c, scale


def _zoom_on_spike(density, seed, r_start, thresholds, floor=1e-12):
    """Chase a density spike with recentred, shrinking ball grids.

    Works even when the spike starts far below the grid resolution: the
    mass centroid is dominated by the nodes nearest the spike, so the
    recentring converges geometrically; the radius tightens once the
    local scale is resolved.  Returns (centre, mass, scale, radius).
    """
    centre = np.asarray(seed, dtype=float)
    radius = float(r_start)
    mass = scale = 0.0
    for _ in range(96):
        mass, c_new, scale = _ball_stats(density, centre, radius, thresholds, floor)
        if mass <= 0.0:
            return centre, mass, scale, radius  # nothing to chase here
        moved = np.linalg.norm(c_new - centre)
        centre = c_new
        if moved > 0.25 * radius:
            continue  # still chasing an unresolved spike; keep the window
        if radius <= max(12.0 * scale, 32.0 * floor):
            break
        radius = float(np.clip(8.0 * scale, 32.0 * floor, 0.6 * radius))
    return centre, mass, scale, radius


def _track_step(density, c_prev, x_ref, s_prev, window, thresholds):
    """Re-acquire a tracked structure at the next family step.

    A concentrating structure converges along the ray from its limit
    point, so a dense one-dimensional scan of the segment from x_ref
    through the previous position relocates it even after it moved by
    many times its own size; structures without a useful reference ray
    are re-zoomed in place with the supplied window.
    """
    u = c_prev - x_ref
    d = float(np.linalg.norm(u))
    floor = max(s_prev * 1e-4, 1e-12)
    if d <= max(32.0 * s_prev, 1e-10):
        return _zoom_on_spike(density, c_prev, window, thresholds, floor)
    # t > 1 covers motion beyond the previous position (stale references);
    # the linear part is spaced by the structure's core scale so the scan
    # cannot step over its support
    n_lin = int(np.clip(4.2 * d / max(2.0 * s_prev, 4.2 * d / 2**20), 2**15, 2**20))
    t = np.unique(np.concatenate([np.geomspace(1e-6, 4.2, 8193), np.linspace(1e-6, 4.2, n_lin)]))
    pts = x_ref + t[:, None] * u[None, :]
    vals = np.abs(density(pts))
    i = int(np.argmax(vals))
    if vals[i] <= 0.0:
        return c_prev, 0.0, 0.0, 0.0
    seed = pts[i]
    spacing = (t[min(i + 1, t.size - 1)] - t[max(i - 1, 0)]) * d
    w = float(np.clip(max(8.0 * spacing, 16.0 * s_prev), 64.0 * floor, thresholds.window_start))
    return _zoom_on_spike(density, seed, w, thresholds, floor)


def _seed_cloud(thresholds):
    """Deterministic offset lattice inside a ball: guaranteed seed coverage."""
    h = thresholds.seed_cloud_spacing
    r = thresholds.seed_cloud_radius
    n = int(np.floor(r / h))
    ax = (np.arange(-n, n + 1) + 0.381966) * h
    pts = np.stack(np.meshgrid(ax, ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 4)
    return pts[np.sum(pts * pts, axis=-1) <= r * r]


def detect_concentration(densities, alphas, eps, grid, thresholds=None, background_density=None) -> ConcentrationReport:
    """Maximal disjoint balls holding mass >= eps at shrinking radii.

    `densities` map points to the (background-subtracted) curvature
    density, one per family step, ordered by decreasing scale.  Seeds are
    the pointwise peaks of the COARSEST density, where every structure is
    still fat enough to sample; each zoomed structure is then tracked
    through the family (the two-scale test: the windowed mass must stay
    above eps while the window follows the concentration down).  Tracked
    structures that converge to the same limit point are merged into one
    candidate, the point-mass arithmetic of their moments combined.

    When the residuals were formed against a fitted background, pass it as
    `background_density`: seeds are then ranked by RELATIVE residual, so
    cutoff holes (100%) and genuine spikes outrank fit noise (a few %).
    """
    thresholds = thresholds or ExtractionThresholds()
    if len(densities) != len(alphas) or not densities:
        raise ConfigError("need one density per family step")
    # rank seeds by |density|: deficits (holes cut into a background by the
    # splicing) mark unresolved structure just as well as positive spikes.
    # A fixed lattice cloud backs up the product mesh, whose angular
    # covering radius would otherwise miss small footprints at O(1) radii.
    seed_pts = np.concatenate([grid.nodes, _seed_cloud(thresholds)], axis=0)
    vals = np.abs(densities[0](seed_pts))
    if background_density is not None:
        ref = background_density(seed_pts)
        score = vals / (np.abs(ref) + 1e-9 * max(float(np.max(np.abs(ref))), 1e-30))
        score_floor = 0.3
    else:
        score = vals
        score_floor = 0.0
    alive = vals > 0.0
    found: List[tuple] = []  # (centre, mass, scale, radius) at the coarse step
    for _ in range(4 * thresholds.max_candidates):
        if not np.any(alive):
            break
        idx = int(np.argmax(np.where(alive, score, -1.0)))
        if score[idx] <= score_floor:
            break
        seed = seed_pts[idx]
        centre, mass, scale, radius = _zoom_on_spike(densities[0], seed, thresholds.window_start, thresholds)
        # retire every node explained by this structure (or by a dead seed)
        block = max(1.5 * radius, float(np.linalg.norm(seed - centre)), 0.25 * thresholds.window_start)
        alive &= np.linalg.norm(seed_pts - centre, axis=-1) >= block
        alive &= np.linalg.norm(seed_pts - seed, axis=-1) >= 0.1 * thresholds.window_start
        if mass < eps:
            continue
        if any(np.linalg.norm(centre - f[0]) < max(f[3], radius) for f in found):
            continue
        found.append((centre, mass, scale, radius))
        if len(found) >= 2 * thresholds.max_candidates:
            break

    taken: List[Candidate] = []
    for centre, mass, scale, radius in found:
        # reference point for the convergence ray: start from the mass
        # centre of the coarse structures in this cluster neighbourhood,
        # then extrapolate the track's own geometric convergence
        near = [f for f in found if np.linalg.norm(f[0] - centre) < 1.2 * thresholds.window_start]
        m_tot = sum(f[1] for f in near)
        x_ref = sum(f[1] * f[0] for f in near) / m_tot
        cand = Candidate(centre=centre, mass=mass, radius=radius)
        cand.centres.append(centre)
        cand.scales.append(scale)
        cand.masses.append(mass)
        ok = True
        motion = None
        for dens_a in densities[1:]:
            if len(cand.centres) >= 3:
                d1 = cand.centres[-1] - cand.centres[-2]
                d0 = cand.centres[-2] - cand.centres[-3]
                n1, n0 = np.linalg.norm(d1), np.linalg.norm(d0)
                if n1 > 4.0 * cand.scales[-1] and n0 > 0:
                    ratio = min(n1 / n0, 0.95)
                    x_ref = cand.centres[-1] + d1 * ratio / (1.0 - ratio)
                elif n1 <= 4.0 * cand.scales[-1]:
                    x_ref = cand.centres[-1]  # effectively static now
            if motion is None:
                window = 0.5 * thresholds.window_start  # motion still unknown
            else:
                window = float(
                    np.clip(max(16.0 * cand.scales[-1], 3.0 * motion), 64e-12, thresholds.window_start)
                )
            c_a, m_a, s_a, _ = _track_step(dens_a, cand.centres[-1], x_ref, cand.scales[-1], window, thresholds)
            if m_a < eps:
                ok = False
                break
            motion = float(np.linalg.norm(c_a - cand.centres[-1]))
            cand.centres.append(c_a)
            cand.scales.append(s_a)
            cand.masses.append(m_a)
        if not ok or cand.scales[-1] > thresholds.candidate_scale:
            continue
        cand.centre = cand.centres[-1]
        cand.mass = cand.masses[-1]
        cand.radius = float(np.clip(16.0 * cand.scales[-1], 64e-12, thresholds.window_start))
        taken.append(cand)
        if len(taken) >= thresholds.max_candidates:
            break
    taken = _merge_converging(taken, thresholds)
    # total deep mass: coarse grid outside the candidate balls plus the
    # zoomed ball masses (the coarse grid cannot integrate the spikes)
    deep_vals = densities[-1](grid.nodes)
    keep = np.ones(grid.node_count, dtype=bool)
    for c in taken:
        keep &= np.linalg.norm(grid.nodes - c.centre, axis=-1) >= max(c.radius, 0.45 * thresholds.window_start)
    total = float(np.sum(np.where(keep, deep_vals * grid.weights, 0.0))) + sum(c.mass for c in taken)
    return ConcentrationReport(candidates=taken, total_mass=total, charge=int(round(total / CHARGE_QUANTUM)))


def _merge_converging(cands: List[Candidate], thresholds) -> List[Candidate]:
    """Merge candidates whose mutual separation shrinks along the family.

    Converging candidates approach the same limit point of the singular
    set; their joint structure is one concentration whose per-step moments
    follow from point-mass arithmetic on the members.
    """
    n = len(cands)
    if n <= 1:
        return cands
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            sep0 = np.linalg.norm(cands[i].centres[0] - cands[j].centres[0])
            sep1 = np.linalg.norm(cands[i].centres[-1] - cands[j].centres[-1])
            scales = cands[i].scales[-1] + cands[j].scales[-1]
            if sep1 < 0.25 * sep0 or sep1 < 8.0 * scales:
                parent[find(i)] = find(j)
    groups: Dict[int, List[Candidate]] = {}
    for i, c in enumerate(cands):
        groups.setdefault(find(i), []).append(c)
    out = []
    for members in groups.values():
        if len(members) == 1:
            out.append(members[0])
            continue
        steps = min(len(m.centres) for m in members)
        merged = Candidate(centre=np.zeros(4), mass=0.0, radius=0.0)
        for j in range(steps):
            masses = np.array([m.masses[j] for m in members])
            centres = np.array([m.centres[j] for m in members])
            scales = np.array([m.scales[j] for m in members])
            mass = float(np.sum(masses))
            cbar = masses @ centres / mass
            var = float(np.sum(masses * (scales**2 + np.sum((centres - cbar) ** 2, axis=-1))) / mass)
            merged.masses.append(mass)
            merged.centres.append(cbar)
            merged.scales.append(float(np.sqrt(max(var, 0.0))))
        merged.centre = merged.centres[-1]
        merged.mass = merged.masses[-1]
        spread = max(
            np.linalg.norm(m.centres[-1] - merged.centre) + m.radius for m in members
        )
        merged.radius = float(np.clip(max(16.0 * merged.scales[-1], 2.0 * spread), 64e-12, thresholds.window_start))
        out.append(merged)
    return sorted(out, key=lambda c: tuple(np.round(c.centre, 9)))


# ---------------------------------------------------------------------------
# the extraction algorithm

def _masked_moments(density_vals, grid, holes):
    w = density_vals * grid.weights
    keep = np.ones(grid.node_count, dtype=bool)
    for centre, radius in holes:
        keep &= np.sum((grid.nodes - centre) ** 2, axis=-1) >= radius * radius
    w = np.where(keep, w, 0.0)
    mass = float(np.sum(w))
    if mass <= 0.0:
        return mass, np.zeros(4), 0.0
    centre = (w @ grid.nodes) / mass
    r2 = np.sum((grid.nodes - centre) ** 2, axis=-1)
    scale = float(np.sqrt(max(np.sum(w * r2) / mass, 0.0)))
    return mass, centre, scale


def _sup_connection(conn: ConnectionField, centre, holes, thresholds, rng):
    lo, hi = thresholds.fit_annulus
    r = np.exp(rng.uniform(np.log(lo), np.log(hi), 256))
    dirs = rng.normal(size=(256, 4))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    pts = centre + r[:, None] * dirs
    keep = np.ones(256, dtype=bool)
    for c, radius in holes:
        keep &= np.linalg.norm(pts - c, axis=-1) >= 2.0 * radius
    pts = pts[keep]
    if pts.shape[0] == 0:
        return 0.0
    vals = conn.ev(pts)
    return float(np.max(np.sqrt(np.sum(vals**2, axis=(1, 2)))))


def density_of(conn: ConnectionField) -> Callable:
    def dens(pts):
        return density_on(conn, pts)

    return dens


def _fit_vertex(fields, grid, holes, thresholds, rng):
    """Classify the level limit from the deepest field, candidates masked."""
    deep = fields[-1]
    dens = density_on(deep, grid.nodes)
    mass, centre, scale = _masked_moments(dens, grid, holes)
    k_vtx = int(round(mass / CHARGE_QUANTUM))
    sup_a = _sup_connection(deep, centre if k_vtx else np.zeros(4), holes, thresholds, rng)
    diags = {"vertex_mass": mass, "sup_A": sup_a}
    if k_vtx <= 0:
        limit = "theta" if sup_a < thresholds.flat_sup else "open"
        return limit, 0, None, diags, (mass, np.zeros(4), 0.0)
    params = BpstParams(centre=centre, lam=max(scale, 1e-12) / np.sqrt(2.0), flavor="regular")
    lo, hi = thresholds.fit_annulus
    ann = build_grid(
        r_min=lo * max(scale, 1e-6),
        r_max=hi * max(scale, 1e-6),
        panels=8,
        gauss_order=thresholds.gauss_order,
        s3_order=thresholds.s3_order,
        region="annulus",
        centre=centre,
    )
    keep = np.ones(ann.node_count, dtype=bool)
    for c, radius in holes:
        keep &= np.linalg.norm(ann.nodes - c, axis=-1) >= 2.0 * radius
    sub = ann.restrict(keep)
    if sub.node_count:
        model = bpst_density(params)(sub.nodes)
        actual = density_on(deep, sub.nodes)
        denom = float(np.sum(model**2 * sub.weights))
        mism = float(np.sum((actual - model) ** 2 * sub.weights)) / max(denom, 1e-30)
        diags["density_mismatch"] = float(np.sqrt(mism))
    return "bpst", k_vtx, params, diags, (mass, centre, scale)


def extract_bubble_tree(
    fields: List[ConnectionField],
    k: int,
    thresholds: Optional[ExtractionThresholds] = None,
    alphas: Optional[List[float]] = None,
    background: Optional[ConnectionField] = None,
    n_width: float = 8.0,
    seed: int = 5,
) -> IdealConnection:
    """Recursive conformal-blow-up extraction of the bubble-tree limit.

    `fields` is the degenerating family on the base chart, ordered by
    decreasing scale; the deepest member drives classification.  The base
    weak limit may be supplied as `background` (its density is subtracted
    for detection and ball moments at level zero, as in the definition of
    the restricted mass centres); deeper levels subtract their own fitted
    vertex limits.  Recursion beyond depth k raises ExtractionError.
    """
    thresholds = thresholds or ExtractionThresholds()
    alphas = alphas if alphas is not None else list(range(len(fields)))
    rng = np.random.default_rng(seed)
    vertices: Dict[str, IdealVertex] = {}
    neck_energies: Dict[str, List[float]] = {}
    bg0 = density_of(background) if background is not None else None

    def level(fields_here, vid, depth, is_root, k_expected):
        # depth counts blow-up levels below the base chart
        if depth > max(k, 1):
            raise ExtractionError(f"extraction recursion exceeded depth {k} at vertex {vid}")

        def detect_grid(s3):
            return build_grid(
                r_min=0.0,
                r_max=thresholds.detect_r_max,
                panels=thresholds.detect_panels,
                gauss_order=thresholds.gauss_order,
                s3_order=s3,
                region="chart",
                min_ratio=1e-9,
            )

        raw = [density_of(f) for f in fields_here]
        # preliminary background: the supplied weak limit, or a hole-free
        # vertex fit; detection then runs on the residual densities, where
        # unresolved structure shows as spikes or as cutoff holes.
        grid0 = detect_grid(thresholds.s3_order)
        _, k_prelim, params0, _, _ = _fit_vertex(fields_here, grid0, [], thresholds, rng)
        if is_root and bg0 is not None:
            bg_detect = bg0
        else:
            bg_detect = bpst_density(params0) if params0 is not None else None
        if bg_detect is None:
            densities = raw
        else:
            densities = [lambda pts, d=d: d(pts) - bg_detect(pts) for d in raw]

        grid = detect_grid(thresholds.detect_s3)
        report = detect_concentration(
            densities, alphas, thresholds.mass_eps, grid, thresholds, background_density=bg_detect
        )
        found = sum(int(round(c.masses[-1] / CHARGE_QUANTUM)) for c in report.candidates)
        if found + k_prelim < k_expected:
            # escalate the angular resolution: small off-axis structures
            grid = detect_grid(thresholds.detect_s3_fine)
            report = detect_concentration(
                densities, alphas, thresholds.mass_eps, grid, thresholds, background_density=bg_detect
            )
        holes = [
            (c.centre, max(16.0 * c.scales[-1], c.radius, 0.45 * thresholds.window_start))
            for c in report.candidates
        ]
        limit, k_vtx, params, diags, moments = _fit_vertex(fields_here, grid, holes, thresholds, rng)
        if is_root and k_vtx > 0:
            limit = "base"
        vertices[vid] = IdealVertex(id=vid, k=k_vtx, limit=limit, params=params, diagnostics=diags)
        bg = bpst_density(params) if params is not None else None
        if is_root and bg0 is not None:
            bg = bg0
        ordered = sorted(report.candidates, key=lambda c: tuple(np.round(c.centre, 6)))
        for i, cand in enumerate(ordered):
            cid = f"{vid}.{i + 1}"
            k_cand = int(round(cand.masses[-1] / CHARGE_QUANTUM))
            # ball moments straight from the tracked windows (computed on the
            # background-subtracted densities during detection)
            mom = list(zip(cand.masses, cand.centres, cand.scales))
            deep_mass, deep_centre, deep_scale = mom[-1]
            if deep_scale <= 0:
                vertices[cid] = IdealVertex(id=cid, k=k_cand, limit="open", site=cand.centre)
                continue
            child_fields = [
                pullback_connection(ConformalMap(lam=s, q=c).inverse(), f)
                for f, (m, c, s) in zip(fields_here, mom)
            ]
            others = sum(
                max(int(round(cc.masses[-1] / CHARGE_QUANTUM)), 1) for jj, cc in enumerate(ordered) if jj != i
            )
            sub_moments = level(child_fields, cid, depth + 1, False, max(k_expected - k_vtx - others, k_cand))
            # centred normalization: absorb the child limit's own moments
            m_v, q_v, s_v = sub_moments
            s_v = s_v if s_v > 0 else 1.0
            vertices[cid].site = deep_centre + deep_scale * q_v
            vertices[cid].lam = float(deep_scale * s_v)
            _shift_subtree(vertices, cid, q_v, s_v)
            neck_energies[cid] = _neck_energy_series(raw, mom, thresholds, n_width)
        return moments

    level(fields, IdealConnection.ROOT, 0, True, k)

    ideal = IdealConnection(vertices=vertices, thresholds=thresholds, neck_energies=neck_energies)
    total = sum(v.k for v in vertices.values())
    if total < k:
        vertices[IdealConnection.ROOT].multiplicities["unresolved"] = k - total
    elif total > k:
        raise ExtractionError(f"extracted charge {total} exceeds the family charge {k}")
    return ideal


def _shift_subtree(vertices, cid, q_v, s_v):
    """Re-express a child subtree in its centred chart coordinates."""
    prefix = cid + "."
    for vid, v in vertices.items():
        if vid.startswith(prefix) and v.site is not None:
            v.site = (v.site - q_v) / s_v
            if v.lam is not None:
                v.lam = v.lam / s_v
    own = vertices[cid].params
    if own is not None:
        vertices[cid].params = BpstParams(
            centre=(own.centre - q_v) / s_v, lam=own.lam / s_v, rho=own.rho, flavor=own.flavor
        )


def _neck_energy_series(raw_densities, moments, thresholds, n_width):
    out = []
    for dens, (m, c, s) in zip(raw_densities, moments):
        lam_eff = max(s / np.sqrt(2.0), 1e-12)
        root = np.sqrt(lam_eff)
        grid = build_grid(
            r_min=root / n_width,
            r_max=root * n_width,
            panels=10,
            gauss_order=thresholds.gauss_order,
            s3_order=thresholds.s3_order,
            region="annulus",
            centre=c,
        )
        out.append(float(np.sum(dens(grid.nodes) * grid.weights)))
    return out


def neck_loss_check(fields, centres, scales, n_width, thresholds=None):
    """Per-step neck and ball energies for a tracked concentration node.

    Energies on Omega(x_a, sqrt(lam_a)/N, N sqrt(lam_a)) must decrease
    along the family; ball energies over B(x_a, N sqrt(lam_a)) approach
    an integer multiple of 8 pi^2.  Returns None when a step has no
    meaningful scale (non-degenerating node).
    """
    thresholds = thresholds or ExtractionThresholds()
    necks, balls = [], []
    for f, c, lam in zip(fields, centres, scales):
        if lam <= 0:
            return None
        root = np.sqrt(lam)
        ann = build_grid(
            r_min=root / n_width,
            r_max=root * n_width,
            panels=10,
            gauss_order=thresholds.gauss_order,
            s3_order=thresholds.s3_order,
            region="annulus",
            centre=np.asarray(c, dtype=float),
        )
        necks.append(float(np.sum(density_on(f, ann.nodes) * ann.weights)))
        ball = _local_grid(np.asarray(c, dtype=float), root * n_width, lam * 1e-3, thresholds)
        balls.append(float(np.sum(density_on(f, ball.nodes) * ball.weights)))
    return {"neck": necks, "ball": balls}
