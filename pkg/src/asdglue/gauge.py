"""SU(2) connections as local one-forms on a chart.

Connection values are arrays (N, 4, 3): spacetime component index, then
su(2) coefficients; curvature values are (N, 6, 3) over the mu < nu pairs
in `su2.PAIRS`.  Curvature is analytic whenever the field carries an
analytic evaluator, with central finite differences as the fallback.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import (
    ConformalMap,
    DomainError,
    MetricField,
    as_points,
    hodge_star_flat,
    two_form_pullback_matrix,
)
from .su2 import PAIRS, SQRT2, adjoint_many, bracket, quat_conj, quat_mult, quat_normalize, quat_to_alg


@dataclass
class ConnectionField:
    """Local connection one-form with optional analytic curvature."""

    ev: Callable[[np.ndarray], np.ndarray]
    curv_ev: Optional[Callable[[np.ndarray], np.ndarray]] = None
    provenance: str = "generic"

    def __call__(self, x):
        x, single = as_points(x)
        a = self.ev(x)
        return a[0] if single else a

    def has_analytic_curvature(self):
        return self.curv_ev is not None


@dataclass
class GaugeTransform:
    """Pointwise SU(2) element as a unit quaternion field.

    `dev` (optional) returns the analytic derivative, shape (N, 4, 4):
    spacetime index then quaternion components.
    """

    ev: Callable[[np.ndarray], np.ndarray]
    dev: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        x, single = as_points(x)
        u = self.ev(x)
        return u[0] if single else u


def _stencil(x, h):
    """Points x +- h e_mu, shape (N, 8, 4): [mu*2 + (0 plus, 1 minus)]."""
    n = x.shape[0]
    out = np.repeat(x[:, None, :], 8, axis=1)
    for mu in range(4):
        out[:, 2 * mu, mu] += h[:, 0] if h.ndim == 2 else h
        out[:, 2 * mu + 1, mu] -= h[:, 0] if h.ndim == 2 else h
    return out


def default_step(x, h=None):
    if h is not None:
        return np.full(x.shape[0], float(h))
    r = np.linalg.norm(x, axis=-1)
    return 1e-4 * np.maximum(1.0, r)


def curvature(a_field: ConnectionField, x, h=None, use_analytic=True, richardson=False):
    """Curvature F_mn = d_m A_n - d_n A_m + [A_m, A_n] at points x.

    Uses the analytic curvature when present (and `use_analytic`); the
    finite-difference path is second order, optionally Richardson
    extrapolated.
    """
    x, single = as_points(x)
    if use_analytic and a_field.curv_ev is not None:
        f = a_field.curv_ev(x)
        return f[0] if single else f

    def fd(step):
        pts = _stencil(x, step).reshape(-1, 4)
        vals = a_field.ev(pts).reshape(x.shape[0], 8, 4, 3)
        da = np.empty((x.shape[0], 4, 4, 3))  # da[:, mu, nu] = d_mu A_nu
        for mu in range(4):
            da[:, mu] = (vals[:, 2 * mu] - vals[:, 2 * mu + 1]) / (2.0 * step[:, None, None])
        a_here = a_field.ev(x)
        f = np.empty((x.shape[0], 6, 3))
        for i, (mu, nu) in enumerate(PAIRS):
            f[:, i] = da[:, mu, nu] - da[:, nu, mu] + bracket(a_here[:, mu], a_here[:, nu])
        return f

    step = default_step(x, h)
    f = fd(step)
    if richardson:
        f_half = fd(step / 2.0)
        f = (4.0 * f_half - f) / 3.0
    return f[0] if single else f


def _is_conformal_tensor(g):
    """Factor c with g = c * delta, or None (g a single 4x4 matrix)."""
    d = np.diagonal(g)
    c = d[0]
    if np.max(np.abs(d - c)) <= 1e-12 * max(1.0, abs(c)) and np.max(
        np.abs(g - c * np.eye(4))
    ) <= 1e-12 * max(1.0, abs(c)):
        return c
    return None


# Coordinate self-dual basis: e1 = dx0^dx1 + dx2^dx3, etc.
_SD_BASIS = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
    ]
)


def selfdual_part(f6, g=None):
    """Self-dual component of a two-form value in the s.d. basis for g.

    `f6` is (6, 3) or (N, 6, 3); `g` a 4x4 metric matrix (or None for
    flat).  For conformally flat metrics the projection equals the flat
    one and only depends on the conformal class.  Returns three su(2)
    values: the coefficients on the self-dual basis two-forms.
    """
    f6 = np.asarray(f6, dtype=float)
    single = f6.ndim == 2
    if single:
        f6 = f6[None]
    if g is not None:
        g = np.asarray(g, dtype=float)
        if _is_conformal_tensor(g) is None:
            ev = np.linalg.eigvalsh(g)
            if np.min(ev) <= 0:
                raise DomainError("metric must be positive definite")
            frame = np.linalg.inv(np.linalg.cholesky(g)).T  # E^T g E = 1
            m = two_form_pullback_matrix(frame)
            f_frame = np.einsum("ij,njc->nic", m, f6)
            p = 0.5 * np.einsum("ai,nic->nac", _SD_BASIS, f_frame)
            return p[0] if single else p
    plus = 0.5 * (f6 + hodge_star_flat(f6))
    p = 0.5 * np.einsum("ai,nic->nac", _SD_BASIS, plus)
    return p[0] if single else p


def selfdual_embed(p):
    """Expand self-dual coefficients (…, 3, 3) back to two-form components."""
    p = np.asarray(p, dtype=float)
    return np.einsum("ai,...ac->...ic", _SD_BASIS, p)


def selfdual_norm(p):
    """Pointwise norm of a self-dual part given by basis coefficients."""
    p = np.asarray(p, dtype=float)
    return np.sqrt(2.0 * np.sum(p * p, axis=(-2, -1)))


def selfdual_two_form(a_field: ConnectionField):
    """Evaluator x -> F^+ as two-form components (flat conformal class)."""

    def ev(x):
        f = curvature(a_field, x)
        return selfdual_embed(selfdual_part(f))

    return ev


# ---------------------------------------------------------------------------
# gauge action and pullback

def _du_fd(u_ev, x, h):
    pts = _stencil(x, h).reshape(-1, 4)
    vals = quat_normalize(u_ev(pts)).reshape(x.shape[0], 8, 4)
    du = np.empty((x.shape[0], 4, 4))
    for mu in range(4):
        du[:, mu] = (vals[:, 2 * mu] - vals[:, 2 * mu + 1]) / (2.0 * h[:, None])
    return du


def gauge_transform(a_field: ConnectionField, u: GaugeTransform, h=None, richardson=True) -> ConnectionField:
    """u^{-1} A u + u^{-1} du, with du analytic when `u.dev` is given."""

    def ev(x):
        x, _ = as_points(x)
        a = a_field.ev(x)
        uu = quat_normalize(u.ev(x))
        rotated = adjoint_many(quat_conj(uu), a)
        if u.dev is not None:
            du = u.dev(x)
        else:
            step = default_step(x, h)
            du = _du_fd(u.ev, x, step)
            if richardson:
                du = (4.0 * _du_fd(u.ev, x, step / 2.0) - du) / 3.0
        # u^{-1} d_mu u as su(2) coefficients
        conn = quat_to_alg(quat_mult(quat_conj(uu)[:, None, :], du))
        return rotated + conn

    curv = None
    if a_field.curv_ev is not None:

        def curv(x):
            x, _ = as_points(x)
            f = a_field.curv_ev(x)
            uu = quat_normalize(u.ev(x))
            return adjoint_many(quat_conj(uu), f)

    return ConnectionField(ev=ev, curv_ev=curv, provenance="transformed")


def constant_gauge_rotation(a_field: ConnectionField, rho) -> ConnectionField:
    """Global gauge rotation by a constant unit quaternion."""
    rho = quat_normalize(np.asarray(rho, dtype=float))
    if np.allclose(rho, [1.0, 0.0, 0.0, 0.0], atol=1e-15):
        return a_field
    rho_c = quat_conj(rho)

    def ev(x):
        return adjoint_many(rho_c, a_field.ev(x))

    curv = None
    if a_field.curv_ev is not None:

        def curv(x):
            return adjoint_many(rho_c, a_field.curv_ev(x))

    return ConnectionField(ev=ev, curv_ev=curv, provenance=a_field.provenance + "|rotated")


def pullback_connection(cmap: ConformalMap, a_field: ConnectionField) -> ConnectionField:
    """(f^* A)_mu(x) = J^nu_mu A_nu(f(x)) for the constant-Jacobian map f."""
    jac = cmap.jacobian
    m2 = two_form_pullback_matrix(jac)

    def ev(x):
        x, _ = as_points(x)
        return np.einsum("nm,xnc->xmc", jac, a_field.ev(cmap.apply(x)))

    curv = None
    if a_field.curv_ev is not None:

        def curv(x):
            x, _ = as_points(x)
            return np.einsum("ij,xjc->xic", m2, a_field.curv_ev(cmap.apply(x)))

    return ConnectionField(ev=ev, curv_ev=curv, provenance="pulled-back")


# ---------------------------------------------------------------------------
# parallel-transport gauges

def _transport(a_field: ConnectionField, starts, ends, steps):
    """Parallel transport along straight segments, RK4 on unit quaternions.

    Solves ds/dt = -A(gamma(t))(gamma') s with s(0) = 1 for each segment;
    renormalizes each step and fails on excessive drift.
    """
    n = starts.shape[0]
    tangent = ends - starts  # constant speed parametrization on [0, 1]
    u = np.zeros((n, 4))
    u[:, 0] = 1.0

    def rhs(t, uu):
        pts = starts + t[:, None] * tangent
        a = a_field.ev(pts)  # (n, 4, 3)
        p = np.einsum("nm,nmc->nc", tangent, a)  # iota_tangent A
        q = np.zeros((n, 4))
        q[:, 1:] = p / SQRT2
        return -quat_mult(q, uu)

    dt = 1.0 / steps
    t = np.zeros(n)
    for _ in range(steps):
        k1 = rhs(t, u)
        k2 = rhs(t + dt / 2, u + dt / 2 * k1)
        k3 = rhs(t + dt / 2, u + dt / 2 * k2)
        k4 = rhs(t + dt, u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        norms = np.linalg.norm(u, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DomainError("parallel transport drifted off SU(2); refine ode_steps")
        u = u / norms[:, None]
        t = t + dt
    return u


def radial_transport(a_field: ConnectionField, centre, x, ode_steps=64):
    """Transport from `centre` to each x along the straight ray."""
    x, single = as_points(x)
    centre = np.asarray(centre, dtype=float)
    starts = np.repeat(centre[None, :], x.shape[0], axis=0)
    lengths = np.linalg.norm(x - centre, axis=-1)
    steps = int(max(16, np.ceil(ode_steps * max(float(np.max(lengths, initial=0.0)), 1e-12))))
    steps = min(steps, 4096)
    u = _transport(a_field, starts, x, steps)
    return u[0] if single else u


def radial_gauge(a_field: ConnectionField, centre, ode_steps=64) -> ConnectionField:
    """Radial gauge about `centre` by parallel transport along rays.

    The input must be smooth on the ball of interest (in particular at
    the centre itself); the output satisfies iota_r A = 0 and the linear
    bound |A(x)| <= K |x - centre| with K = sup |F|.
    """
    centre = np.asarray(centre, dtype=float)
    probe = a_field.ev(centre[None, :] + 1e-9)
    if not np.all(np.isfinite(probe)) or np.max(np.abs(probe)) > 1e6:
        raise DomainError("radial_gauge needs a connection smooth at the centre")

    def u_ev(x):
        return radial_transport(a_field, centre, x, ode_steps)

    transform = GaugeTransform(ev=u_ev)
    out = gauge_transform(a_field, transform, richardson=False)
    out.provenance = "radial-gauge"
    return out


def transverse_gauge(a_field: ConnectionField, direction, ode_steps=64) -> ConnectionField:
    """Gauge with iota_p A = 0: transport along lines in `direction`.

    Sections start from the hyperplane through the origin orthogonal to
    the direction.
    """
    p = np.asarray(direction, dtype=float)
    p = p / np.linalg.norm(p)

    def u_ev(x):
        x, _ = as_points(x)
        t = x @ p
        feet = x - t[:, None] * p[None, :]
        span = float(np.max(np.abs(t), initial=0.0))
        steps = int(max(16, np.ceil(ode_steps * max(span, 1e-12))))
        return _transport(a_field, feet, x, min(steps, 4096))

    out = gauge_transform(a_field, GaugeTransform(ev=u_ev), richardson=False)
    out.provenance = "transverse-gauge"
    return out


# ---------------------------------------------------------------------------
# Lie derivatives along the conformal group

def _contract_curvature(a_field, x, vec):
    """iota_v F with components (iota_v F)_mu = v^nu F_{nu mu}."""
    f = curvature(a_field, x)
    out = np.zeros((x.shape[0], 4, 3))
    for i, (mu, nu) in enumerate(PAIRS):
        # F_{mu nu} = f[:, i]; add v^mu F_{mu nu} to component nu and
        # v^nu F_{nu mu} = -v^nu F_{mu nu} to component mu.
        out[:, nu] += vec[:, mu, None] * f[:, i]
        out[:, mu] -= vec[:, nu, None] * f[:, i]
    return out


def lie_derivative_radial(a_field: ConnectionField, x, centre=None, check_gauge=True):
    """iota_r F at x, the dilation Lie derivative in radial gauge.

    Equals -lambda d/dlambda (c_lambda^* A) at lambda = 1 for fields in
    radial gauge about the dilation centre; the precondition
    |iota_r A| <= 1e-6 |x| sup|F| is checked unless disabled.
    """
    x, single = as_points(x)
    centre = np.zeros(4) if centre is None else np.asarray(centre, dtype=float)
    rel = x - centre
    if check_gauge:
        a = a_field.ev(x)
        radial = np.einsum("nm,nmc->nc", rel, a)
        fnorm = np.sqrt(np.sum(curvature(a_field, x) ** 2, axis=(1, 2)))
        bound = 1e-6 * np.linalg.norm(rel, axis=-1) * np.maximum(np.max(fnorm), 1.0)
        if np.any(np.linalg.norm(radial, axis=-1) > np.maximum(bound, 1e-9)):
            raise DomainError("connection is not in radial gauge about the centre")
    out = _contract_curvature(a_field, x, rel)
    return out[0] if single else out


def lie_derivative_translation(a_field: ConnectionField, direction, x, check_gauge=True):
    """iota_p F at x, the translation Lie derivative in transverse gauge."""
    x, single = as_points(x)
    p = np.asarray(direction, dtype=float)
    vec = np.repeat(p[None, :], x.shape[0], axis=0)
    if check_gauge:
        a = a_field.ev(x)
        trans = np.einsum("m,nmc->nc", p, a)
        fnorm = np.sqrt(np.sum(curvature(a_field, x) ** 2, axis=(1, 2)))
        bound = 1e-6 * np.maximum(np.max(fnorm), 1.0)
        if np.any(np.linalg.norm(trans, axis=-1) > np.maximum(bound, 1e-9)):
            raise DomainError("connection is not in transverse gauge for the direction")
    out = _contract_curvature(a_field, x, vec)
    return out[0] if single else out


def zero_connection() -> ConnectionField:
    def ev(x):
        x, _ = as_points(x)
        return np.zeros((x.shape[0], 4, 3))

    def curv(x):
        x, _ = as_points(x)
        return np.zeros((x.shape[0], 6, 3))

    return ConnectionField(ev=ev, curv_ev=curv, provenance="product")
