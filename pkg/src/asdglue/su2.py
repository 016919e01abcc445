"""su(2) values and quaternion arithmetic.

Lie-algebra values are stored as 3-vectors of coefficients in an
orthonormal basis for the inner product <xi, eta> = -tr(xi eta).  In this
basis the pointwise norm is the Euclidean norm of the coefficients and the
bracket is sqrt(2) times the cross product.

Group elements (SU(2)) are unit quaternions stored as 4-vectors
[w, x, y, z]; the algebra embeds as v -> (0, v/sqrt(2)).
"""

from __future__ import annotations

import numpy as np

SQRT2 = float(np.sqrt(2.0))

# Index pairs (mu < nu) used for 2-form components everywhere.
PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def bracket(u, v):
    """Lie bracket of su(2) values in orthonormal coefficients."""
    return SQRT2 * np.cross(u, v)


def _build_thooft():
    eta = np.zeros((3, 4, 4))
    etabar = np.zeros((3, 4, 4))
    eps = np.zeros((3, 3, 3))
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        eps[a, b, c] = 1.0
        eps[a, c, b] = -1.0
    for a in range(3):
        for mu in range(3):
            for nu in range(3):
                eta[a, mu, nu] = eps[a, mu, nu]
                etabar[a, mu, nu] = eps[a, mu, nu]
        eta[a, a, 3] = 1.0
        eta[a, 3, a] = -1.0
        etabar[a, a, 3] = -1.0
        etabar[a, 3, a] = 1.0
    return eta, etabar


# 't Hooft symbols: ETA is self-dual, ETABAR anti-self-dual as 2-forms for
# the orientation with eps_{0123} = +1.
ETA, ETABAR = _build_thooft()


def thooft_pairs(symbol):
    """Reduce a (3, 4, 4) 't Hooft symbol to its six mu < nu components.

    Returns shape (6, 3): component pairs index first, algebra index last.
    """
    out = np.empty((6, 3))
    for i, (mu, nu) in enumerate(PAIRS):
        out[i] = symbol[:, mu, nu]
    return out


# ---------------------------------------------------------------------------
# quaternions

def quat_mult(p, q):
    """Hamilton product of quaternion arrays (..., 4)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w1, x1, y1, z1 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    w2, x2, y2, z2 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def quat_inverse(q):
    q = np.asarray(q, dtype=float)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    return quat_conj(q) / n2


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_exp(v):
    """Exponential of an su(2) value (orthonormal coefficients) into SU(2)."""
    v = np.asarray(v, dtype=float)
    # embedded quaternion is v / sqrt(2); exp of pure quaternion (0, p)
    p = v / SQRT2
    theta = np.linalg.norm(p, axis=-1, keepdims=True)
    small = theta < 1e-12
    sinc = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
    out = np.empty(v.shape[:-1] + (4,))
    out[..., 0] = np.cos(theta)[..., 0]
    out[..., 1:] = sinc * p
    return out


def alg_to_quat(v):
    """Embed su(2) coefficients as pure quaternions (0, v/sqrt 2)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (4,))
    out[..., 1:] = v / SQRT2
    return out


def quat_to_alg(q):
    """Project a (nearly pure) quaternion back to su(2) coefficients."""
    return SQRT2 * np.asarray(q, dtype=float)[..., 1:]


def adjoint(u, v):
    """Adjoint action u v u^{-1} on su(2) coefficients, u a unit quaternion.

    Broadcasts over leading axes of both arguments.
    """
    p = alg_to_quat(v)
    return quat_to_alg(quat_mult(quat_mult(u, p), quat_conj(u)))


def adjoint_many(u, values):
    """Adjoint action of unit quaternions u (..., 4) on values (..., K, 3)."""
    u = np.asarray(u, dtype=float)[..., None, :]
    return adjoint(u, values)
