"""Bundled gluing-tree configurations for tests, scans, and examples.

Conventions for the round-trip suite: vertices with children carry a
bubble of ansatz scale >= 0.3 so that, after the measure-centred blow-up,
the vertex's own structure sits at chart scale O(1) and never trips the
candidate threshold; terminal bubbles use small ansatz scales and are the
concentration candidates.  Scales are chosen deep enough that every tree
passes validation with b = 4 N sqrt(lam).
"""

from __future__ import annotations

import numpy as np

from .instanton import BpstParams
from .splice import GluingTree, TreeNode

N_DEFAULT = 8.0

# in-regime scan grid: b = 4 N sqrt(lam) stays well below the chart scale
SCAN_LAMBDAS = tuple(10.0 ** e for e in (-4.5, -5.0, -5.5, -6.0, -6.5))


def small_bubble(lam_b=0.02, rho=(1.0, 0.0, 0.0, 0.0)):
    return BpstParams(centre=np.zeros(4), lam=lam_b, rho=np.asarray(rho), flavor="singular")


def one_bubble_tree(lam=1e-5, site=(0.3, 0.0, 0.0, 0.0), lam_b=None, n_width=N_DEFAULT, base="product"):
    """Single bubble glued into a flat or one-instanton base."""
    if lam_b is None:
        lam_b = 1.0 / np.sqrt(2.0)  # centred normal form
    root_conn = "product" if base == "product" else BpstParams(lam=1.0, flavor="regular")
    nodes = {
        "0": TreeNode(id="0", parent=None, k=0 if base == "product" else 1, conn=root_conn),
        "1": TreeNode(
            id="1",
            parent="0",
            k=1,
            conn=small_bubble(lam_b),
            site=np.asarray(site, dtype=float),
            lam=float(lam),
        ),
    }
    return GluingTree(nodes=nodes, n_width=n_width, lam0=0.5)


def two_bubble_tree(lam=2e-6, separation=0.5, lam_b=0.02, n_width=N_DEFAULT):
    """Two bubbles on a flat base, separated in the base chart."""
    s = separation / 2.0
    nodes = {
        "0": TreeNode(id="0", parent=None, k=0, conn="product"),
        "1": TreeNode(id="1", parent="0", k=1, conn=small_bubble(lam_b), site=np.array([-s, 0.0, 0.0, 0.0]), lam=lam),
        "2": TreeNode(id="2", parent="0", k=1, conn=small_bubble(lam_b), site=np.array([s, 0.1, 0.0, 0.0]), lam=lam),
    }
    return GluingTree(nodes=nodes, n_width=n_width, lam0=0.5)


def theta_pair_tree(lam1=1e-4, lam11=2e-5, lam_b=0.02, n_width=N_DEFAULT):
    """Two same-point bubbles: a flat vertex carrying a separated pair.

    The pair sits at +-e_1 in the flat vertex's chart, so the cluster
    measure is centred with scale one (the ideal-connection normal form).
    """
    nodes = {
        "0": TreeNode(id="0", parent=None, k=0, conn="product"),
        "1": TreeNode(id="1", parent="0", k=0, conn="product", site=np.array([0.25, 0.0, 0.0, 0.0]), lam=lam1),
        "11": TreeNode(id="11", parent="1", k=1, conn=small_bubble(lam_b), site=np.array([1.0, 0.0, 0.0, 0.0]), lam=lam11),
        "12": TreeNode(id="12", parent="1", k=1, conn=small_bubble(lam_b), site=np.array([-1.0, 0.0, 0.0, 0.0]), lam=lam11),
    }
    return GluingTree(nodes=nodes, n_width=n_width, lam0=0.5)


def chain_tree(lam1=5e-5, lam11=5e-5, lam111=None, lam_b_interior=0.35, lam_b_leaf=0.02, n_width=N_DEFAULT):
    """Bubble on a bubble (on a bubble): a depth-3 chain when lam111 is set."""
    nodes = {
        "0": TreeNode(id="0", parent=None, k=0, conn="product"),
        "1": TreeNode(
            id="1", parent="0", k=1, conn=small_bubble(lam_b_interior), site=np.array([0.2, 0.1, 0.0, 0.0]), lam=lam1
        ),
        "11": TreeNode(
            id="11",
            parent="1",
            k=1,
            conn=small_bubble(lam_b_interior if lam111 else lam_b_leaf),
            site=np.array([1.5, 0.0, 0.0, 0.0]),
            lam=lam11,
        ),
    }
    if lam111 is not None:
        nodes["111"] = TreeNode(
            id="111", parent="11", k=1, conn=small_bubble(lam_b_leaf), site=np.array([1.5, 0.0, 0.0, 0.0]), lam=lam111
        )
    return GluingTree(nodes=nodes, n_width=n_width, lam0=0.5)


def bpst_base_tree(lam=1e-5, lam_b=0.02, n_width=N_DEFAULT):
    """One bubble on a unit-scale instanton base (total charge two)."""
    return one_bubble_tree(lam=lam, site=(0.3, 0.0, 0.0, 0.0), lam_b=lam_b, n_width=n_width, base="bpst")


def roundtrip_suite():
    """The bundled extraction suite: >= 5 trees incl. a flat parent and a chain."""
    return {
        "one_bubble": one_bubble_tree(lam=1e-5, site=(0.2, 0.1, 0.0, 0.0), lam_b=0.02),
        "two_bubbles": two_bubble_tree(lam=2e-6),
        "bpst_base": bpst_base_tree(lam=1e-5),
        "theta_pair": theta_pair_tree(),
        "chain3": chain_tree(lam1=5e-5, lam11=5e-5, lam111=5e-5),
    }


def scan_tree(lam, base="product", lam_b=None):
    """One-bubble tree used by the differential scans (centred vertex)."""
    return one_bubble_tree(lam=lam, site=(0.3, 0.0, 0.0, 0.0), lam_b=lam_b, base=base)
