"""Numerical toolkit for anti-self-dual SU(2) connections on the four-sphere.

Instanton splicing over gluing trees, mass centre/scale functionals,
finite-difference differentials of the approximate gluing maps, and the
bubble-tree extraction algorithm, with a scaling-law verification harness.
"""

__version__ = "0.1.0"
