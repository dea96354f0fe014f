"""Exact topological-recursion engine for open intersection numbers.

Two independent pipelines compute the same objects:

* :mod:`openrec.recursion` runs the residue recursion on the spectral curve
  x = z^2/2 and produces the correlation differentials W_{g,n};
* :mod:`openrec.oracle` solves the W-algebra constraints order by order and
  produces the free energy F whose derivatives are the same W_{g,n}.

:mod:`openrec.numbers_io` extracts normalized open intersection numbers from
either side, :mod:`openrec.quantum` verifies the quantum-curve ODE on the
principal specialization, and :mod:`openrec.qgrading` explores the
experimental boundary-counting Q-refinement.
"""

from .laurent import AlgebraError, LaurentDifferential, Rational, UnrenormalizedDiagonal
from .recursion import BASELINE, Q_GRADED, CorrelatorKey, CorrelatorStore

__all__ = [
    "AlgebraError",
    "LaurentDifferential",
    "Rational",
    "UnrenormalizedDiagonal",
    "CorrelatorKey",
    "CorrelatorStore",
    "BASELINE",
    "Q_GRADED",
]

__version__ = "0.1.0"
