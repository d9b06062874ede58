"""PDE parameter estimation from sparse observations.

Builds finite-difference semi-discretizations of four multiphysics
systems, differentiates the time integration exactly (discrete adjoint),
and fits unknown scalar and field parameters in two stages: a homogeneous
scalar magnitude first, then a multiplicative neural-network correction.
"""

__version__ = "0.1.0"
