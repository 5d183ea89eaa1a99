"""Weyl functions, spectral measures and commutation methods for 1-D Dirac operators.

Modules
-------
ode
    Potentials, the batched adaptive integrator and solution traces.
weyl
    Fundamental systems, singular Weyl functions, eigenvalues, norming
    weights, Stieltjes inversion and gauge transforms.
commute
    Single and double commutation from either endpoint, with the
    transformed potentials, solutions and Weyl functions.
radial
    Frobenius-normalised radial systems, angular-momentum lowering, the
    iterated reduction and its measure factorisation.
cli
    Configuration-driven command-line front end.
"""

from .errors import DiracError
from .ode import PotentialSpec, integrate, wronskian
from .weyl import WeylData, build_fundamental_system, eigenvalues, norming_weights
from .commute import commute_left_phi, commute_left_phi_infinite, commute_right_theta, sigma2_gauge
from .radial import RadialSystem, radial_weyl_data, iterate_reduction, assemble_M

__all__ = [
    "DiracError",
    "PotentialSpec",
    "integrate",
    "wronskian",
    "WeylData",
    "build_fundamental_system",
    "eigenvalues",
    "norming_weights",
    "commute_left_phi",
    "commute_left_phi_infinite",
    "commute_right_theta",
    "sigma2_gauge",
    "RadialSystem",
    "radial_weyl_data",
    "iterate_reduction",
    "assemble_M",
]

__version__ = "0.1.0"
