"""Branching diffusions with immigration: simulation, identity reconstruction,
and nonparametric estimation of the one-particle diffusion coefficient."""

from bdisim.model import ModelSpec, make_preset, rho, moment_mq, validate_spec

__all__ = [
    "ModelSpec",
    "make_preset",
    "rho",
    "moment_mq",
    "validate_spec",
]

__version__ = "0.1.0"
