"""Deep BSDE/PDE solvers for best-of options under a multi-asset Heston model."""

__version__ = "0.1.0"
