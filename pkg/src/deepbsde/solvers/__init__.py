"""The five deep BSDE/PDE solvers and a single entry point to run any of them."""

from .backward import (StepNets, backward_train, dbdp_step_loss, ds_step_loss, frozen_target,
                       mdbdp_step_loss, price_at_initial)
from .config import (BACKWARD_METHODS, METHODS, SolverConfig, SolverDivergence, SolverRun,
                     config_from_mapping, config_to_mapping)
from .dbsde import dbsde_loss, dbsde_train, terminal_values


def solve(cfg, model, drv=None):
    """Train the solver named by ``cfg.method`` and return its :class:`SolverRun`."""
    if cfg.method == "DBSDE":
        return dbsde_train(cfg, model, drv)
    return backward_train(cfg, model, drv)


__all__ = [
    "BACKWARD_METHODS", "METHODS", "SolverConfig", "SolverDivergence", "SolverRun", "StepNets",
    "backward_train", "config_from_mapping", "config_to_mapping", "dbdp_step_loss",
    "dbsde_loss", "dbsde_train", "ds_step_loss", "frozen_target", "mdbdp_step_loss",
    "price_at_initial", "solve", "terminal_values",
]
