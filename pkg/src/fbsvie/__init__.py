"""Forward-backward stochastic Volterra integral equations on a scenario tree."""

from .bsvie import BsvieSpec, PicardConfig, PicardReport, picard_solve, solve_bsvie_direct, solve_causal
from .control import (
    ControlProblem,
    adjoint_derivative,
    check_duality,
    check_maximum_principle,
    evaluate_cost,
    gateaux_derivative,
    solve_adjoint,
    solve_state,
    solve_variational,
)
from .errors import ConvergenceError, Error, InfeasibleControlError, NonFiniteError, SpecError
from .forward import ForwardSpec, solve_forward, solve_linear_forward_svie
from .lattice import RegressionLattice, ScenarioTree, TimeGrid
from .lq import LqSpec, solve_lq
from .processes import CoefficientSpec, ControlSet, GeneratorSpec, MSolution, make_generator, register_generator

__all__ = [
    "BsvieSpec", "PicardConfig", "PicardReport", "picard_solve", "solve_bsvie_direct", "solve_causal",
    "ControlProblem", "adjoint_derivative", "check_duality", "check_maximum_principle", "evaluate_cost",
    "gateaux_derivative", "solve_adjoint", "solve_state", "solve_variational",
    "ConvergenceError", "Error", "InfeasibleControlError", "NonFiniteError", "SpecError",
    "ForwardSpec", "solve_forward", "solve_linear_forward_svie",
    "RegressionLattice", "ScenarioTree", "TimeGrid",
    "LqSpec", "solve_lq",
    "CoefficientSpec", "ControlSet", "GeneratorSpec", "MSolution", "make_generator", "register_generator",
]
