"""Pointwise solvers for Hamilton-Jacobi-Bellman problems and neural value learning."""

from .bvp import BvpSolution, SolveReport, collocation_residual, solve_tpbvp
from .dual import Dual, dual_diff
from .errors import *  # noqa: F401,F403
from .integrate import OdeSolution, rk4, rk45_adaptive
from .marching import MarchSchedule, extend_linear, extend_piecewise, march
from .problems import (
    LqrProblem,
    OcpDefinition,
    RigidBodyParams,
    RigidBodyProblem,
    Sample,
    get_problem,
    lqr_test_problem,
)
from .value_net import MlpModel, TrainConfig

__version__ = "0.1.0"
