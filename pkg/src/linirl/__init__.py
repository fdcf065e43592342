"""Maximum-entropy inverse reinforcement learning by sparse linear solves.

The forward quantities ``z`` and their Jacobians come from one sparse LU
factorization of ``I - M`` per parameter value; trajectories with missing
segments are scored through reach probabilities obtained from a single
composed linear system per destination group.
"""

from .data import Gap, Observed, Trajectory, read_network, read_trajectories, write_network, write_trajectories
from .errors import (ConvergenceError, LinIrlError, NumericalError, SingularSystemError,
                     UnknownTransitionError, ValidationError)
from .forward import ForwardSolution, count_solves, forward_solve, forward_solve_vi, value_iteration
from .likelihood import LogLik, action_prob, action_prob_grad, dataset_loglik, trajectory_loglik
from .mdp import Mdp, build_m, check_condition_i, check_condition_ii
from .missing import incomplete_dataset_loglik, solve_reach, solve_reach_single
from .trainer import TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "ForwardSolution", "Gap", "LinIrlError", "LogLik", "Mdp", "NumericalError",
    "Observed", "SingularSystemError", "TrainConfig", "TrainReport", "Trajectory",
    "UnknownTransitionError", "ValidationError", "action_prob", "action_prob_grad", "build_m",
    "check_condition_i", "check_condition_ii", "count_solves", "dataset_loglik", "evaluate",
    "forward_solve", "forward_solve_vi", "incomplete_dataset_loglik", "read_network",
    "read_trajectories", "solve_reach", "solve_reach_single", "train", "trajectory_loglik",
    "value_iteration", "write_network", "write_trajectories",
]
