"""Learning-based tube MPC for linear systems with bounded residual uncertainty.

The package splits along the control architecture: set algebra (polytope),
the jet-engine surge plant and its discretized model (plant), the adaptive
network and kernel estimators (oracle), a dense QP solver (qp), the tube MPC
and SQP layer (mpc), the dual-timescale closed loop (runtime), scenario files
(config) and a command-line front end (cli).
"""

from .polytope import (Polytope, PolytopeError, EmptyResult, Unbounded,
                       NotSchurStable, support, pontryagin_diff, tube_margins,
                       max_invariant_set, prune_redundant)
from .plant import (MooreGreitzerParams, TruthSimulator, PlantModel,
                    mg_rhs, linearize_discretize, truth_residual, estimate_W)
from .oracle import (NetworkArch, OracleState, new_oracle, predict, adapt,
                     train_hidden, swap_hidden, ReplayBuffer, buffer_push,
                     L2nwEstimator, l2nw_predict)
from .qp import QpProblem, QpSolution, qp_solve, QpError, QpInfeasible
from .mpc import (ControllerConfig, LbmpcProblem, MpcSolution, build_lbmpc,
                  build_margins, solve_lbmpc, solve_linear_mpc, shift_solution,
                  synthesize_gain, synthesize_tube_gain, solve_lyapunov_P,
                  MpcError, MpcInfeasible, EmptyTightenedSet)
from .runtime import (ScheduleConfig, ClosedLoopTrace, run_closed_loop,
                      build_setup, metrics, compare, MetricsReport,
                      RuntimeFailure, InfeasibleAtStart)
from .config import (Scenario, ConfigError, parse_scenario, load_scenario,
                     echo_scenario)

__version__ = "0.1.0"
