"""Two-level distributed solver for nonconvex consensus-constrained problems."""

from .baselines import RelaxationConfig, run_penalty, run_relaxation
from .errors import (ConfigError, InvariantViolation, OracleError, ShapeError,
                     TwoLevelError)
from .inner_admm import InnerConfig, InnerResult, evaluate_potential, run_inner
from .linalg import (SparseMatrix, hadamard, khatri_rao, mode_fold, mode_unfold,
                     soft_shrink, spmv)
from .outer_alm import (OuterConfig, SolveResult, SolveStatus, check_eps_stationary,
                        classify_limit, feasibility_residual, run_two_level,
                        two_level_config, update_dual, update_penalty)
from .problem import (BlockProblem, BlockSpec, EqualityManifold, GlobalSet,
                      Projection, ResidualReport, build_consensus, gradient,
                      load_instance, objective, primal_residual, save_instance)
from .subsolvers import (XSolverConfig, solve_x_block, solve_xbar_block,
                         solve_z_block)

__version__ = "0.1.0"
