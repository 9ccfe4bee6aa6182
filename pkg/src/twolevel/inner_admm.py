"""Three-block alternating loop on the slack-coupled subproblem.

For a fixed multiplier ``lam`` and penalty ``beta`` the loop minimizes

    f(x) + <lam, z> + (beta/2)||z||^2   s.t.   A x + B xbar + z = 0,
    x block-feasible, xbar in the global set,

by cycling x, xbar, z and the coupling dual y. The augmented Lagrangian is a
potential function: it never increases across iterations, which is enforced
as a hard invariant rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation, OracleError
from .problem import BlockProblem, objective
from .subsolvers import (XSolverConfig, resolve_x_config, solve_x_block,
                         solve_xbar_block, solve_z_block)

POTENTIAL_SLACK = 1e-8


@dataclass
class InnerConfig:
    eps1: float
    eps2: float
    eps3: float
    rho_factor: float = 2.0  # rho = rho_factor * beta; descent needs >= sqrt(2)
    max_iters: int = 1000
    record_potential: bool = True
    x_config: XSolverConfig = field(default_factory=XSolverConfig)

    def __post_init__(self):
        if min(self.eps1, self.eps2, self.eps3) <= 0:
            raise ConfigError("inner tolerances must be positive")
        if self.rho_factor < np.sqrt(2.0):
            raise ConfigError(
                f"rho_factor {self.rho_factor} breaks the slack-step descent bound")


@dataclass
class InnerResult:
    x: np.ndarray
    xbar: np.ndarray
    z: np.ndarray
    y: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d1_norm: float
    d2_norm: float
    d3_norm: float
    iterations: int
    converged: bool
    x_residual: float  # terminal x-block stationarity slack, included in d1_norm
    potential_trace: list


def evaluate_potential(problem: BlockProblem, lam, beta, rho, x, xbar, z, y,
                       feas_tol=1e-6):
    """Augmented Lagrangian value; errors if x leaves its constraint sets."""
    err = problem.feasibility_error(x)
    if err > feas_tol * (1.0 + float(np.linalg.norm(x))):
        raise OracleError(f"x violates its block constraint sets by {err:.3e}")
    if problem.global_set.kind == "box":
        gerr = float(np.linalg.norm(xbar - problem.global_set.project(xbar)))
        if gerr > feas_tol * (1.0 + float(np.linalg.norm(xbar))):
            raise OracleError(f"xbar violates the global set by {gerr:.3e}")
    w = problem.A.matvec(x) + problem.B.matvec(xbar) + z
    return (objective(problem, x) + float(lam @ z) + 0.5 * beta * float(z @ z)
            + float(y @ w) + 0.5 * rho * float(w @ w))


def run_inner(problem: BlockProblem, lam, beta, init, cfg: InnerConfig,
              sink=None, outer_k=1, solver="two_level") -> InnerResult:
    """Run the inner loop until the three residual tolerances hold.

    ``init`` is ``(x0, xbar0, z0)`` with x0 block-feasible; the coupling dual
    starts at ``y0 = -(lam + beta z0)`` so the slack optimality identity
    holds from the first iteration. On tolerance failure within the
    iteration budget the best iterates are returned with ``converged=False``
    and the outer level decides what to do.
    """
    x0, xbar0, z0 = init
    x = np.array(x0, dtype=np.float64)
    xbar = np.array(xbar0, dtype=np.float64)
    z = np.array(z0, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if beta <= 0:
        raise ConfigError("beta must be positive")
    rho = cfg.rho_factor * beta
    y = -(lam + beta * z)

    x_cfg = resolve_x_config(cfg.x_config, cfg.eps1)
    potential_trace = []
    L_prev = None
    if cfg.record_potential:
        L_prev = evaluate_potential(problem, lam, beta, rho, x, xbar, z, y)
        potential_trace.append(L_prev)

    d1 = d2 = d3 = np.zeros(problem.m)
    d1n = d2n = d3n = np.inf
    x_res = 0.0
    converged = False
    t = 0
    for t in range(1, cfg.max_iters + 1):
        xbar_lag, z_lag = xbar, z
        x, x_res = solve_x_block(problem, x, xbar, z, y, rho, x_cfg)
        xbar = solve_xbar_block(problem, x, z, y, rho)
        z = solve_z_block(lam, beta, x, xbar, y, rho, problem.A, problem.B)
        w = problem.A.matvec(x) + problem.B.matvec(xbar) + z
        y = y + rho * w

        d1 = -rho * problem.A.rmatvec(problem.B.matvec(xbar_lag) + z_lag
                                      - problem.B.matvec(xbar) - z)
        d2 = -rho * problem.B.rmatvec(z_lag - z)
        d3 = w
        # the x block is solved to x_res only, so its slack is charged to d1
        d1n = float(np.linalg.norm(d1)) + x_res
        d2n = float(np.linalg.norm(d2))
        d3n = float(np.linalg.norm(d3))

        L_val = None
        if cfg.record_potential:
            L_val = evaluate_potential(problem, lam, beta, rho, x, xbar, z, y)
            if L_val > L_prev + POTENTIAL_SLACK:
                raise InvariantViolation(
                    f"potential rose by {L_val - L_prev:.3e} at inner iteration {t}; "
                    "a block update broke its descent contract")
            L_prev = L_val
            potential_trace.append(L_val)
        if sink is not None:
            sink.inner(solver, outer_k, t, beta, rho, L_val, d1n, d2n, d3n,
                       float(np.linalg.norm(z)))

        if d1n <= cfg.eps1 and d2n <= cfg.eps2 and d3n <= cfg.eps3:
            converged = True
            break

    return InnerResult(x, xbar, z, y, d1, d2, d3, d1n, d2n, d3n,
                       iterations=t, converged=converged, x_residual=x_res,
                       potential_trace=potential_trace)
