"""Comparison solvers: the pure penalty method and the one-level relaxation.

The penalty method is the two-level driver with the multiplier frozen at
zero; it reuses every other code path. The relaxation solver drops the outer
level entirely and runs a single alternating loop on

    min f(x) + (beta(eps)/2)||z||^2   s.t.   A x + B xbar + z = 0

with large eps-scaled penalties and small proximal terms on the x and xbar
updates. It reports ||A x + B xbar|| as the headline feasibility, which
stays bounded away from zero on infeasible instances: the relaxation
produces a point either way and carries no infeasibility signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InvariantViolation
from .inner_admm import POTENTIAL_SLACK, evaluate_potential
from .outer_alm import OuterConfig, SolveResult, SolveStatus, run_two_level, _initial_iterates
from .problem import BlockProblem, ResidualReport, objective
from .subsolvers import (XSolverConfig, resolve_x_config, solve_x_block,
                         solve_xbar_block, solve_z_block)


def run_penalty(problem: BlockProblem, cfg: OuterConfig, init=None, sink=None) -> SolveResult:
    """Two-level loop with the multiplier map replaced by the constant zero."""

    def zero_dual(lam, beta, z, bounds):
        return np.zeros_like(lam)

    cfg = replace(cfg, lam_init=0.0)
    return run_two_level(problem, cfg, init=init, sink=sink,
                         dual_map=zero_dual, solver_tag="penalty")


@dataclass
class RelaxationConfig:
    """One-level relaxation parameters; defaults follow the eps scaling
    beta = 1/eps^2, rho = 3/eps^2, proximal weight 0.01/eps."""

    eps: float = 1e-4
    beta: float | None = None
    rho: float | None = None
    prox_weight: float | None = None
    max_iters: int = 20000
    stop_scale: float | None = None  # primal target = stop_scale * eps; default sqrt(m)
    stall_tol_factor: float = 1e-3  # movement floor, relative to eps
    record_potential: bool = True
    x_config: XSolverConfig = field(default_factory=XSolverConfig)

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.beta is None:
            self.beta = 1.0 / self.eps**2
        if self.rho is None:
            self.rho = 3.0 / self.eps**2
        if self.prox_weight is None:
            self.prox_weight = 0.01 / self.eps
        if min(self.beta, self.rho, self.prox_weight) <= 0:
            raise ConfigError("beta, rho and the proximal weight must be positive")


def run_relaxation(problem: BlockProblem, cfg: RelaxationConfig, init=None,
                   sink=None) -> SolveResult:
    """Single-level alternating loop on the slack-penalized relaxation.

    Stops when the headline feasibility reaches its target, when the
    per-iteration movement stalls (the loop has converged to a stationary
    point of the relaxation, feasible or not), or at the iteration budget.
    """
    beta, rho, hw = cfg.beta, cfg.rho, cfg.prox_weight
    x, xbar, z = _initial_iterates(problem, init)
    y = -beta * z
    lam0 = np.zeros(problem.m)
    x_cfg = resolve_x_config(cfg.x_config, cfg.eps)
    target = (np.sqrt(problem.m) if cfg.stop_scale is None else cfg.stop_scale) * cfg.eps
    stall_tol = cfg.stall_tol_factor * cfg.eps

    L_prev = None
    if cfg.record_potential:
        L_prev = evaluate_potential(problem, lam0, beta, rho, x, xbar, z, y)

    status = SolveStatus.BUDGET_EXHAUSTED
    d1n = d2n = d3n = np.inf
    x_res = 0.0
    t = 0
    for t in range(1, cfg.max_iters + 1):
        x_prev, xbar_prev, z_prev = x, xbar, z
        x, x_res = solve_x_block(problem, x, xbar, z, y, rho, x_cfg,
                                 prox_weight=hw, prox_center=x_prev)
        xbar = solve_xbar_block(problem, x, z, y, rho,
                                prox_weight=hw, prox_center=xbar_prev)
        z = solve_z_block(lam0, beta, x, xbar, y, rho, problem.A, problem.B)
        w = problem.A.matvec(x) + problem.B.matvec(xbar) + z
        y = y + rho * w

        d1 = -rho * problem.A.rmatvec(problem.B.matvec(xbar_prev) + z_prev
                                      - problem.B.matvec(xbar) - z) - hw * (x - x_prev)
        d2 = -rho * problem.B.rmatvec(z_prev - z) - hw * (xbar - xbar_prev)
        d1n = float(np.linalg.norm(d1)) + x_res
        d2n = float(np.linalg.norm(d2))
        d3n = float(np.linalg.norm(w))
        primal = float(np.linalg.norm(problem.A.matvec(x) + problem.B.matvec(xbar)))

        L_val = None
        if cfg.record_potential:
            L_val = evaluate_potential(problem, lam0, beta, rho, x, xbar, z, y)
            if L_val > L_prev + POTENTIAL_SLACK:
                raise InvariantViolation(
                    f"relaxation potential rose by {L_val - L_prev:.3e} at iteration {t}")
            L_prev = L_val
        if sink is not None:
            sink.inner("relaxation", 1, t, beta, rho, L_val, d1n, d2n, d3n,
                       float(np.linalg.norm(z)), primal_gap=primal)

        if primal <= target:
            status = SolveStatus.EPS_STATIONARY
            break
        if max(d1n, d2n, d3n) <= stall_tol:
            # stationary for the relaxation but infeasible for the original
            break

    primal = float(np.linalg.norm(problem.A.matvec(x) + problem.B.matvec(xbar)))
    report = ResidualReport(d1n, d2n, d3n, primal, float(np.linalg.norm(z)))
    return SolveResult(x=x, xbar=xbar, z=z, y=y, lam=lam0, beta=beta, status=status,
                       objective=objective(problem, x), report=report,
                       outer_iters=1, total_inner_iters=t)
