"""Block-update solvers for the inner alternating loop.

The first block (per-agent x) is solved by projected gradient with Armijo
backtracking, warm started at the previous iterate; sets given as equality
manifolds use a quadratic-penalty loop with a Gauss-Newton feasibility
restoration instead. The global block and the slack block admit closed-form
minimizers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .problem import BlockProblem, EqualityManifold, Projection

_MIN_STEP = 1e-18


@dataclass
class XSolverConfig:
    """Settings for the x-block local solver.

    ``stationarity_tol`` bounds the projected-gradient (or KKT) residual of
    the accepted point; the inner loop resolves it per round so subproblem
    slack never dominates the loop's own stopping tolerances.
    """

    max_steps: int = 200
    stationarity_tol: float = 1e-6
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    step_init: float = 1.0
    step_growth: float = 2.0
    penalty_mu: float = 100.0
    penalty_growth: float = 10.0
    penalty_mu_max: float = 1e8
    restore_tol: float = 1e-10
    restore_steps: int = 25
    threads: int = 1

    def __post_init__(self):
        if not (0.0 < self.shrink < 1.0):
            raise ConfigError(f"shrink factor must be in (0,1), got {self.shrink}")
        if not (0.0 < self.sufficient_decrease < 1.0):
            raise ConfigError(
                f"sufficient-decrease constant must be in (0,1), got {self.sufficient_decrease}")
        if self.penalty_mu <= 0 or self.penalty_growth <= 1.0:
            raise ConfigError("penalty loop needs mu > 0 and growth factor > 1")


def _projected_gradient(value_and_grad, project, v0, cfg: XSolverConfig, scale=None):
    """Monotone projected gradient; returns (v, residual, accepted step).

    ``scale`` is an optional diagonal metric (curvature estimate per
    coordinate); steps move along ``-g/scale``, which keeps the step count
    insensitive to the penalty-dominated coordinates. The reported residual
    is always the plain gradient-mapping norm ``||v - proj(v - eta g)||/eta``
    at an unscaled step implied by the accepted one.
    """
    v = np.array(v0, dtype=np.float64)
    fv, g = value_and_grad(v)
    if scale is None:
        scale = np.ones_like(v)
    scale_max = float(np.max(scale)) if scale.size else 1.0
    # measurement step: the stiffest plain step the accepted scaled steps
    # imply; kept away from zero so roundoff never masquerades as a residual
    eta_meas = min(cfg.step_init, 1.0) / scale_max

    def plain_residual(point, grad):
        d = point - project(point - eta_meas * grad)
        return float(np.linalg.norm(d)) / eta_meas

    residual = plain_residual(v, g)
    if residual <= cfg.stationarity_tol:
        return v, residual, eta_meas
    eta = cfg.step_init
    for _ in range(cfg.max_steps):
        accepted = None
        step = eta
        while step > _MIN_STEP:
            cand = project(v - step * (g / scale))
            diff = cand - v
            sq = float(diff @ (scale * diff))
            if sq == 0.0:
                break
            f_cand, g_cand = value_and_grad(cand)
            # descent-lemma acceptance gives f drop >= |diff|^2_scale / (2 step);
            # the explicit f_cand <= fv keeps monotonicity even if the
            # projection is only approximate in the scaled metric
            if f_cand <= min(fv, fv + float(g @ diff) + sq / (2.0 * step)):
                accepted = (cand, f_cand, g_cand, step)
                break
            step *= cfg.shrink
        if accepted is None:
            break
        v, fv, g, eta = accepted
        residual = plain_residual(v, g)
        if residual <= cfg.stationarity_tol:
            return v, residual, eta
        eta *= cfg.step_growth
    return v, plain_residual(v, g), eta


def _kkt_residual(phi_grad, manifold: EqualityManifold, v):
    """Stationarity residual with least-squares multipliers plus ||h||."""
    h, jac = manifold.evaluate(v)
    g = phi_grad(v)
    if h.size:
        nu, *_ = np.linalg.lstsq(jac.T, -g, rcond=None)
        stat = float(np.linalg.norm(g + jac.T @ nu))
    else:
        stat = float(np.linalg.norm(g))
    return stat + float(np.linalg.norm(h))


def _penalty_loop(value_and_grad, manifold: EqualityManifold, v0,
                  cfg: XSolverConfig, hess_diag=None):
    """Quadratic-penalty solve over {h(v) = 0}; returns (v, KKT residual).

    Each stage runs descent on ``phi + (mu/2)||h||^2`` preconditioned by the
    explicit curvature ``diag(hess_diag) + mu J^T J`` (plain gradient steps
    cannot cope with the penalty-dominated spectrum), then takes a few
    full Newton steps on the stage KKT system to sharpen stationarity and
    feasibility together. The reported residual pairs the least-squares
    multiplier stationarity norm with ``||h||``.
    """
    v = np.array(v0, dtype=np.float64)
    n = v.size
    if hess_diag is None:
        hess_diag = np.ones(n)

    def phi_grad(u):
        return value_and_grad(u)[1]

    def penalized_value(u, mu):
        val, _ = value_and_grad(u)
        h, _ = manifold.evaluate(u)
        return val + 0.5 * mu * float(h @ h)

    tol = cfg.stationarity_tol
    residual = _kkt_residual(phi_grad, manifold, v)
    if residual <= tol:  # warm start already good
        return v, residual

    p = manifold.n_eq
    mu = cfg.penalty_mu
    for _ in range(12):
        # stage descent in the metric diag + mu J'J
        for _ in range(cfg.max_steps):
            _, g = value_and_grad(v)
            h, jac = manifold.evaluate(v)
            g_pen = g + mu * (jac.T @ h)
            gnorm = float(np.linalg.norm(g_pen))
            if gnorm <= 0.1 * tol:
                break
            metric = np.diag(hess_diag) + mu * (jac.T @ jac)
            metric[np.diag_indices_from(metric)] += 1e-12 * mu + 1e-12
            d = -np.linalg.solve(metric, g_pen)
            slope = float(g_pen @ d)
            if slope >= 0:
                break
            fv = penalized_value(v, mu)
            step = 1.0
            while step > _MIN_STEP:
                cand = v + step * d
                if penalized_value(cand, mu) <= fv + cfg.sufficient_decrease * step * slope:
                    break
                step *= cfg.shrink
            if step <= _MIN_STEP:
                break
            moved = step * float(np.linalg.norm(d))
            v = v + step * d
            if moved <= 1e-14 * (1.0 + float(np.linalg.norm(v))):
                break
        # Newton polish of the stage KKT system pins ||h|| and the
        # stationarity residual without growing mu further
        best_v, best_res = v, _kkt_residual(phi_grad, manifold, v)
        for _ in range(cfg.restore_steps):
            _, g = value_and_grad(v)
            h, jac = manifold.evaluate(v)
            kkt = np.zeros((n + p, n + p))
            kkt[:n, :n] = np.diag(hess_diag) + mu * (jac.T @ jac)
            kkt[:n, n:] = jac.T
            kkt[n:, :n] = jac
            rhs = np.concatenate([-g, -h])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                break
            d = sol[:n]
            if not np.all(np.isfinite(d)):
                break
            v = v + d
            res = _kkt_residual(phi_grad, manifold, v)
            if res < best_res:
                best_v, best_res = v, res
            if float(np.linalg.norm(d)) <= 1e-13 * (1.0 + float(np.linalg.norm(v))):
                break
        v, residual = best_v, best_res
        if residual <= tol or mu >= cfg.penalty_mu_max:
            break
        mu *= cfg.penalty_growth
    return v, residual


def _block_closure(problem, i, c, y, rho, prox_weight=0.0, prox_center=None):
    blk = problem.blocks[i]
    sub = problem.block_A[i]
    rows = problem.block_rows[i]
    y_i = y[rows]
    c_i = c[rows]
    center = None if prox_center is None else prox_center[problem.block_slice(i)]

    def value_and_grad(v):
        val, grad = blk.evaluate(v, block_id=i)
        av = sub.matvec(v)
        r = av + c_i
        val = val + float(y_i @ av) + 0.5 * rho * float(r @ r)
        grad = grad + sub.rmatvec(y_i + rho * r)
        if prox_weight > 0.0:
            dv = v - center
            val += 0.5 * prox_weight * float(dv @ dv)
            grad += prox_weight * dv
        return val, grad

    return value_and_grad


def _solve_one_block(problem, i, x_prev_i, c, y, rho, cfg, prox_weight=0.0, prox_center=None):
    blk = problem.blocks[i]
    fn = _block_closure(problem, i, c, y, rho, prox_weight, prox_center)
    scale = rho * problem.block_A[i].col_sqnorms() + prox_weight + 1.0
    if isinstance(blk.set_oracle, Projection):
        v, res, _ = _projected_gradient(fn, blk.set_oracle.project, x_prev_i, cfg, scale)
    else:
        v, res = _penalty_loop(fn, blk.set_oracle, x_prev_i, cfg, scale)
    # Descent is part of the contract; fall back to the warm start otherwise.
    if fn(v)[0] > fn(x_prev_i)[0]:
        return np.array(x_prev_i), res
    return v, res


def _solve_joint(problem, x_prev, c, y, rho, cfg, prox_weight=0.0, prox_center=None):
    """All blocks at once; needed when rows of A couple several blocks."""
    slices = [problem.block_slice(i) for i in range(len(problem.blocks))]
    manifolds = [(i, b.set_oracle) for i, b in enumerate(problem.blocks)
                 if isinstance(b.set_oracle, EqualityManifold)]

    def value_and_grad(x):
        val = 0.0
        grad = np.empty_like(x)
        for i, blk in enumerate(problem.blocks):
            bval, bgrad = blk.evaluate(x[slices[i]], block_id=i)
            val += bval
            grad[slices[i]] = bgrad
        ax = problem.A.matvec(x)
        r = ax + c
        val += float(y @ ax) + 0.5 * rho * float(r @ r)
        grad += problem.A.rmatvec(y + rho * r)
        if prox_weight > 0.0:
            dx = x - prox_center
            val += 0.5 * prox_weight * float(dx @ dx)
            grad += prox_weight * dx
        return val, grad

    def project(x):
        out = np.array(x)
        for i, blk in enumerate(problem.blocks):
            if isinstance(blk.set_oracle, Projection):
                out[slices[i]] = blk.set_oracle.project(out[slices[i]])
        return out

    scale = rho * problem.A.col_sqnorms() + prox_weight + 1.0
    if not manifolds:
        v, res, _ = _projected_gradient(value_and_grad, project, x_prev, cfg, scale)
    else:
        n_eq = sum(o.n_eq for _, o in manifolds)

        def joint_h(x):
            h = np.empty(n_eq)
            jac = np.zeros((n_eq, x.size))
            at = 0
            for i, oracle in manifolds:
                hi, ji = oracle.evaluate(x[slices[i]])
                h[at:at + oracle.n_eq] = hi
                jac[at:at + oracle.n_eq, slices[i]] = ji
                at += oracle.n_eq
            return h, jac

        joint = EqualityManifold(joint_h, n_eq, describe="joint")
        if any(isinstance(b.set_oracle, Projection) for b in problem.blocks):
            raise ConfigError(
                "rows of A couple manifold and projection blocks; no joint solver for this mix")
        v, res = _penalty_loop(value_and_grad, joint, x_prev, cfg, scale)
    if value_and_grad(v)[0] > value_and_grad(x_prev)[0]:
        return np.array(x_prev), res
    return v, res


def solve_x_block(problem: BlockProblem, x_prev, xbar, z, y, rho, cfg=None,
                  prox_weight=0.0, prox_center=None):
    """Update the agent blocks, never increasing the inner potential.

    Returns ``(x_new, stationarity_residual)`` where the residual is the
    worst block's projected-gradient (or KKT) residual. Blocks are solved
    independently, in parallel when ``cfg.threads > 1``, whenever no row of
    A couples two blocks. A positive ``prox_weight`` adds the proximal term
    ``(w/2)||v - prox_center||^2`` to each block subproblem.
    """
    cfg = cfg or XSolverConfig()
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape != (problem.n1,):
        raise ShapeError(f"x has shape {x_prev.shape}, expected ({problem.n1},)")
    c = problem.B.matvec(xbar) + z
    if not problem.separable:
        return _solve_joint(problem, x_prev, c, y, rho, cfg, prox_weight, prox_center)

    x_new = np.empty_like(x_prev)
    results = [None] * len(problem.blocks)

    def work(i):
        return _solve_one_block(problem, i, x_prev[problem.block_slice(i)], c, y, rho, cfg,
                                prox_weight, prox_center)

    if cfg.threads > 1 and len(problem.blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for i, out in enumerate(pool.map(work, range(len(problem.blocks)))):
                results[i] = out
    else:
        for i in range(len(problem.blocks)):
            results[i] = work(i)
    residual = 0.0
    for i, (v, res) in enumerate(results):
        x_new[problem.block_slice(i)] = v
        residual = max(residual, res)
    return x_new, residual


def solve_xbar_block(problem: BlockProblem, x, z, y, rho, prox_weight=0.0, prox_center=None):
    """Closed-form global update: project the normal-equations solution.

    With disjoint column supports in B the quadratic is separable per global
    component, so clipping the unconstrained minimizer into the box is the
    exact constrained minimizer. A positive ``prox_weight`` adds
    ``(w/2)||xbar - prox_center||^2`` without breaking separability.
    """
    if problem.n2 == 0:
        return np.zeros(0)
    rhs = -problem.B.rmatvec(problem.A.matvec(x) + z + y / rho)
    w = prox_weight / rho
    if w > 0.0:
        rhs = rhs + w * prox_center
    if problem.btb_is_diagonal:
        return problem.global_set.project(rhs / (problem.btb_diag + w))
    dense_b = problem.B.to_dense()
    gram = dense_b.T @ dense_b + w * np.eye(problem.n2)
    if problem.global_set.kind == "whole":
        return np.linalg.solve(gram, rhs)
    return _box_qp(gram, rhs, problem.global_set)


def _box_qp(gram, rhs, box, sweeps=20000, tol=1e-12):
    """Cyclic coordinate descent for min 0.5 v'Gv - rhs'v over a box."""
    v = box.project(rhs / np.diag(gram))
    for _ in range(sweeps):
        delta = 0.0
        for j in range(v.size):
            vj = (rhs[j] - gram[j] @ v + gram[j, j] * v[j]) / gram[j, j]
            vj = min(max(vj, box.lower[j]), box.upper[j])
            delta = max(delta, abs(vj - v[j]))
            v[j] = vj
        if delta <= tol:
            break
    return v


def solve_z_block(lam, beta, x, xbar, y, rho, A, B):
    """Closed-form slack update; its first-order condition holds exactly."""
    if beta <= 0 or rho <= 0:
        raise ConfigError("penalty parameters must be positive")
    return -(lam + y + rho * (A.matvec(x) + B.matvec(xbar))) / (beta + rho)


def resolve_x_config(cfg: XSolverConfig | None, eps1: float) -> XSolverConfig:
    """Tie the x-block tolerance to the loop's dual tolerance."""
    base = cfg or XSolverConfig()
    return replace(base, stationarity_tol=min(base.stationarity_tol, eps1 / 10.0))
