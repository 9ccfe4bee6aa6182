"""Benchmark problem generators and the centralized reference solve.

Families
--------
``sphere``      repulsive points on the unit sphere, split across 3 agents
``netflow``     nonconvex network flow with duplicated boundary potentials
``infeasible``  unit sphere tied to a disjoint box; no feasible point exists
``random_consensus``  small random instances for invariant sweeps

Generators are pure functions of their parameters and seed; every instance
records them in ``meta`` so instance files round-trip.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, OracleError
from .linalg import SparseMatrix
from .problem import (BlockProblem, BlockSpec, EqualityManifold, GlobalSet,
                      Projection, build_consensus, consensus_ties, register_family)

_DIST_GUARD = 1e-8


# ---------------------------------------------------------------------------
# sphere family


def _unit_rows(v):
    pts = v.reshape(-1, 3)
    norms = np.sqrt(np.einsum("ij,ij->i", pts, pts))
    zero = norms == 0.0  # canonical tie-break at the center
    out = pts / np.where(zero, 1.0, norms)[:, None]
    out[zero] = (1.0, 0.0, 0.0)
    return out.reshape(-1)


def _coulomb(points_flat, ia, ib):
    """Value and gradient of the sum of inverse pairwise distances."""
    v = points_flat.reshape(-1, 3)
    d = v[ia] - v[ib]
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    if r.size and r.min() < _DIST_GUARD:
        k = int(np.argmin(r))
        raise OracleError(
            f"points {ia[k]} and {ib[k]} nearly coincide (distance {r.min():.2e})")
    g = -d / (r**3)[:, None]
    grad = np.zeros_like(v)
    np.add.at(grad, ia, g)
    np.add.at(grad, ib, -g)
    return float(np.sum(1.0 / r)), grad.reshape(-1)


def _spread_unit_points(n, rng, min_dist=0.1, tries=200):
    pts = np.empty((n, 3))
    for i in range(n):
        for _ in range(tries):
            cand = rng.standard_normal(3)
            cand /= np.linalg.norm(cand)
            if all(np.linalg.norm(cand - pts[j]) >= min_dist for j in range(i)):
                pts[i] = cand
                break
        else:
            raise ConfigError(f"could not place {n} points {min_dist} apart")
    return pts


def gen_sphere(n_points, seed=0, n_blocks=3) -> BlockProblem:
    """Repulsion of ``n_points`` unit vectors, split over ``n_blocks`` agents.

    Cross-agent pair terms are owned by the lower-indexed agent, which keeps
    a local copy of each foreign point it needs; the copies, their originals
    and one global copy per duplicated point are tied by consensus rows.
    """
    if n_points < 2:
        raise ConfigError("need at least two points")
    rng = np.random.default_rng(seed)
    pts = _spread_unit_points(n_points, rng)
    n_blocks = min(n_blocks, n_points)  # every agent owns at least one point
    partition = {p: p % n_blocks for p in range(n_points)}

    owner = {}
    for i in range(n_points):
        for j in range(i + 1, n_points):
            owner[(i, j)] = min(partition[i], partition[j])
    couplings = sorted({(owner[(i, j)], q) for (i, j) in owner
                        for q in (i, j) if partition[q] != owner[(i, j)]})

    build = build_consensus({p: 3 for p in range(n_points)}, partition, couplings)

    blocks = []
    for b in range(n_blocks):
        start, dim = build.agent_offsets[b]

        def local(p, b=b, start=start):
            pos = (build.original_index[p] if partition[p] == b
                   else build.copy_index[(b, p)])
            return (pos - start) // 3

        terms = [(local(i), local(j)) for (i, j), w in sorted(owner.items()) if w == b]
        ia = np.array([t[0] for t in terms], dtype=np.int64)
        ib = np.array([t[1] for t in terms], dtype=np.int64)
        blocks.append(BlockSpec(
            dim=dim,
            objective=(lambda v, ia=ia, ib=ib: _coulomb(v, ia, ib)),
            set_oracle=Projection(_unit_rows, describe="unit_spheres"),
            name=f"agent{b}",
        ))

    x0 = np.empty(build.n1)
    for p in range(n_points):
        x0[build.original_index[p]:build.original_index[p] + 3] = pts[p]
    for (b, p), pos in build.copy_index.items():
        x0[pos:pos + 3] = pts[p]
    xbar0 = np.empty(build.n2)
    for p, pos in build.global_index.items():
        xbar0[pos:pos + 3] = pts[p]

    gset = GlobalSet.box(-np.ones(build.n2), np.ones(build.n2))
    return BlockProblem(
        blocks, gset, build.A, build.B, initial_x=x0, initial_xbar=xbar0,
        consensus=True,
        meta={"family": "sphere",
              "params": {"n_points": n_points, "seed": seed, "n_blocks": n_blocks}},
    )


# ---------------------------------------------------------------------------
# infeasible family


def gen_infeasible(n, seed=0) -> BlockProblem:
    """One unit-sphere block tied to the box [2,3]^n; certifiably infeasible."""
    if n < 1:
        raise ConfigError("need dimension >= 1")
    rng = np.random.default_rng(seed)

    def project_sphere(v):
        r = np.linalg.norm(v)
        if r == 0.0:
            e = np.zeros_like(v)
            e[0] = 1.0
            return e
        return v / r

    def zero_obj(v):
        return 0.0, np.zeros_like(v)

    block = BlockSpec(dim=n, objective=zero_obj,
                      set_oracle=Projection(project_sphere, describe="unit_sphere"))
    A = SparseMatrix.identity(n)
    B = SparseMatrix.identity(n).scale(-1.0)
    gset = GlobalSet.box(np.full(n, 2.0), np.full(n, 3.0))
    x0 = project_sphere(rng.standard_normal(n))
    xbar0 = gset.project(x0)
    return BlockProblem([block], gset, A, B, initial_x=x0, initial_xbar=xbar0,
                        meta={"family": "infeasible", "params": {"n": n, "seed": seed}})


# ---------------------------------------------------------------------------
# network flow family


def _sample_graph(n_nodes, edge_density, rng):
    edges = [(int(rng.integers(0, k)), k) for k in range(1, n_nodes)]
    rest = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)
            if (i, j) not in set(edges)]
    extra = int(round(edge_density * len(rest)))
    if extra:
        take = rng.choice(len(rest), size=extra, replace=False)
        edges.extend(rest[t] for t in sorted(take))
    return sorted(edges)


def gen_netflow(n_nodes, edge_density=0.3, regions=2, seed=0,
                bound_lo=0.5, bound_hi=1.5, demand_scale=1.0) -> BlockProblem:
    """Nonconvex network flow split into region blocks.

    Per node: production p_i and potential x_i; per directed pair (i,j):
    flow variables (x_ij, y_ij) tied to the potentials by
    ``x_ij^2 + y_ij^2 = x_i x_j``. Cross-region edges duplicate both endpoint
    potentials; nodal bounds enter as squared-slack equalities. A feasible
    point is constructed during generation and stored as the initial point.
    """
    if n_nodes < 2 or regions < 2:
        raise ConfigError("need at least 2 nodes and 2 regions")
    rng = np.random.default_rng(seed)
    edges = _sample_graph(n_nodes, edge_density, rng)

    neighbors = {i: [] for i in range(n_nodes)}
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    deg = {i: len(neighbors[i]) for i in range(n_nodes)}
    if min(deg.values()) == 0:
        raise ConfigError("sampled graph is not connected")

    region_of = {i: min(i * regions // n_nodes, regions - 1) for i in range(n_nodes)}
    a = {i: rng.uniform(0.5, 2.0) for i in range(n_nodes)}
    w_cost = {i: rng.uniform(0.5, 1.5) for i in range(n_nodes)}
    dirpairs = sorted([(i, j) for i, j in edges] + [(j, i) for i, j in edges])
    b_par = {e: rng.uniform(-1.0, 1.0) for e in dirpairs}
    c_par = {e: rng.uniform(-1.0, 1.0) for e in dirpairs}
    demand = {i: demand_scale * rng.uniform(0.0, 1.0) for i in range(n_nodes)}

    # constructed feasible point
    x_true = {i: rng.uniform(max(bound_lo, 0.9), min(bound_hi, 1.1))
              if bound_lo <= 0.9 <= bound_hi else rng.uniform(bound_lo, bound_hi)
              for i in range(n_nodes)}
    theta = {e: rng.uniform(0.0, 2 * np.pi) for e in dirpairs}
    flow_true = {}
    for (i, j) in dirpairs:
        radius = np.sqrt(x_true[i] * x_true[j])
        flow_true[(i, j)] = (radius * np.cos(theta[(i, j)]), radius * np.sin(theta[(i, j)]))

    def p_flow(i, j, xi, xij, yij):
        return (a[i] / deg[i]) * xi + b_par[(i, j)] * xij + c_par[(i, j)] * yij

    blocks = []
    x0_parts = []
    region_nodes = [sorted(i for i in range(n_nodes) if region_of[i] == r)
                    for r in range(regions)]
    cross_edges = [(i, j) for i, j in edges if region_of[i] != region_of[j]]
    coupled = sorted({n for e in cross_edges for n in e})
    # position trackers for the consensus ties
    x_pos_global = {}
    copy_pos_global = {}
    offset = 0

    for r in range(regions):
        nodes = region_nodes[r]
        if not nodes:
            raise ConfigError("a region received no nodes; reduce regions")
        pairs = [(i, j) for (i, j) in dirpairs if region_of[i] == r]
        foreign = sorted({j for (i, j) in pairs if region_of[j] != r})
        pos = {}
        at = 0
        for i in nodes:
            pos[("p", i)] = at
            pos[("x", i)] = at + 1
            at += 2
        for e in pairs:
            pos[("xf", e)] = at
            pos[("yf", e)] = at + 1
            at += 2
        for j in foreign:
            pos[("c", j)] = at
            at += 1
        for i in nodes:
            pos[("slo", i)] = at
            pos[("shi", i)] = at + 1
            at += 2
        dim = at

        for i in nodes:
            x_pos_global[i] = offset + pos[("x", i)]
        for j in foreign:
            copy_pos_global[(r, j)] = offset + pos[("c", j)]

        n_eq = len(nodes) + len(pairs) + 2 * len(nodes)

        def h_fn(v, nodes=nodes, pairs=pairs, pos=pos, r=r):
            h = np.empty(len(nodes) + len(pairs) + 2 * len(nodes))
            jac = np.zeros((h.size, v.size))
            row = 0
            for i in nodes:
                acc = v[pos[("p", i)]] - demand[i]
                jac[row, pos[("p", i)]] = 1.0
                for j in neighbors[i]:
                    e = (i, j)
                    acc -= p_flow(i, j, v[pos[("x", i)]], v[pos[("xf", e)]], v[pos[("yf", e)]])
                    jac[row, pos[("x", i)]] -= a[i] / deg[i]
                    jac[row, pos[("xf", e)]] -= b_par[e]
                    jac[row, pos[("yf", e)]] -= c_par[e]
                h[row] = acc
                row += 1
            for (i, j) in pairs:
                xi = v[pos[("x", i)]]
                xj = v[pos[("x", j)]] if region_of[j] == r else v[pos[("c", j)]]
                jx = pos[("x", j)] if region_of[j] == r else pos[("c", j)]
                xf, yf = v[pos[("xf", (i, j))]], v[pos[("yf", (i, j))]]
                h[row] = xf**2 + yf**2 - xi * xj
                jac[row, pos[("xf", (i, j))]] = 2 * xf
                jac[row, pos[("yf", (i, j))]] = 2 * yf
                jac[row, pos[("x", i)]] += -xj
                jac[row, jx] += -xi
                row += 1
            for i in nodes:
                xi = v[pos[("x", i)]]
                slo, shi = v[pos[("slo", i)]], v[pos[("shi", i)]]
                h[row] = xi - bound_lo - slo**2
                jac[row, pos[("x", i)]] = 1.0
                jac[row, pos[("slo", i)]] = -2 * slo
                row += 1
                h[row] = bound_hi - xi - shi**2
                jac[row, pos[("x", i)]] = -1.0
                jac[row, pos[("shi", i)]] = -2 * shi
                row += 1
            return h, jac

        def obj_fn(v, nodes=nodes, pos=pos):
            val = 0.0
            grad = np.zeros_like(v)
            for i in nodes:
                p = v[pos[("p", i)]]
                val += w_cost[i] * p * p
                grad[pos[("p", i)]] = 2 * w_cost[i] * p
            return val, grad

        blocks.append(BlockSpec(dim=dim, objective=obj_fn,
                                set_oracle=EqualityManifold(h_fn, n_eq, describe="netflow"),
                                name=f"region{r}"))

        v0 = np.zeros(dim)
        for i in nodes:
            p_i = demand[i] + sum(p_flow(i, j, x_true[i], *flow_true[(i, j)])
                                  for j in neighbors[i])
            v0[pos[("p", i)]] = p_i
            v0[pos[("x", i)]] = x_true[i]
            v0[pos[("slo", i)]] = np.sqrt(max(x_true[i] - bound_lo, 0.0))
            v0[pos[("shi", i)]] = np.sqrt(max(bound_hi - x_true[i], 0.0))
        for e in pairs:
            v0[pos[("xf", e)]], v0[pos[("yf", e)]] = flow_true[e]
        for j in foreign:
            v0[pos[("c", j)]] = x_true[j]
        x0_parts.append(v0)
        offset += dim

    n1 = offset
    g_index = {n: k for k, n in enumerate(coupled)}
    ties = []
    for n in coupled:
        ties.append((x_pos_global[n], g_index[n]))
        for r in range(regions):
            if (r, n) in copy_pos_global:
                ties.append((copy_pos_global[(r, n)], g_index[n]))
    A, B = consensus_ties(n1, len(coupled), ties)

    gset = GlobalSet.box(np.full(len(coupled), bound_lo), np.full(len(coupled), bound_hi))
    x0 = np.concatenate(x0_parts) if x0_parts else np.zeros(0)
    xbar0 = np.array([x_true[n] for n in coupled])

    problem = BlockProblem(
        blocks, gset, A, B, initial_x=x0, initial_xbar=xbar0, consensus=True,
        meta={"family": "netflow",
              "params": {"n_nodes": n_nodes, "edge_density": edge_density,
                         "regions": regions, "seed": seed, "bound_lo": bound_lo,
                         "bound_hi": bound_hi, "demand_scale": demand_scale}},
    )
    err = problem.feasibility_error(x0)
    if err > 1e-9:
        raise ConfigError(f"constructed point violates constraints by {err:.2e}")
    return problem


# ---------------------------------------------------------------------------
# random consensus instances (invariant sweeps)


def random_consensus(seed=0, n_blocks=None, max_dim=6) -> BlockProblem:
    """Small random consensus instance: quadratic blocks, box or sphere sets."""
    rng = np.random.default_rng(seed)
    if n_blocks is None:
        n_blocks = int(rng.integers(2, 5))
    dims = [int(rng.integers(2, max_dim + 1)) for _ in range(n_blocks)]
    partition = {i: i for i in range(n_blocks)}
    couplings = set()
    for i in range(n_blocks):
        others = [j for j in range(n_blocks) if j != i]
        take = rng.choice(others, size=int(rng.integers(1, len(others) + 1)), replace=False)
        couplings.update((i, int(j)) for j in take)
    build = build_consensus({i: dims[i] for i in range(n_blocks)}, partition,
                            sorted(couplings))

    blocks = []
    x0 = np.empty(build.n1)
    for b in range(n_blocks):
        start, dim = build.agent_offsets[b]
        q = rng.standard_normal((dim, dim))
        Q = 0.5 * (q + q.T)
        lin = rng.standard_normal(dim)

        def quad(v, Q=Q, lin=lin):
            return 0.5 * float(v @ Q @ v) + float(lin @ v), Q @ v + lin

        if rng.random() < 0.5:
            lo, hi = -np.ones(dim) * 2, np.ones(dim) * 2
            oracle = Projection(lambda v, lo=lo, hi=hi: np.clip(v, lo, hi), describe="box")
            v0 = oracle.project(rng.standard_normal(dim))
        else:
            # sphere on the node's own variable, box on its foreign copies
            own = dims[b]

            def sphere_box(v, own=own):
                out = np.clip(v, -2.0, 2.0)
                r = np.linalg.norm(v[:own])
                if r == 0.0:
                    out[:own] = 0.0
                    out[0] = 1.0
                else:
                    out[:own] = v[:own] / r
                return out

            oracle = Projection(sphere_box, describe="sphere_box")
            v0 = sphere_box(rng.standard_normal(dim))
        blocks.append(BlockSpec(dim=dim, objective=quad, set_oracle=oracle))
        x0[start:start + dim] = v0

    # copies start at their original's value so the initial point is consensual
    for (agent, node), pos in build.copy_index.items():
        orig = build.original_index[node]
        x0[pos:pos + dims[node]] = x0[orig:orig + dims[node]]
    xbar0 = np.empty(build.n2)
    for node, pos in build.global_index.items():
        orig = build.original_index[node]
        xbar0[pos:pos + dims[node]] = x0[orig:orig + dims[node]]

    gset = GlobalSet.box(-2 * np.ones(build.n2), 2 * np.ones(build.n2))
    return BlockProblem(blocks, gset, build.A, build.B, initial_x=x0,
                        initial_xbar=xbar0, consensus=True,
                        meta={"family": "random_consensus",
                              "params": {"seed": seed, "n_blocks": n_blocks,
                                         "max_dim": max_dim}})


# ---------------------------------------------------------------------------
# centralized reference solve


def _tied_groups(problem: BlockProblem):
    """Map each x position to its global component, from the coupling rows."""
    tied = np.full(problem.n1, -1, dtype=np.int64)
    A, B = problem.A, problem.B
    col_of_row = {}
    for r, c in zip(B.row, B.col):
        col_of_row[r] = c
    for r, c in zip(A.row, A.col):
        if r in col_of_row:
            tied[c] = col_of_row[r]
    return tied


def solve_centralized(problem: BlockProblem, starts=5, seed=0, max_iters=4000,
                      tol=1e-9, feas_tol=1e-6):
    """Single-block local reference solve with multi-start.

    Consensus ties are eliminated exactly (tied positions share one
    variable), then the same first-order machinery runs on the reduced
    space: projected gradient when every block has a projection oracle, a
    quadratic-penalty loop over the stacked equality constraints otherwise.
    Returns ``(objective, x_full)`` of the best start; raises when no start
    reaches consensus feasibility, so an infeasible instance never yields a
    feasible claim.
    """
    from .subsolvers import XSolverConfig, _penalty_loop, _projected_gradient

    tied = _tied_groups(problem)
    free = np.where(tied < 0)[0]
    free_pos = {int(p): k for k, p in enumerate(free)}
    n_red = problem.n2 + free.size

    def expand(v):
        x = np.empty(problem.n1)
        for p in range(problem.n1):
            x[p] = v[tied[p]] if tied[p] >= 0 else v[problem.n2 + free_pos[p]]
        return x

    def collapse(x):
        v = np.zeros(n_red)
        counts = np.zeros(problem.n2)
        for p in range(problem.n1):
            if tied[p] >= 0:
                v[tied[p]] += x[p]
                counts[tied[p]] += 1
            else:
                v[problem.n2 + free_pos[p]] = x[p]
        v[:problem.n2] /= np.maximum(counts, 1.0)
        return v

    def value_and_grad(v):
        x = expand(v)
        val = 0.0
        gx = np.empty(problem.n1)
        for i, blk in enumerate(problem.blocks):
            bval, bgrad = blk.evaluate(x[problem.block_slice(i)], block_id=i)
            val += bval
            gx[problem.block_slice(i)] = bgrad
        return val, collapse_grad(gx)

    def collapse_grad(gx):
        g = np.zeros(n_red)
        for p in range(problem.n1):
            if tied[p] >= 0:
                g[tied[p]] += gx[p]
            else:
                g[problem.n2 + free_pos[p]] = gx[p]
        return g

    all_projection = all(isinstance(b.set_oracle, Projection) for b in problem.blocks)

    def project(v):
        x = expand(v)
        for i, blk in enumerate(problem.blocks):
            sl = problem.block_slice(i)
            x[sl] = blk.set_oracle.project(x[sl])
        out = collapse(x)
        if problem.n2:
            out[:problem.n2] = problem.global_set.project(out[:problem.n2])
        return out

    def joint_manifold():
        manifolds = [(i, b.set_oracle) for i, b in enumerate(problem.blocks)
                     if isinstance(b.set_oracle, EqualityManifold)]
        n_eq = sum(o.n_eq for _, o in manifolds)

        def h_fn(v):
            x = expand(v)
            h = np.empty(n_eq)
            jac_x = np.zeros((n_eq, problem.n1))
            at = 0
            for i, oracle in manifolds:
                sl = problem.block_slice(i)
                hi, ji = oracle.evaluate(x[sl])
                h[at:at + oracle.n_eq] = hi
                jac_x[at:at + oracle.n_eq, sl] = ji
                at += oracle.n_eq
            jac = np.zeros((n_eq, n_red))
            for p in range(problem.n1):
                col = tied[p] if tied[p] >= 0 else problem.n2 + free_pos[p]
                jac[:, col] += jac_x[:, p]
            return h, jac

        return EqualityManifold(h_fn, n_eq, describe="centralized")

    rng = np.random.default_rng(seed)
    if problem.initial_x is None:
        raise ConfigError("problem carries no initial point")
    cfg = XSolverConfig(max_steps=max_iters, stationarity_tol=tol,
                        penalty_mu=10.0, penalty_mu_max=1e9)
    best = None
    for s in range(starts):
        x_start = problem.initial_x.copy()
        if s > 0:
            x_start = x_start + rng.standard_normal(problem.n1)
        v = collapse(x_start)
        if all_projection:
            v = project(v)
            v, _, _ = _projected_gradient(value_and_grad, project, v, cfg)
        else:
            v, _ = _penalty_loop(value_and_grad, joint_manifold(), v, cfg)
        x_full = expand(v)
        err = problem.feasibility_error(x_full)
        if problem.n2:
            xbar = v[:problem.n2]
            err = max(err, float(np.linalg.norm(xbar - problem.global_set.project(xbar))))
        if err <= feas_tol:
            val = value_and_grad(v)[0]
            if best is None or val < best[0]:
                best = (val, x_full)
    if best is None:
        raise OracleError("no centralized start reached feasibility")
    return best


register_family("sphere", gen_sphere)
register_family("netflow", gen_netflow)
register_family("infeasible", gen_infeasible)
register_family("random_consensus", random_consensus)
