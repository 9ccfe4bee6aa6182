"""Block-structured problem model and the consensus-matrix builder.

A problem couples per-agent variable blocks ``x = [x_1, ..., x_N]`` and a
global vector ``xbar`` through ``A x + B xbar = 0``. Each block carries its
own smooth objective oracle and a constraint-set oracle; the global set is a
simple convex set (whole space or a box).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OracleError, ShapeError
from .linalg import SparseMatrix

INSTANCE_SCHEMA_VERSION = 1

# generator-family factories keyed by tag, populated by the benchmarks module
FAMILY_REGISTRY: dict = {}


def register_family(tag, factory):
    FAMILY_REGISTRY[tag] = factory


class Projection:
    """Constraint set given by an exact Euclidean projection map.

    The map must be idempotent; ties (e.g. projecting the center of a
    sphere) must be broken deterministically.
    """

    def __init__(self, project, describe="projection"):
        self._project = project
        self.describe = describe

    def project(self, v):
        return np.asarray(self._project(np.asarray(v, dtype=np.float64)), dtype=np.float64)

    def violation(self, v):
        return float(np.linalg.norm(v - self.project(v)))


class EqualityManifold:
    """Constraint set {v : h(v) = 0} with an explicit Jacobian oracle.

    ``func(v)`` returns ``(h, J)`` with ``h`` of length p and ``J`` of shape
    (p, n). Used for sets without a cheap projection.
    """

    def __init__(self, func, n_eq, describe="manifold"):
        self._func = func
        self.n_eq = int(n_eq)
        self.describe = describe

    def evaluate(self, v):
        h, jac = self._func(np.asarray(v, dtype=np.float64))
        h = np.atleast_1d(np.asarray(h, dtype=np.float64))
        jac = np.asarray(jac, dtype=np.float64)
        if h.shape[0] != self.n_eq or jac.shape != (self.n_eq, v.shape[0]):
            raise ShapeError("manifold oracle returned inconsistent shapes")
        return h, jac

    def violation(self, v):
        h, _ = self.evaluate(v)
        return float(np.linalg.norm(h))


@dataclass
class BlockSpec:
    """One agent's variable block: dimension, smooth objective, constraint set."""

    dim: int
    objective: object  # callable v -> (value, gradient)
    set_oracle: object  # Projection or EqualityManifold
    name: str = ""

    def evaluate(self, v, block_id=None):
        try:
            val, grad = self.objective(v)
        except OracleError:
            raise
        except Exception as exc:  # noqa: BLE001 - oracle failures carry the block id
            raise OracleError(str(exc), block=block_id) from exc
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != (self.dim,):
            raise OracleError(f"gradient shape {grad.shape} != ({self.dim},)", block=block_id)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            raise OracleError("objective oracle returned non-finite values", block=block_id)
        return float(val), grad


class GlobalSet:
    """Convex set for the global vector: whole space or a compact box."""

    def __init__(self, dim, lower=None, upper=None):
        self.dim = int(dim)
        if lower is None and upper is None:
            self.kind = "whole"
            self.lower = self.upper = None
        else:
            self.kind = "box"
            self.lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (self.dim,)).copy()
            self.upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (self.dim,)).copy()
            if np.any(self.lower > self.upper):
                raise ConfigError("box lower bound exceeds upper bound")

    @classmethod
    def whole(cls, dim):
        return cls(dim)

    @classmethod
    def box(cls, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        return cls(lower.shape[0], lower, upper)

    def project(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "whole":
            return v
        return np.clip(v, self.lower, self.upper)

    def __repr__(self):
        return f"GlobalSet({self.kind}, dim={self.dim})"


@dataclass
class ResidualReport:
    """Norms of the stationarity and coupling residuals at a solution."""

    d1_norm: float
    d2_norm: float
    d3_norm: float
    primal_gap: float  # ||A x + B xbar||
    z_norm: float

    def as_dict(self):
        return {"d1": self.d1_norm, "d2": self.d2_norm, "d3": self.d3_norm,
                "primal_gap": self.primal_gap, "z_norm": self.z_norm}


class BlockProblem:
    """Immutable block problem with coupling ``A x + B xbar = 0``.

    Structural facts computed once at construction: block offsets, the
    diagonal of B^T B (the closed-form global update requires every global
    component to appear in at least one coupling row), and the row-to-block
    map of A that decides whether blocks can be solved independently.
    """

    def __init__(self, blocks, global_set, A, B, initial_x=None, initial_xbar=None,
                 meta=None, consensus=False):
        self.blocks = list(blocks)
        self.global_set = global_set
        self.A = A
        self.B = B
        self.meta = dict(meta or {})
        self.consensus = bool(consensus)

        dims = np.array([b.dim for b in self.blocks], dtype=np.int64)
        self.n1 = int(dims.sum())
        self.n2 = global_set.dim
        self.m = A.rows
        if A.cols != self.n1:
            raise ShapeError(f"A has {A.cols} columns, blocks sum to {self.n1}")
        if B.cols != self.n2:
            raise ShapeError(f"B has {B.cols} columns, global set has dim {self.n2}")
        if B.rows != self.m:
            raise ShapeError(f"A has {A.rows} rows but B has {B.rows}")
        self.block_offsets = np.concatenate([[0], np.cumsum(dims)])

        self.btb_diag = B.col_sqnorms()
        if self.n2 and np.any(self.btb_diag == 0.0):
            bad = int(np.argmin(self.btb_diag))
            raise ShapeError(f"column {bad} of B is identically zero")
        # True when B^T B is diagonal, which consensus construction guarantees.
        self.btb_is_diagonal = self._check_btb_diagonal()

        self._analyze_rows()

        self.initial_x = None if initial_x is None else np.asarray(initial_x, dtype=np.float64).copy()
        self.initial_xbar = None if initial_xbar is None else np.asarray(initial_xbar, dtype=np.float64).copy()
        if self.initial_x is not None and self.initial_x.shape != (self.n1,):
            raise ShapeError("initial_x has wrong length")
        if self.initial_xbar is not None and self.initial_xbar.shape != (self.n2,):
            raise ShapeError("initial_xbar has wrong length")

    def _check_btb_diagonal(self):
        if self.n2 == 0 or self.B.nnz == 0:
            return True
        # Columns with disjoint row support give a diagonal Gram matrix.
        order = np.argsort(self.B.row, kind="stable")
        rows = self.B.row[order]
        cols = self.B.col[order]
        same_row = rows[1:] == rows[:-1]
        return not np.any(same_row & (cols[1:] != cols[:-1]))

    def _analyze_rows(self):
        col_block = np.searchsorted(self.block_offsets, self.A.col, side="right") - 1
        row_blocks = [set() for _ in range(self.m)]
        for r, b in zip(self.A.row, col_block):
            row_blocks[r].add(int(b))
        self.separable = all(len(s) <= 1 for s in row_blocks)
        self.block_rows = []
        self.block_A = []
        for i in range(len(self.blocks)):
            rows = np.array(sorted(r for r in range(self.m) if i in row_blocks[r]), dtype=np.int64)
            self.block_rows.append(rows)
            mask = col_block == i
            row_map = np.full(self.m, -1, dtype=np.int64)
            row_map[rows] = np.arange(rows.size)
            sub = SparseMatrix(
                rows.size,
                self.blocks[i].dim,
                row_map[self.A.row[mask]],
                self.A.col[mask] - self.block_offsets[i],
                self.A.data[mask],
            )
            self.block_A.append(sub)

    def block_slice(self, i):
        return slice(int(self.block_offsets[i]), int(self.block_offsets[i + 1]))

    def split(self, x):
        return [x[self.block_slice(i)] for i in range(len(self.blocks))]

    def feasibility_error(self, x):
        """Worst constraint-set violation over blocks (projection distance or ||h||)."""
        worst = 0.0
        for i, blk in enumerate(self.blocks):
            worst = max(worst, blk.set_oracle.violation(x[self.block_slice(i)]))
        return worst


def objective(problem: BlockProblem, x) -> float:
    """Sum of block objectives at the block-partitioned point ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.n1,):
        raise ShapeError(f"x has shape {x.shape}, expected ({problem.n1},)")
    total = 0.0
    for i, blk in enumerate(problem.blocks):
        val, _ = blk.evaluate(x[problem.block_slice(i)], block_id=i)
        total += val
    return total


def gradient(problem: BlockProblem, x):
    """Block-wise assembled gradient of :func:`objective`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.n1,):
        raise ShapeError(f"x has shape {x.shape}, expected ({problem.n1},)")
    out = np.empty(problem.n1)
    for i, blk in enumerate(problem.blocks):
        _, g = blk.evaluate(x[problem.block_slice(i)], block_id=i)
        out[problem.block_slice(i)] = g
    return out


def primal_residual(problem: BlockProblem, x, xbar, z):
    """Coupling residual ``A x + B xbar + z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (problem.m,):
        raise ShapeError(f"z has shape {z.shape}, expected ({problem.m},)")
    return problem.A.matvec(x) + problem.B.matvec(xbar) + z


def check_gradient(problem: BlockProblem, x, h=1e-6, rtol=1e-5):
    """Compare the assembled gradient against central finite differences.

    Returns the worst relative error; raises OracleError above ``rtol``.
    """
    x = np.asarray(x, dtype=np.float64)
    g = gradient(problem, x)
    worst = 0.0
    scale = max(1.0, float(np.linalg.norm(g)))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fd = (objective(problem, x + e) - objective(problem, x - e)) / (2 * h)
        worst = max(worst, abs(fd - g[j]) / scale)
    if worst > rtol:
        raise OracleError(f"gradient check failed: relative error {worst:.3e} > {rtol:.1e}")
    return worst


# ---------------------------------------------------------------------------
# consensus construction


@dataclass
class ConsensusBuild:
    """Index maps produced by :func:`build_consensus`."""

    A: SparseMatrix
    B: SparseMatrix
    n1: int
    n2: int
    agents: list
    agent_offsets: dict  # agent -> (start, dim) in x
    original_index: dict  # node -> start of the original slot in x
    copy_index: dict  # (agent, node) -> start of the copy slot in x
    global_index: dict = field(default_factory=dict)  # node -> start in xbar


def consensus_ties(n1, n2, ties):
    """Rows from (x position, xbar position) scalar tie pairs.

    Each row reads ``x[i] - xbar[j] = 0``: A carries one +1, B one -1. An x
    position may appear in at most one tie, which is what certifies that any
    value of ``B xbar`` can be matched by some ``A x``.
    """
    ties = list(ties)
    m = len(ties)
    x_idx = np.array([t[0] for t in ties], dtype=np.int64)
    g_idx = np.array([t[1] for t in ties], dtype=np.int64)
    if m and np.unique(x_idx).size != m:
        raise ConfigError("an x position is tied to more than one global component")
    rows = np.arange(m, dtype=np.int64)
    A = SparseMatrix(m, n1, rows, x_idx, np.ones(m))
    B = SparseMatrix(m, n2, rows, g_idx, -np.ones(m))
    if n2:
        counts = np.zeros(n2)
        np.add.at(counts, g_idx, 1.0)
        if np.any(counts == 0):
            raise ConfigError("a global component appears in no consensus row")
    return A, B


def build_consensus(node_dims, partition, couplings):
    """Consensus matrices for a node duplication plan.

    Parameters
    ----------
    node_dims : dict
        node -> dimension of its variable.
    partition : dict
        node -> owning agent; every node appears exactly once.
    couplings : list of (agent, node)
        Agent holds a local copy of a foreign node's variable. Each coupled
        node gets one global copy; its original slot and every copy slot are
        tied to it, one row per scalar component.
    """
    nodes = sorted(node_dims)
    if set(partition) != set(nodes):
        raise ConfigError("partition must assign exactly the declared nodes")
    agents = sorted(set(partition.values()))
    couplings = list(couplings)
    seen = set()
    for agent, node in couplings:
        if node not in node_dims:
            raise ConfigError(f"coupling references undeclared node {node!r}")
        if agent not in agents:
            raise ConfigError(f"coupling references unknown agent {agent!r}")
        if partition[node] == agent:
            raise ConfigError(f"agent {agent!r} cannot hold a copy of its own node {node!r}")
        if (agent, node) in seen:
            raise ConfigError(f"duplicate coupling {(agent, node)!r}")
        seen.add((agent, node))

    original_index, copy_index, agent_offsets = {}, {}, {}
    pos = 0
    for agent in agents:
        start = pos
        for node in nodes:
            if partition[node] == agent:
                original_index[node] = pos
                pos += node_dims[node]
        for cagent, node in sorted(couplings, key=lambda c: (str(c[0]), str(c[1]))):
            if cagent == agent:
                copy_index[(agent, node)] = pos
                pos += node_dims[node]
        agent_offsets[agent] = (start, pos - start)
    n1 = pos

    coupled = sorted({node for _, node in couplings})
    global_index = {}
    pos = 0
    for node in coupled:
        global_index[node] = pos
        pos += node_dims[node]
    n2 = pos

    ties = []
    for node in coupled:
        g = global_index[node]
        d = node_dims[node]
        ties.extend((original_index[node] + j, g + j) for j in range(d))
        for agent in agents:
            if (agent, node) in copy_index:
                c = copy_index[(agent, node)]
                ties.extend((c + j, g + j) for j in range(d))
    A, B = consensus_ties(n1, n2, ties)
    return ConsensusBuild(A, B, n1, n2, agents, agent_offsets, original_index,
                          copy_index, global_index)


# ---------------------------------------------------------------------------
# instance files


def _matrix_to_json(M: SparseMatrix):
    return {
        "rows": M.rows,
        "cols": M.cols,
        "triplets": [[int(r), int(c), float(v)] for r, c, v in zip(M.row, M.col, M.data)],
    }


def instance_document(problem: BlockProblem) -> dict:
    """Declarative JSON-compatible description of a generated instance."""
    if "family" not in problem.meta:
        raise ConfigError("only generator-produced instances can be serialized")
    return {
        "schema_version": INSTANCE_SCHEMA_VERSION,
        "family": problem.meta["family"],
        "params": problem.meta.get("params", {}),
        "blocks": [
            {"dim": b.dim, "set": b.set_oracle.describe, "name": b.name}
            for b in problem.blocks
        ],
        "global_set": {
            "kind": problem.global_set.kind,
            "dim": problem.global_set.dim,
            "lower": None if problem.global_set.lower is None else problem.global_set.lower.tolist(),
            "upper": None if problem.global_set.upper is None else problem.global_set.upper.tolist(),
        },
        "A": _matrix_to_json(problem.A),
        "B": _matrix_to_json(problem.B),
    }


def instance_hash(doc: dict) -> str:
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def save_instance(problem: BlockProblem, path):
    doc = instance_document(problem)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_instance(path) -> BlockProblem:
    """Rebuild a problem from an instance file via its generator family.

    The oracles are reconstructed by the registered family factory from the
    stored parameters; the stored matrices and dimensions must match the
    rebuilt ones exactly, which certifies a lossless round-trip.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != INSTANCE_SCHEMA_VERSION:
        raise ConfigError(f"unsupported instance schema: {doc.get('schema_version')!r}")
    family = doc.get("family")
    if family not in FAMILY_REGISTRY:
        raise ConfigError(f"unknown generator family {family!r}")
    problem = FAMILY_REGISTRY[family](**doc.get("params", {}))
    rebuilt = instance_document(problem)
    if instance_hash(rebuilt) != instance_hash(doc):
        raise ConfigError("instance file does not match its regenerated problem")
    return problem
