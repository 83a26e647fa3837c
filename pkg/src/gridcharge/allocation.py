"""Power-allocation problems on a validated distribution tree.

Builds the max-flow and proportional-fairness instances over the squared
voltage variables (one W_ii per node, one W_ij per edge, both endpoints of
an edge coupled by a rotated second-order cone) plus one power variable per
occupied node, recovers voltages and per-vehicle powers from a solved
instance, and certifies rank-1 exactness and proportional fairness.

Subtrees that hang off the live part of the network (no vehicle anywhere
below) carry no flow at any optimum; their voltage equals the voltage at
the attachment point.  They are therefore excluded from the solved problem
and reinstated afterwards with exactly those values.  This keeps the
optimum unchanged, removes the flat directions an interior-point method
would otherwise spread across (breaking rank-1 exactness on dead edges),
and shrinks the common lightly-loaded instances dramatically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import conic
from .netmodel import RootedTree, SubtreeIndex

__all__ = [
    "Occupancy",
    "AllocationProblem",
    "AllocationResult",
    "ExactnessCertificate",
    "AllocationError",
    "EmptyOccupancyError",
    "InexactRelaxationError",
    "build_maxflow",
    "build_propfair",
    "subtree_expressions",
    "recover",
    "certify_exactness",
    "certify_proportional_fairness",
    "solve_allocation",
]

EXACTNESS_TOL = 1e-6


class AllocationError(RuntimeError):
    pass


class EmptyOccupancyError(AllocationError):
    """Raised when a problem is requested with no vehicle in the network."""


class InexactRelaxationError(AllocationError):
    """Raised when the rank-1 certificate fails even after a tight re-solve."""

    def __init__(self, message: str, certificate: "ExactnessCertificate", dump_path=None):
        super().__init__(message)
        self.certificate = certificate
        self.dump_path = dump_path


@dataclass(frozen=True)
class Occupancy:
    """Vehicle counts per node; nodes without vehicles are absent."""

    counts: Mapping  # node -> positive vehicle count

    def __post_init__(self):
        clean = {int(n): int(w) for n, w in self.counts.items() if w}
        for n, w in clean.items():
            if w < 0:
                raise ValueError(f"negative vehicle count {w} at node {n}")
        object.__setattr__(self, "counts", clean)

    @classmethod
    def from_nodes(cls, nodes: Iterable[int]) -> "Occupancy":
        counts: dict = {}
        for n in nodes:
            counts[n] = counts.get(n, 0) + 1
        return cls(counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def occupied_nodes(self) -> tuple:
        return tuple(sorted(self.counts))

    def validate_against(self, tree: RootedTree) -> None:
        for n in self.counts:
            if n not in tree.nodes:
                raise ValueError(f"occupied node {n} not in network")
            if n == tree.root:
                raise ValueError("vehicles cannot charge at the feeder node")

    def key(self) -> tuple:
        """Hashable canonical form, e.g. for memoization in audits."""
        return tuple(sorted(self.counts.items()))


@dataclass(frozen=True)
class ExactnessCertificate:
    """Per-edge rank-1 gaps W_ii*W_jj - W_ij^2, relative to W_ii*W_jj."""

    gaps: Mapping            # (u, v) -> relative gap
    max_relative_gap: float
    passed: bool
    tolerance: float = EXACTNESS_TOL

    @classmethod
    def from_w_entries(cls, w_edges: Mapping, tol: float = EXACTNESS_TOL) -> "ExactnessCertificate":
        gaps = {}
        worst = 0.0
        for edge, (wuu, wvv, wuv) in w_edges.items():
            denom = wuu * wvv
            gap = (denom - wuv * wuv) / denom if denom > 0 else math.inf
            gaps[edge] = gap
            worst = max(worst, abs(gap))
        return cls(gaps=gaps, max_relative_gap=worst, passed=worst <= tol, tolerance=tol)


@dataclass
class AllocationProblem:
    """An assembled conic instance plus the layout needed to read it back."""

    conic: conic.ConicProblem
    tree: RootedTree
    index: SubtreeIndex
    occupancy: Occupancy
    alpha: float
    v_nominal: float
    algorithm: str               # "mf" | "pf"
    active_nodes: tuple          # tree order, root first
    active_edges: tuple          # (parent, child) in tree order
    w_index: Mapping             # node -> variable index (W_ii)
    edge_index: Mapping          # (u, v) -> variable index (W_ij)
    p_index: Mapping             # occupied node -> variable index (P_i)
    warm_start: np.ndarray = field(repr=False, default=None)


@dataclass
class AllocationResult:
    algorithm: str
    occupancy: Occupancy
    alpha: float
    v_nominal: float
    objective: float
    node_power: Mapping          # node -> P_i (0.0 where unoccupied), root absent
    vehicle_power: Mapping       # occupied node -> P_i / w_i
    voltage: Mapping             # node -> V_i, all nodes
    w_edges: Mapping             # (u, v) -> (W_uu, W_vv, W_uv), all edges
    subtree_flow: Mapping        # (u, v) -> (P_subtree(v), Q_subtree(v))
    edge_loss: Mapping           # (u, v) -> (P_loss, Q_loss)
    root_injection: float
    total_loss: float
    certificate: ExactnessCertificate | None = None
    solver: conic.Solution | None = field(repr=False, default=None)
    retried: bool = False

    @property
    def aggregate_power(self) -> float:
        return sum(self.node_power.values())


def _loss_coefficients(edge) -> tuple:
    denom = edge.resistance**2 + edge.reactance**2
    return edge.resistance / denom, edge.reactance / denom


def _flow_expressions(tree, index, edge, occupied, allowed_edges=None):
    """Linear expressions for the active/reactive power drawn by the subtree
    under `edge`, as {key: coeff} with keys ('p', i), ('w', i), ('wij', u, v)."""
    child = edge[1] if isinstance(edge, tuple) else edge.to_node
    p_expr: dict = {}
    q_expr: dict = {}
    for i in index.nodes[child]:
        if occupied is None or i in occupied:
            if i != tree.root:
                p_expr[("p", i)] = p_expr.get(("p", i), 0.0) + 1.0
    for (u, v) in index.edges[child]:
        if allowed_edges is not None and (u, v) not in allowed_edges:
            continue
        spec = tree.edge(u, v)
        k_r, k_x = _loss_coefficients(spec)
        for key, coeff in ((("w", u), 1.0), (("wij", u, v), -2.0), (("w", v), 1.0)):
            p_expr[key] = p_expr.get(key, 0.0) + coeff * k_r
            q_expr[key] = q_expr.get(key, 0.0) + coeff * k_x
    return p_expr, q_expr


def subtree_expressions(tree: RootedTree, index: SubtreeIndex, edge, occupied=None):
    """Public form of the subtree power expressions for edge (i, j).

    `occupied` limits the load terms to the given nodes; by default every
    non-root node contributes a load symbol.
    """
    return _flow_expressions(tree, index, edge, occupied, allowed_edges=None)


def _active_parts(tree: RootedTree, index: SubtreeIndex, occ: Occupancy):
    """Nodes and edges on or above a path from the root to some vehicle."""
    active = {tree.root}
    for node in occ.counts:
        active.update(tree.path_to_root(node))
    active_nodes = tuple(n for n in tree.order if n in active)
    active_edges = tuple(
        (e.from_node, e.to_node) for e in tree.edges
        if e.from_node in active and e.to_node in active
    )
    return active_nodes, active_edges


def _build(tree, index, occ, alpha, v_nominal, algorithm, pin_root):
    if not isinstance(occ, Occupancy):
        occ = Occupancy(occ)
    occ.validate_against(tree)
    if occ.total == 0:
        raise EmptyOccupancyError("no vehicles to allocate power to")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if v_nominal is None:
        v_nominal = tree.nominal_voltage

    active_nodes, active_edges = _active_parts(tree, index, occ)
    occupied = occ.occupied_nodes
    active_edge_set = set(active_edges)

    w_index = {n: i for i, n in enumerate(active_nodes)}
    base = len(active_nodes)
    edge_index = {e: base + i for i, e in enumerate(active_edges)}
    base += len(active_edges)
    p_index = {n: base + i for i, n in enumerate(occupied)}
    n_var = base + len(occupied)

    w_min = ((1.0 - alpha) * v_nominal) ** 2
    w_max = ((1.0 + alpha) * v_nominal) ** 2
    lower = np.full(n_var, -np.inf)
    upper = np.full(n_var, np.inf)
    for n in active_nodes:
        lower[w_index[n]] = w_min
        upper[w_index[n]] = w_max
    for n in occupied:
        lower[p_index[n]] = 0.0

    def var_of(key):
        kind = key[0]
        if kind == "w":
            return w_index[key[1]]
        if kind == "wij":
            return edge_index[(key[1], key[2])]
        return p_index[key[1]]

    rows = len(active_edges) + (1 if pin_root else 0)
    A = np.zeros((rows, n_var))
    b = np.zeros(rows)
    for r, (u, v) in enumerate(active_edges):
        spec = tree.edge(u, v)
        A[r, edge_index[(u, v)]] += 1.0
        A[r, w_index[v]] -= 1.0
        p_expr, q_expr = _flow_expressions(
            tree, index, (u, v), set(occupied), allowed_edges=active_edge_set
        )
        for key, coeff in p_expr.items():
            A[r, var_of(key)] -= coeff * spec.resistance
        for key, coeff in q_expr.items():
            A[r, var_of(key)] -= coeff * spec.reactance
    if pin_root:
        A[-1, w_index[tree.root]] = 1.0
        b[-1] = v_nominal**2

    cones = tuple((w_index[u], w_index[v], edge_index[(u, v)]) for (u, v) in active_edges)

    c = np.zeros(n_var)
    log_terms: tuple = ()
    if algorithm == "mf":
        for n in occupied:
            c[p_index[n]] = 1.0
    else:
        log_terms = tuple((p_index[n], float(occ.counts[n])) for n in occupied)

    names = tuple(
        [f"W[{n}]" for n in active_nodes]
        + [f"W[{u},{v}]" for (u, v) in active_edges]
        + [f"P[{n}]" for n in occupied]
    )

    warm = np.zeros(n_var)
    v2 = v_nominal**2
    for n in active_nodes:
        warm[w_index[n]] = v2
    for e in active_edges:
        warm[edge_index[e]] = v2 * (1.0 - 1e-3)
    for n in occupied:
        warm[p_index[n]] = 1e-3 * v2

    problem = conic.ConicProblem(
        c=c, A=A, b=b, lower=lower, upper=upper,
        log_terms=log_terms, cones=cones, names=names,
    )
    return AllocationProblem(
        conic=problem,
        tree=tree,
        index=index,
        occupancy=occ,
        alpha=alpha,
        v_nominal=v_nominal,
        algorithm=algorithm,
        active_nodes=active_nodes,
        active_edges=active_edges,
        w_index=w_index,
        edge_index=edge_index,
        p_index=p_index,
        warm_start=warm,
    )


def build_maxflow(tree, index, occ, alpha=0.1, v_nominal=None, pin_root=False) -> AllocationProblem:
    """Maximize the aggregate vehicle power (vehicles aggregated per node)."""
    return _build(tree, index, occ, alpha, v_nominal, "mf", pin_root)


def build_propfair(tree, index, occ, alpha=0.1, v_nominal=None, pin_root=False) -> AllocationProblem:
    """Maximize sum of w_i * log(P_i) over occupied nodes.

    Per-vehicle log-utilities aggregate to this node form; the constant
    -sum w_i log w_i is dropped, so reported objective values differ from
    the per-vehicle sum by exactly that constant.
    """
    return _build(tree, index, occ, alpha, v_nominal, "pf", pin_root)


def certify_exactness(solution, problem: AllocationProblem | None = None,
                      tol: float = EXACTNESS_TOL) -> ExactnessCertificate:
    """Rank-1 certificate; accepts a solved conic Solution plus its
    AllocationProblem, or an AllocationResult."""
    if isinstance(solution, AllocationResult):
        return ExactnessCertificate.from_w_entries(solution.w_edges, tol)
    if problem is None:
        raise TypeError("problem layout required to certify a raw Solution")
    x = solution.x
    w_edges = {
        (u, v): (x[problem.w_index[u]], x[problem.w_index[v]], x[problem.edge_index[(u, v)]])
        for (u, v) in problem.active_edges
    }
    return ExactnessCertificate.from_w_entries(w_edges, tol)


def recover(solution: conic.Solution, problem: AllocationProblem,
            tol: float = EXACTNESS_TOL) -> AllocationResult:
    """Voltages, per-vehicle powers, flows, and losses from a solved instance.

    Validates the result: voltages in band, per-edge voltage-drop residuals,
    and (when the relaxation is exact) the outer-product consistency of the
    off-diagonal entries.  Raises AllocationError on violations.
    """
    if solution.status != "optimal":
        raise AllocationError(f"cannot recover from status {solution.status!r}")
    tree, occ = problem.tree, problem.occupancy
    x = solution.x
    scale = max(1.0, problem.v_nominal**2)

    active = set(problem.active_nodes)
    voltage: dict = {}
    w_diag: dict = {}
    for n in tree.order:
        if n in active:
            w_diag[n] = float(x[problem.w_index[n]])
        else:
            w_diag[n] = w_diag[tree.parent[n]]  # zero-flow branch: parent value
        voltage[n] = math.sqrt(w_diag[n])

    w_edges: dict = {}
    for e in tree.edges:
        key = (e.from_node, e.to_node)
        if key in problem.edge_index:
            w_edges[key] = (w_diag[key[0]], w_diag[key[1]], float(x[problem.edge_index[key]]))
        else:
            w_edges[key] = (w_diag[key[0]], w_diag[key[1]], w_diag[key[1]])

    node_power = {n: 0.0 for n in tree.order if n != tree.root}
    for n in occ.counts:
        node_power[n] = float(x[problem.p_index[n]])
    vehicle_power = {n: node_power[n] / occ.counts[n] for n in occ.counts}

    # flows and losses, leaves upward
    edge_loss: dict = {}
    subtree_flow: dict = {}
    p_below: dict = {n: 0.0 for n in tree.order}
    q_below: dict = {n: 0.0 for n in tree.order}
    for n in reversed(tree.order):
        p_sub = node_power.get(n, 0.0) + p_below[n]
        q_sub = q_below[n]
        if n != tree.root:
            parent = tree.parent[n]
            key = (parent, n)
            subtree_flow[key] = (p_sub, q_sub)
            wuu, wvv, wuv = w_edges[key]
            drop = wuu - 2.0 * wuv + wvv
            k_r, k_x = _loss_coefficients(tree.edge(parent, n))
            ploss, qloss = drop * k_r, drop * k_x
            edge_loss[key] = (ploss, qloss)
            p_below[parent] += p_sub + ploss
            q_below[parent] += q_sub + qloss
    total_loss = sum(l for l, _ in edge_loss.values())
    root_injection = p_below[tree.root]

    # validation
    w_lo = ((1.0 - problem.alpha) * problem.v_nominal) ** 2
    w_hi = ((1.0 + problem.alpha) * problem.v_nominal) ** 2
    band_tol = tol * scale
    for n, w in w_diag.items():
        if w < w_lo - band_tol or w > w_hi + band_tol:
            raise AllocationError(f"voltage at node {n} outside the band: W={w}")
    for key, (p_sub, q_sub) in subtree_flow.items():
        e = tree.edge(*key)
        vi, vj = voltage[key[0]], voltage[key[1]]
        residual = vi * vj - vj * vj - p_sub * e.resistance - q_sub * e.reactance
        if abs(residual) > tol * scale:
            raise AllocationError(
                f"voltage-drop residual {residual:.3e} on edge {key} exceeds {tol:g}"
            )
        wuv = w_edges[key][2]
        if abs(vi * vj - wuv) > tol * scale:
            raise AllocationError(
                f"outer-product consistency |V_i V_j - W_ij| = {abs(vi*vj - wuv):.3e} "
                f"on edge {key} exceeds {tol:g}"
            )
    if total_loss < -tol * scale:
        raise AllocationError(f"negative total loss {total_loss:.3e}")

    objective = float(solution.objective)
    return AllocationResult(
        algorithm=problem.algorithm,
        occupancy=occ,
        alpha=problem.alpha,
        v_nominal=problem.v_nominal,
        objective=objective,
        node_power=node_power,
        vehicle_power=vehicle_power,
        voltage=voltage,
        w_edges=w_edges,
        subtree_flow=subtree_flow,
        edge_loss=edge_loss,
        root_injection=root_injection,
        total_loss=total_loss,
        solver=solution,
    )


def certify_proportional_fairness(pf: AllocationResult, alt: AllocationResult,
                                  tol: float = 1e-6) -> bool:
    """True iff the aggregate proportional change from pf to alt is <= tol.

    Per-vehicle terms aggregate per node: sum_l dP_l/P_l^PF equals
    sum_i w_i (P_i^alt - P_i^PF) / P_i^PF.
    """
    if pf.occupancy.key() != alt.occupancy.key():
        raise ValueError("allocations cover different occupancies")
    total = 0.0
    for n, w in pf.occupancy.counts.items():
        p_pf = pf.node_power[n]
        if p_pf <= 0:
            raise ZeroDivisionError(
                f"proportional-fairness allocation has P=0 at node {n}"
            )
        total += w * (alt.node_power[n] - p_pf) / p_pf
    return total <= tol


def solve_allocation(tree, index, occ, algorithm, alpha=0.1, v_nominal=None,
                     config: conic.SolverConfig | None = None, pin_root=False,
                     dump_path=None) -> AllocationResult:
    """Build, solve, certify, and recover one allocation.

    On a certificate failure the instance is re-solved once at tolerance
    1e-10 before giving up; failures raise InexactRelaxationError with a
    problem dump when a dump path is given.
    """
    builder = build_maxflow if algorithm == "mf" else build_propfair
    problem = builder(tree, index, occ, alpha=alpha, v_nominal=v_nominal, pin_root=pin_root)
    if config is None:
        config = conic.SolverConfig(max_iterations=400)
    solution = conic.solve(problem.conic, config, x0=problem.warm_start)
    if solution.status != "optimal":
        raise AllocationError(
            f"solver returned {solution.status}: {solution.message} "
            f"(occupancy {problem.occupancy.key()})"
        )
    certificate = certify_exactness(solution, problem)
    retried = False
    if not certificate.passed:
        tight = conic.SolverConfig(
            tolerance=1e-10,
            max_iterations=max(config.max_iterations, 400),
            barrier_reduction=config.barrier_reduction,
            presolve=config.presolve,
        )
        retry = conic.solve(problem.conic, tight, x0=problem.warm_start)
        if retry.status == "optimal":
            solution = retry
            certificate = certify_exactness(solution, problem)
        retried = True
    if not certificate.passed:
        path = None
        if dump_path is not None:
            path = dump_path
            conic.dump_problem(problem.conic, path)
        raise InexactRelaxationError(
            f"rank-1 certificate failed (max relative gap "
            f"{certificate.max_relative_gap:.3e}, retried={retried})",
            certificate,
            dump_path=path,
        )
    result = recover(solution, problem)
    result.certificate = certificate
    result.retried = retried
    return result
