"""Keyframe pose graph with odometry/loop edges and a Levenberg-Marquardt solver.

Nodes are keyframes tagged by the estimator that produced them. Keyframes
emitted while dead reckoning carry no image data, so they can never be loop
closure endpoints and their odometry edges get a configurable down-weight.

The optimizer minimizes the usual sum of squared relative-pose residuals
``log(inv(z) o inv(T_i) o T_j)`` over 6-dof tangent vectors ``[rho, theta]``
with a right-multiplicative local update ``T <- T o Exp(delta)``. Jacobians
are analytic (inverse right Jacobian plus adjoint), the first node is held
fixed as the gauge by default, and damping follows Marquardt's diagonal
scaling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .geometry import (
    Pose,
    RigidTransform,
    compose,
    invert,
    relative,
    se3_adjoint,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
)

DEFAULT_VIO_EDGE_WEIGHT = 1.0
DEFAULT_PE_EDGE_WEIGHT = 0.01  # 100x variance inflation for dead-reckoned spans


class GraphError(ValueError):
    """Structural problem: unknown ids, non-monotone stamps, disconnection."""


class KeyframeSource(enum.Enum):
    VIO_KF = "vio"
    PE_KF = "pe"


class EdgeKind(enum.Enum):
    ODOMETRY = "odometry"
    LOOP = "loop"


@dataclass
class KeyframeNode:
    id: int
    timestamp: float
    pose: Pose
    source: KeyframeSource


@dataclass(frozen=True)
class GraphEdge:
    kind: EdgeKind
    from_id: int
    to_id: int
    relative: RigidTransform
    information: np.ndarray

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float).reshape(6, 6).copy()
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


@dataclass(frozen=True)
class LoopRejection:
    from_id: int
    to_id: int
    reason: str


@dataclass(frozen=True)
class OptimizeOptions:
    max_iters: int = 50
    rel_tol: float = 1e-9
    init_damping: float = 1e-4
    abs_cost_tol: float = 1e-18  # squared residual floor, ~1e-9 per axis


@dataclass(frozen=True)
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool


class PoseGraph:
    def __init__(
        self,
        vio_edge_weight: float = DEFAULT_VIO_EDGE_WEIGHT,
        pe_edge_weight: float = DEFAULT_PE_EDGE_WEIGHT,
    ):
        self.nodes: list[KeyframeNode] = []
        self.edges: list[GraphEdge] = []
        self.fixed: set[int] = set()
        self.rejected_loops: list[LoopRejection] = []
        self.vio_edge_weight = vio_edge_weight
        self.pe_edge_weight = pe_edge_weight
        # Rigid correction produced by the most recent optimize() for the
        # newest node; identity until an optimization has run.
        self.last_correction: RigidTransform = RigidTransform.identity()

    def odometry_information(self, a: KeyframeSource, b: KeyframeSource) -> np.ndarray:
        w = self.vio_edge_weight
        if KeyframeSource.PE_KF in (a, b):
            w = self.pe_edge_weight
        return np.eye(6) * w

    def add_keyframe(self, pose: Pose, timestamp: float, source: KeyframeSource) -> int:
        """Append a keyframe; chains an odometry edge from the previous node."""
        if self.nodes and timestamp <= self.nodes[-1].timestamp:
            raise GraphError(
                f"keyframe timestamp {timestamp} not after {self.nodes[-1].timestamp}"
            )
        node_id = len(self.nodes)
        node = KeyframeNode(node_id, timestamp, pose, source)
        self.nodes.append(node)
        if node_id == 0:
            self.fixed.add(0)
        else:
            prev = self.nodes[node_id - 1]
            rel = relative(prev.pose.to_transform(), pose.to_transform())
            self.edges.append(
                GraphEdge(
                    EdgeKind.ODOMETRY,
                    prev.id,
                    node_id,
                    rel,
                    self.odometry_information(prev.source, source),
                )
            )
        return node_id

    def add_loop_edge(
        self,
        from_id: int,
        to_id: int,
        rel: RigidTransform,
        information: np.ndarray | None = None,
    ) -> int | None:
        """Add a loop constraint; refused (returns None) on dead-reckoned nodes."""
        for nid in (from_id, to_id):
            if not 0 <= nid < len(self.nodes):
                raise GraphError(f"unknown node id {nid}")
        for nid in (from_id, to_id):
            if self.nodes[nid].source is KeyframeSource.PE_KF:
                self.rejected_loops.append(
                    LoopRejection(from_id, to_id, f"node {nid} has no keyframe image")
                )
                return None
        if information is None:
            information = np.eye(6) * self.vio_edge_weight
        self.edges.append(GraphEdge(EdgeKind.LOOP, from_id, to_id, rel, information))
        return len(self.edges) - 1

    def loop_edge_count(self) -> int:
        return sum(1 for e in self.edges if e.kind is EdgeKind.LOOP)


def edge_residual(edge: GraphEdge, pose_from: RigidTransform, pose_to: RigidTransform) -> np.ndarray:
    """6-vector tangent error of the measured relative pose, [rho, theta]."""
    err = compose(invert(edge.relative), relative(pose_from, pose_to))
    return se3_log(err)


def edge_jacobians(
    edge: GraphEdge, pose_from: RigidTransform, pose_to: RigidTransform
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(residual, d r / d delta_from, d r / d delta_to) for right updates."""
    r = edge_residual(edge, pose_from, pose_to)
    j_to = se3_right_jacobian_inv(r)
    j_from = -j_to @ se3_adjoint(relative(pose_to, pose_from))
    return r, j_from, j_to


def _check_information(edges: list[GraphEdge]) -> None:
    for k, e in enumerate(edges):
        info = e.information
        if not np.allclose(info, info.T, atol=1e-9):
            raise GraphError(f"edge {k} information matrix not symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise GraphError(f"edge {k} information matrix not positive definite")


def _check_connected(graph: PoseGraph) -> None:
    n = len(graph.nodes)
    if n == 0:
        raise GraphError("empty graph")
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for e in graph.edges:
        adj[e.from_id].append(e.to_id)
        adj[e.to_id].append(e.from_id)
    seen = set(graph.fixed)
    stack = list(graph.fixed)
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != n:
        raise GraphError(f"{n - len(seen)} nodes unreachable from the fixed set")


def _total_cost(edges: list[GraphEdge], poses: list[RigidTransform]) -> float:
    cost = 0.0
    for e in edges:
        r = edge_residual(e, poses[e.from_id], poses[e.to_id])
        cost += float(r @ e.information @ r)
    return cost


def optimize(graph: PoseGraph, opts: OptimizeOptions = OptimizeOptions()) -> OptimizeReport:
    """Levenberg-Marquardt over all non-fixed node poses, in place.

    Accepted steps never increase the cost. Terminates when the relative cost
    decrease drops below ``rel_tol``, the cost reaches ``abs_cost_tol``, the
    damping blows up, or ``max_iters`` is hit. Records the rigid correction of
    the newest node in ``graph.last_correction``.
    """
    if not graph.fixed:
        raise GraphError("fixed set must not be empty")
    _check_connected(graph)
    _check_information(graph.edges)

    poses = [n.pose.to_transform() for n in graph.nodes]
    pre_last = poses[-1]
    free_ids = [n.id for n in graph.nodes if n.id not in graph.fixed]
    col_of = {nid: 6 * k for k, nid in enumerate(free_ids)}
    dim = 6 * len(free_ids)

    initial_cost = _total_cost(graph.edges, poses)
    cost = initial_cost
    lam = opts.init_damping
    iters = 0
    converged = False

    if dim == 0 or not graph.edges or initial_cost <= opts.abs_cost_tol:
        graph.last_correction = RigidTransform.identity()
        return OptimizeReport(0, initial_cost, initial_cost, True)

    while iters < opts.max_iters:
        rows, cols, vals = [], [], []
        g = np.zeros(dim)

        def scatter(bi: int, bj: int, block: np.ndarray) -> None:
            r0, c0 = np.meshgrid(np.arange(6) + bi, np.arange(6) + bj, indexing="ij")
            rows.append(r0.ravel())
            cols.append(c0.ravel())
            vals.append(block.ravel())

        for e in graph.edges:
            r, j_from, j_to = edge_jacobians(e, poses[e.from_id], poses[e.to_id])
            w_from = e.from_id in col_of
            w_to = e.to_id in col_of
            omega = e.information
            if w_from:
                ci = col_of[e.from_id]
                scatter(ci, ci, j_from.T @ omega @ j_from)
                g[ci : ci + 6] += j_from.T @ omega @ r
            if w_to:
                cj = col_of[e.to_id]
                scatter(cj, cj, j_to.T @ omega @ j_to)
                g[cj : cj + 6] += j_to.T @ omega @ r
            if w_from and w_to:
                ci, cj = col_of[e.from_id], col_of[e.to_id]
                off = j_from.T @ omega @ j_to
                scatter(ci, cj, off)
                scatter(cj, ci, off.T)

        h = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dim, dim),
        ).tocsc()
        diag = h.diagonal()
        # Marquardt scaling; guard flat directions so the damped system stays SPD.
        diag = np.where(diag > 1e-12, diag, 1.0)

        stepped = False
        while lam <= 1e12:
            damped = h + scipy.sparse.diags(lam * diag)
            try:
                delta = scipy.sparse.linalg.spsolve(damped, -g)
            except RuntimeError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            trial = list(poses)
            for nid in free_ids:
                c = col_of[nid]
                trial[nid] = compose(poses[nid], se3_exp(delta[c : c + 6]))
            trial_cost = _total_cost(graph.edges, trial)
            if trial_cost < cost:
                poses = trial
                prev_cost = cost
                cost = trial_cost
                lam = max(lam * 0.1, 1e-12)
                stepped = True
                break
            lam *= 10.0

        iters += 1
        if not stepped:
            converged = True  # no descent direction left at any damping
            break
        if cost <= opts.abs_cost_tol:
            converged = True
            break
        if prev_cost > 0.0 and (prev_cost - cost) / prev_cost < opts.rel_tol:
            converged = True
            break

    for n, p in zip(graph.nodes, poses):
        n.pose = p.to_pose()
    graph.last_correction = compose(poses[-1], invert(pre_last))
    return OptimizeReport(iters, initial_cost, cost, converged)


def reanchor_after_optimize(graph: PoseGraph, switching_state):
    """Propagate the newest keyframe's optimization correction to the live estimate."""
    from .switching import apply_correction

    return apply_correction(switching_state, graph.last_correction)


# --- plain-text serialization (VERTEX_SE3:QUAT / EDGE_SE3:QUAT) ---------------


def save_g2o(graph: PoseGraph, path) -> None:
    """Write the graph in the common SE3 quaternion text format.

    Standard VERTEX/EDGE/FIX records; node timestamps and sources go into
    comment lines so our own loader can round-trip them (foreign tools skip
    comments).
    """
    lines = []
    for n in graph.nodes:
        lines.append(f"# NODE_META {n.id} {n.timestamp:.6f} {n.source.value}")
    for n in graph.nodes:
        p = n.pose.position
        w, x, y, z = n.pose.orientation
        lines.append(
            f"VERTEX_SE3:QUAT {n.id} "
            f"{p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}"
        )
    for nid in sorted(graph.fixed):
        lines.append(f"FIX {nid}")
    for e in graph.edges:
        pose = e.relative.to_pose()
        p = pose.position
        w, x, y, z = pose.orientation
        iu = e.information[np.triu_indices(6)]
        info_str = " ".join(f"{v:.9f}" for v in iu)
        lines.append(
            f"EDGE_SE3:QUAT {e.from_id} {e.to_id} "
            f"{p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f} {info_str}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_g2o(path) -> PoseGraph:
    graph = PoseGraph()
    meta: dict[int, tuple[float, KeyframeSource]] = {}
    vertices: dict[int, Pose] = {}
    fixed: set[int] = set()
    edges: list[tuple[str, int, int, RigidTransform, np.ndarray]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            parts = raw.split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "#":
                    if len(parts) >= 5 and parts[1] == "NODE_META":
                        meta[int(parts[2])] = (float(parts[3]), KeyframeSource(parts[4]))
                elif tag == "VERTEX_SE3:QUAT":
                    nid = int(parts[1])
                    tx, ty, tz, qx, qy, qz, qw = map(float, parts[2:9])
                    vertices[nid] = Pose(np.array([tx, ty, tz]), np.array([qw, qx, qy, qz]))
                elif tag == "FIX":
                    fixed.add(int(parts[1]))
                elif tag == "EDGE_SE3:QUAT":
                    a, b = int(parts[1]), int(parts[2])
                    tx, ty, tz, qx, qy, qz, qw = map(float, parts[3:10])
                    rel = Pose(np.array([tx, ty, tz]), np.array([qw, qx, qy, qz])).to_transform()
                    upper = np.array(list(map(float, parts[10:31])))
                    if len(upper) != 21:
                        raise ValueError(f"expected 21 information entries, got {len(upper)}")
                    info = np.zeros((6, 6))
                    info[np.triu_indices(6)] = upper
                    info = info + info.T - np.diag(np.diag(info))
                    edges.append(("edge", a, b, rel, info))
            except (ValueError, IndexError) as exc:
                raise GraphError(f"{path}:{lineno}: malformed record: {exc}") from exc
    for nid in sorted(vertices):
        t, source = meta.get(nid, (float(nid), KeyframeSource.VIO_KF))
        graph.nodes.append(KeyframeNode(nid, t, vertices[nid], source))
    graph.fixed = fixed if fixed else ({0} if graph.nodes else set())
    consecutive = {(n.id, m.id) for n, m in zip(graph.nodes, graph.nodes[1:])}
    for _, a, b, rel, info in edges:
        kind = EdgeKind.ODOMETRY if (a, b) in consecutive else EdgeKind.LOOP
        graph.edges.append(GraphEdge(kind, a, b, rel, info))
    return graph
