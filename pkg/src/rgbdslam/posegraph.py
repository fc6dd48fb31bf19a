"""Keyframe pose graph with log-map residuals and Levenberg-Marquardt.

An edge ``(i, j, Z)`` measures ``Z ~ X_i^-1 X_j`` for camera-to-world
keyframe poses ``X``; its residual is ``log(Z X_j^-1 X_i)``, zero when the
nodes agree with the measurement.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .se3 import Pose, exp_se3, log_so3


class PoseGraphError(ValueError):
    """Disconnected graph, unknown node or singular system."""


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    kind: str = "odometry"


@dataclass
class PoseGraph:
    nodes: dict[int, Pose] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    fixed: int | None = None

    def add_node(self, node_id: int, pose: Pose) -> None:
        if self.fixed is None:
            self.fixed = node_id
        self.nodes[node_id] = pose

    def add_edge(self, i: int, j: int, measurement: Pose, kind: str = "odometry", information: np.ndarray | None = None) -> None:
        if i not in self.nodes or j not in self.nodes:
            raise PoseGraphError(f"edge ({i}, {j}) references an unknown node")
        info = np.eye(6) if information is None else np.asarray(information, dtype=np.float64)
        if not np.allclose(info, info.T) or np.linalg.eigvalsh(info).min() < -1e-12:
            raise PoseGraphError("information matrix must be symmetric positive semi-definite")
        self.edges.append(Edge(i, j, measurement, info, kind))

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        adj: dict[int, list[int]] = {k: [] for k in self.nodes}
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        start = next(iter(self.nodes))
        seen, todo = {start}, deque([start])
        while todo:
            for m in adj[todo.popleft()]:
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        return len(seen) == len(self.nodes)

    def residual(self, e: Edge, nodes: dict[int, Pose] | None = None) -> np.ndarray:
        nodes = self.nodes if nodes is None else nodes
        return log_so3(e.measurement.compose(nodes[e.j].inverse()).compose(nodes[e.i]))

    def cost(self, nodes: dict[int, Pose] | None = None) -> float:
        total = 0.0
        for e in self.edges:
            r = self.residual(e, nodes)
            total += float(r @ e.information @ r)
        return total


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    costs: list[float]


def _retract(nodes: dict[int, Pose], order: list[int], dx: np.ndarray) -> dict[int, Pose]:
    out = dict(nodes)
    for k, nid in enumerate(order):
        out[nid] = nodes[nid].compose(exp_se3(dx[6 * k:6 * k + 6]))
    return out


def optimize_pose_graph(graph: PoseGraph, max_iterations: int = 50, min_decrease: float = 1e-9,
                        step: float = 1e-6, initial_damping: float = 1e-4) -> OptimizationReport:
    """Minimize the summed squared log residuals; updates ``graph.nodes`` in place.

    Nodes move by right perturbations ``X <- X exp(dx)``; edge Jacobians are
    central differences.  The fixed node is never touched.  A damped step is
    accepted only if it lowers the cost, so the cost is non-increasing.
    """
    if not graph.is_connected():
        raise PoseGraphError("pose graph is not connected")
    order = [n for n in sorted(graph.nodes) if n != graph.fixed]
    index = {n: k for k, n in enumerate(order)}
    nodes = dict(graph.nodes)
    cost = graph.cost(nodes)
    report = OptimizationReport(cost, cost, 0, [cost])
    if not order or not graph.edges:
        return report
    dim = 6 * len(order)
    mu = initial_damping
    for it in range(1, max_iterations + 1):
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        for e in graph.edges:
            r = graph.residual(e, nodes)
            blocks = []
            for nid in (e.i, e.j):
                if nid not in index:
                    continue
                J = np.zeros((6, 6))
                for c in range(6):
                    d = np.zeros(6)
                    d[c] = step
                    plus, minus = dict(nodes), dict(nodes)
                    plus[nid] = nodes[nid].compose(exp_se3(d))
                    minus[nid] = nodes[nid].compose(exp_se3(-d))
                    J[:, c] = (graph.residual(e, plus) - graph.residual(e, minus)) / (2 * step)
                blocks.append((index[nid], J))
            for ka, Ja in blocks:
                g[6 * ka:6 * ka + 6] += Ja.T @ e.information @ r
                for kb, Jb in blocks:
                    H[6 * ka:6 * ka + 6, 6 * kb:6 * kb + 6] += Ja.T @ e.information @ Jb
        improved = False
        for _ in range(10):
            A = H + mu * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                dx = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError as exc:
                raise PoseGraphError("singular pose-graph system after damping") from exc
            cand = _retract(nodes, order, dx)
            new_cost = graph.cost(cand)
            if new_cost < cost:
                improved = True
                break
            mu *= 10.0
        report.iterations = it
        if not improved:
            break
        decrease = cost - new_cost
        nodes, cost = cand, new_cost
        mu = max(mu / 10.0, 1e-12)
        report.costs.append(cost)
        if decrease < min_decrease:
            break
    graph.nodes = nodes
    report.final_cost = cost
    return report


def _pose_fields(p: Pose) -> str:
    q = Rotation.from_matrix(p.R).as_quat()
    return " ".join(f"{v:.9g}" for v in (*p.t, *q))


def write_g2o(path: str | Path, graph: PoseGraph) -> None:
    """Dump nodes and edges as VERTEX_SE3:QUAT / EDGE_SE3:QUAT lines."""
    lines = []
    for nid in sorted(graph.nodes):
        lines.append(f"VERTEX_SE3:QUAT {nid} {_pose_fields(graph.nodes[nid])}")
    if graph.fixed is not None:
        lines.append(f"FIX {graph.fixed}")
    iu = np.triu_indices(6)
    for e in graph.edges:
        info = " ".join(f"{v:.9g}" for v in e.information[iu])
        lines.append(f"EDGE_SE3:QUAT {e.i} {e.j} {_pose_fields(e.measurement)} {info}")
    Path(path).write_text("\n".join(lines) + "\n")
