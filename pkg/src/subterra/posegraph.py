"""2-D pose graph and its Gauss-Newton optimizer.

Nodes are keyframe poses, edges carry relative SE(2) measurements with
3x3 information matrices. Node 0 (the start keyframe) is gauged fixed.
The solver damps steps just enough to keep the total residual
non-increasing; a rank-deficient system returns the input unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, wrap_angle


@dataclass(frozen=True)
class GraphEdge:
    a: int
    b: int
    measurement: Pose2              # pose of b in a's frame
    information: np.ndarray         # (3, 3)


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)       # id -> Pose2
    edges: list = field(default_factory=list)       # list[GraphEdge]

    def add_node(self, node_id: int, pose: Pose2) -> None:
        self.nodes[node_id] = pose

    def add_edge(self, a: int, b: int, measurement: Pose2,
                 information: np.ndarray | None = None) -> None:
        if a not in self.nodes or b not in self.nodes:
            raise KeyError("edge endpoints must exist")
        info = np.eye(3) if information is None else np.asarray(information, dtype=float)
        self.edges.append(GraphEdge(a, b, measurement, info))

    def copy(self) -> "PoseGraph":
        return PoseGraph(dict(self.nodes), list(self.edges))

    def neighbors(self, node_id: int) -> list:
        out = set()
        for e in self.edges:
            if e.a == node_id:
                out.add(e.b)
            elif e.b == node_id:
                out.add(e.a)
        return sorted(out)

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        seen = set()
        stack = [next(iter(self.nodes))]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(m for m in self.neighbors(n) if m not in seen)
        return seen == set(self.nodes)


def edge_residual(nodes: dict, e: GraphEdge) -> np.ndarray:
    """Residual vee(Z^-1 (Xa^-1 Xb)) with wrapped angle."""
    xa, xb = nodes[e.a], nodes[e.b]
    pred = xa.inverse().compose(xb)
    err = e.measurement.inverse().compose(pred)
    return np.array([err.x, err.y, wrap_angle(err.theta)])


def total_residual(graph: PoseGraph) -> float:
    """Sum of Mahalanobis edge residuals."""
    tot = 0.0
    for e in graph.edges:
        r = edge_residual(graph.nodes, e)
        tot += float(r @ e.information @ r)
    return tot


def _edge_jacobians(nodes: dict, e: GraphEdge):
    """Jacobians of the residual wrt (x, y, theta) of nodes a and b."""
    xa, xb = nodes[e.a], nodes[e.b]
    ca, sa = math.cos(xa.theta), math.sin(xa.theta)
    dx, dy = xb.x - xa.x, xb.y - xa.y
    czi, szi = math.cos(e.measurement.theta), math.sin(e.measurement.theta)
    Rzi = np.array([[czi, szi], [-szi, czi]])           # R(z)^T
    Rai = np.array([[ca, sa], [-sa, ca]])               # R(a)^T
    dRai = np.array([[-sa, ca], [-ca, -sa]])            # d/dtheta_a of R(a)^T
    Ja = np.zeros((3, 3))
    Jb = np.zeros((3, 3))
    Ja[:2, :2] = -Rzi @ Rai
    Ja[:2, 2] = Rzi @ dRai @ np.array([dx, dy])
    Ja[2, 2] = -1.0
    Jb[:2, :2] = Rzi @ Rai
    Jb[2, 2] = 1.0
    return Ja, Jb


def residual_gradient(graph: PoseGraph) -> np.ndarray:
    """Gradient of total_residual wrt stacked free node parameters (node 0 fixed)."""
    ids = sorted(graph.nodes)
    index = {n: i for i, n in enumerate(ids)}
    g = np.zeros(3 * len(ids))
    for e in graph.edges:
        r = edge_residual(graph.nodes, e)
        Ja, Jb = _edge_jacobians(graph.nodes, e)
        g[3 * index[e.a]: 3 * index[e.a] + 3] += 2.0 * Ja.T @ e.information @ r
        g[3 * index[e.b]: 3 * index[e.b] + 3] += 2.0 * Jb.T @ e.information @ r
    if 0 in index:
        g[3 * index[0]: 3 * index[0] + 3] = 0.0
    return g


def optimize_graph(graph: PoseGraph, max_iterations: int = 50,
                   rel_tol: float = 1e-6) -> PoseGraph:
    """Gauss-Newton over node poses; returns a new graph with updated nodes.

    The input graph is returned unchanged if the normal equations are
    singular (under-constrained graph).
    """
    out = graph.copy()
    ids = sorted(out.nodes)
    if len(ids) <= 1 or not out.edges:
        return out
    index = {n: i for i, n in enumerate(ids)}
    n = len(ids)
    prev_cost = total_residual(out)
    lam = 0.0
    for _ in range(max_iterations):
        H = np.zeros((3 * n, 3 * n))
        b = np.zeros(3 * n)
        for e in out.edges:
            r = edge_residual(out.nodes, e)
            Ja, Jb = _edge_jacobians(out.nodes, e)
            ia, ib = 3 * index[e.a], 3 * index[e.b]
            H[ia:ia + 3, ia:ia + 3] += Ja.T @ e.information @ Ja
            H[ib:ib + 3, ib:ib + 3] += Jb.T @ e.information @ Jb
            H[ia:ia + 3, ib:ib + 3] += Ja.T @ e.information @ Jb
            H[ib:ib + 3, ia:ia + 3] += Jb.T @ e.information @ Ja
            b[ia:ia + 3] += Ja.T @ e.information @ r
            b[ib:ib + 3] += Jb.T @ e.information @ r
        # gauge: fix node 0
        i0 = 3 * index[0] if 0 in index else 0
        H[i0:i0 + 3, :] = 0.0
        H[:, i0:i0 + 3] = 0.0
        H[i0:i0 + 3, i0:i0 + 3] = np.eye(3)
        b[i0:i0 + 3] = 0.0

        accepted = False
        for _try in range(8):
            Hd = H + lam * np.eye(3 * n)
            try:
                delta = np.linalg.solve(Hd, -b)
            except np.linalg.LinAlgError:
                return graph
            if not np.all(np.isfinite(delta)):
                return graph
            trial = dict(out.nodes)
            for nid, i in index.items():
                p = trial[nid]
                trial[nid] = Pose2(p.x + delta[3 * i], p.y + delta[3 * i + 1],
                                   p.theta + delta[3 * i + 2])
            cost = total_residual(PoseGraph(trial, out.edges))
            if cost <= prev_cost + 1e-12:
                out.nodes = trial
                accepted = True
                lam = max(lam / 4.0, 0.0)
                break
            lam = 1e-6 if lam == 0.0 else lam * 10.0
        if not accepted:
            break
        if prev_cost - cost < rel_tol * max(prev_cost, 1e-12) or np.linalg.norm(delta) < 1e-10:
            prev_cost = cost
            break
        prev_cost = cost
    return out


def bfs_path(graph: PoseGraph, start: int, goal: int) -> list | None:
    """Breadth-first path over graph edges; None if disconnected."""
    from collections import deque

    if start == goal:
        return [start]
    adj = {n: graph.neighbors(n) for n in graph.nodes}
    prev = {start: None}
    q = deque([start])
    while q:
        n = q.popleft()
        for m in adj.get(n, []):
            if m in prev:
                continue
            prev[m] = n
            if m == goal:
                path = [m]
                while prev[path[-1]] is not None:
                    path.append(prev[path[-1]])
                return path[::-1]
            q.append(m)
    return None
