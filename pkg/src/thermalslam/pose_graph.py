"""SE(3) pose graph: construction, residuals, optimization, g2o-style I/O.

Nodes hold global poses (world <- frame); edges hold measured relative poses
with 6x6 information weights. Optimization is dense Levenberg-Marquardt over
left-multiplicative node twists with one node held fixed to remove the gauge
freedom. Desk-scale graphs only: the normal equations are solved densely.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InputError
from .geometry import PoseSE3, se3_exp, se3_log

_JAC_STEP = 1e-6
_DAMPING_MAX = 1e14


@dataclass
class PoseNode:
    id: int
    global_pose: PoseSE3


@dataclass
class GraphEdge:
    from_id: int
    to_id: int
    relative: PoseSE3  # measured T mapping to-frame points into from-frame
    information: np.ndarray
    kind: str = "odometry"  # "odometry" or "loop"

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("information must be 6x6")
        if not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information must be symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (info + info.T))
        if eigs.min() < -1e-9:
            raise ValueError("information must be positive semi-definite")
        self.information = info


@dataclass
class PoseGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    fixed_id: int = 0

    @staticmethod
    def with_root(pose=None):
        """Graph seeded with node 0 (identity unless given)."""
        g = PoseGraph()
        g.nodes.append(PoseNode(0, pose.copy() if pose else PoseSE3.identity()))
        return g


@dataclass
class OptimizeReport:
    initial_chi2: float
    final_chi2: float
    iterations: int
    converged: bool


def append_odometry(graph, relative, information=None, kind="odometry"):
    """Chain a new node: global = previous global composed with relative."""
    if not graph.nodes:
        raise ValueError("graph must be seeded with a root node")
    if information is None:
        information = np.eye(6)
    prev = graph.nodes[-1]
    node_id = len(graph.nodes)
    graph.nodes.append(PoseNode(node_id, prev.global_pose.compose(relative)))
    graph.edges.append(
        GraphEdge(prev.id, node_id, relative.copy(), information, kind)
    )
    return node_id


def add_loop_edge(graph, from_id, to_id, relative, information=None):
    if information is None:
        information = 10.0 * np.eye(6)
    graph.edges.append(GraphEdge(from_id, to_id, relative.copy(), information, "loop"))


def edge_residual(edge, poses):
    """se(3) residual log(rel^-1 * (T_from^-1 * T_to)); zero iff consistent."""
    t_from = poses[edge.from_id]
    t_to = poses[edge.to_id]
    return se3_log(edge.relative.inverse().compose(t_from.inverse().compose(t_to)))


def _check_connected(graph):
    n = len(graph.nodes)
    adj = [[] for _ in range(n)]
    for e in graph.edges:
        adj[e.from_id].append(e.to_id)
        adj[e.to_id].append(e.from_id)
    seen = np.zeros(n, dtype=bool)
    stack = [graph.fixed_id]
    seen[graph.fixed_id] = True
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if not seen[nxt]:
                seen[nxt] = True
                stack.append(nxt)
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise ValueError(
            f"graph is disconnected: node {missing} unreachable from the fixed node"
        )


def _edge_terms(edge, poses, huber_delta):
    r = edge_residual(edge, poses)
    info = edge.information
    s = float(r @ info @ r)
    if huber_delta is None or s <= huber_delta * huber_delta:
        return r, 1.0, s
    norm = np.sqrt(s)
    # robustified cost 2*delta*|r| - delta^2, IRLS weight delta/|r|
    return r, huber_delta / norm, 2.0 * huber_delta * norm - huber_delta * huber_delta


def _chi2(graph, poses, huber_delta):
    return sum(_edge_terms(e, poses, huber_delta)[2] for e in graph.edges)


def _edge_jacobians(edge, poses):
    """Central-difference Jacobians of the residual w.r.t. both node twists."""
    base_from = poses[edge.from_id]
    base_to = poses[edge.to_id]
    jf = np.zeros((6, 6))
    jt = np.zeros((6, 6))
    local = dict(poses)
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = _JAC_STEP
        plus = se3_exp(xi)
        minus = se3_exp(-xi)
        local[edge.from_id] = plus.compose(base_from)
        rp = edge_residual(edge, local)
        local[edge.from_id] = minus.compose(base_from)
        rm = edge_residual(edge, local)
        jf[:, k] = (rp - rm) / (2.0 * _JAC_STEP)
        local[edge.from_id] = base_from
        local[edge.to_id] = plus.compose(base_to)
        rp = edge_residual(edge, local)
        local[edge.to_id] = minus.compose(base_to)
        rm = edge_residual(edge, local)
        jt[:, k] = (rp - rm) / (2.0 * _JAC_STEP)
        local[edge.to_id] = base_to
    return jf, jt


def optimize(graph, max_iterations=100, tol=1e-9, huber_delta=None):
    """Levenberg-Marquardt over all node twists except the fixed node.

    Accepted steps strictly decrease chi2 = sum r^T * information * r;
    terminates when the step norm drops below tol or the budget runs out.
    The fixed node's pose object is left untouched.
    """
    _check_connected(graph)
    n = len(graph.nodes)
    free = [i for i in range(n) if i != graph.fixed_id]
    index = {node_id: k for k, node_id in enumerate(free)}
    poses = {node.id: node.global_pose.copy() for node in graph.nodes}

    chi2 = _chi2(graph, poses, huber_delta)
    initial_chi2 = chi2
    lam = 1e-6
    iterations = 0
    converged = chi2 == 0.0
    dim = 6 * len(free)
    for _ in range(max_iterations):
        if converged or dim == 0:
            break
        iterations += 1
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        for e in graph.edges:
            r, w, _ = _edge_terms(e, poses, huber_delta)
            jf, jt = _edge_jacobians(e, poses)
            info = w * e.information
            for a_id, ja in ((e.from_id, jf), (e.to_id, jt)):
                if a_id not in index:
                    continue
                ia = index[a_id] * 6
                g[ia:ia + 6] += ja.T @ info @ r
                for b_id, jb in ((e.from_id, jf), (e.to_id, jt)):
                    if b_id not in index:
                        continue
                    ib = index[b_id] * 6
                    H[ia:ia + 6, ib:ib + 6] += ja.T @ info @ jb
        accepted = False
        while lam <= _DAMPING_MAX:
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if float(np.linalg.norm(delta)) < tol:
                converged = True
                break
            trial = dict(poses)
            for node_id, k in index.items():
                trial[node_id] = se3_exp(delta[6 * k: 6 * k + 6]).compose(
                    poses[node_id]
                )
            trial_chi2 = _chi2(graph, trial, huber_delta)
            if trial_chi2 < chi2:
                poses = trial
                chi2 = trial_chi2
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                if float(np.linalg.norm(delta)) < tol:
                    converged = True
                break
            lam *= 10.0
        if converged or not accepted:
            break

    for node in graph.nodes:
        if node.id != graph.fixed_id:
            node.global_pose = poses[node.id]
    return OptimizeReport(
        initial_chi2=initial_chi2,
        final_chi2=chi2,
        iterations=iterations,
        converged=converged,
    )


def _pose_to_qline(pose):
    q = Rotation.from_matrix(pose.rotation).as_quat()  # x y z w
    t = pose.translation
    vals = [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
    return " ".join(f"{v:.12g}" for v in vals)


def _pose_from_fields(fields):
    t = np.array([float(x) for x in fields[:3]])
    q = np.array([float(x) for x in fields[3:7]])
    return PoseSE3(Rotation.from_quat(q).as_matrix(), t)


def save_g2o(graph, path):
    """Write VERTEX_SE3:QUAT / EDGE_SE3:QUAT / FIX records."""
    lines = []
    for node in graph.nodes:
        lines.append(f"VERTEX_SE3:QUAT {node.id} {_pose_to_qline(node.global_pose)}")
    lines.append(f"FIX {graph.fixed_id}")
    for e in graph.edges:
        upper = []
        for i in range(6):
            for j in range(i, 6):
                upper.append(f"{e.information[i, j]:.12g}")
        lines.append(
            f"EDGE_SE3:QUAT {e.from_id} {e.to_id} "
            f"{_pose_to_qline(e.relative)} " + " ".join(upper)
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_g2o(path):
    """Parse the plain-text graph format written by save_g2o.

    Edge kinds are not part of the format; consecutive-node edges reload as
    odometry and all others as loop edges.
    """
    nodes = {}
    edges = []
    fixed_id = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            tag = fields[0]
            try:
                if tag in ("VERTEX_SE3:QUAT", "VERTEX_SE3"):
                    nodes[int(fields[1])] = _pose_from_fields(fields[2:9])
                elif tag in ("EDGE_SE3:QUAT", "EDGE_SE3"):
                    fid, tid = int(fields[1]), int(fields[2])
                    rel = _pose_from_fields(fields[3:10])
                    vals = [float(x) for x in fields[10:31]]
                    if len(vals) != 21:
                        raise ValueError("expected 21 information entries")
                    info = np.zeros((6, 6))
                    k = 0
                    for i in range(6):
                        for j in range(i, 6):
                            info[i, j] = info[j, i] = vals[k]
                            k += 1
                    kind = "odometry" if abs(fid - tid) == 1 else "loop"
                    edges.append(GraphEdge(fid, tid, rel, info, kind))
                elif tag == "FIX":
                    fixed_id = int(fields[1])
                else:
                    raise ValueError(f"unknown record {tag!r}")
            except (ValueError, IndexError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    if sorted(nodes) != list(range(len(nodes))):
        raise InputError(f"{path}: vertex ids must be dense from 0")
    graph = PoseGraph(fixed_id=fixed_id)
    graph.nodes = [PoseNode(i, nodes[i]) for i in range(len(nodes))]
    graph.edges = edges
    return graph
