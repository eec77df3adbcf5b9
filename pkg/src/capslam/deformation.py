"""Embedded deformation graph and geometric loop closure for the surfel map.

Each node ``j`` carries a position ``g_j``, an affine matrix ``A_j`` and a
translation ``t_j``.  A point ``p`` with neighbor nodes ``N(p)`` moves to
``sum_j w_j [A_j (p - g_j) + g_j + t_j]`` with normalized inverse-distance
weights.

Neighborhoods are k-nearest in space-time: every point and node carries its
creation time (frames), scaled by ``time_scale`` cm per frame and appended as
a fourth coordinate.  With ``time_scale = 0`` this is plain spatial k-NN.  A
positive scale keeps an old surface sheet and a re-observed, drifted copy of
it on separate nodes, so closing the loop can pull one onto the other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics
from .geometry import Pose
from .surfels import SurfelMap, predict_inactive_view
from .tracker import Frame, TrackingConfig, TrackingResult, track

log = logging.getLogger(__name__)


@dataclass
class DeformationGraph:
    nodes: np.ndarray            # (M, 3) rest positions g_j (cm)
    times: np.ndarray            # (M,) creation time of the sampled surfel (frames)
    A: np.ndarray                # (M, 3, 3)
    t: np.ndarray                # (M, 3)
    edges: np.ndarray            # (M, k) neighbor node ids, -1 where absent
    k: int = 4
    time_scale: float = 0.0      # cm per frame in the space-time metric

    @classmethod
    def from_nodes(cls, nodes, times=None, k: int = 4, time_scale: float = 0.0) -> "DeformationGraph":
        nodes = np.asarray(nodes, float).reshape(-1, 3)
        M = len(nodes)
        times = np.zeros(M) if times is None else np.asarray(times, float)
        edges = np.full((M, k), -1)
        if M > 1:
            kk = min(k, M - 1)
            _, idx = cKDTree(_st(nodes, times, time_scale)).query(_st(nodes, times, time_scale), kk + 1)
            idx = np.asarray(idx).reshape(M, kk + 1)
            for j in range(M):
                nb = [i for i in idx[j] if i != j][:kk]
                edges[j, :len(nb)] = nb
        return cls(nodes, times, np.tile(np.eye(3), (M, 1, 1)), np.zeros((M, 3)), edges, k, time_scale)

    def __len__(self) -> int:
        return len(self.nodes)

    def copy(self) -> "DeformationGraph":
        return DeformationGraph(self.nodes.copy(), self.times.copy(), self.A.copy(), self.t.copy(),
                                self.edges.copy(), self.k, self.time_scale)

    def is_identity(self) -> bool:
        return bool(np.all(self.A == np.eye(3)) and np.all(self.t == 0))

    def transformed(self, pose: Pose) -> "DeformationGraph":
        """The same deformation expressed after a rigid motion of the world."""
        R = pose.rotation
        g = self.copy()
        g.nodes = pose.apply(self.nodes)
        g.A = R @ self.A @ R.T
        g.t = self.t @ R.T
        return g

    # -------------------------------------------------------- blending
    def neighbors(self, points: np.ndarray, times=None) -> tuple[np.ndarray, np.ndarray]:
        """(idx, weights) of the k nearest nodes, weights summing to one."""
        points = np.asarray(points, float).reshape(-1, 3)
        times = np.zeros(len(points)) if times is None else np.asarray(times, float)
        kk = min(self.k, len(self))
        d, idx = cKDTree(_st(self.nodes, self.times, self.time_scale)).query(
            _st(points, times, self.time_scale), kk)
        d, idx = np.asarray(d).reshape(len(points), kk), np.asarray(idx).reshape(len(points), kk)
        w = 1.0 / (d + 1e-9)
        return idx, w / w.sum(axis=1, keepdims=True)

    def apply(self, points: np.ndarray, times=None, normals: np.ndarray | None = None):
        idx, w = self.neighbors(points, times)
        points = np.asarray(points, float).reshape(-1, 3)
        local = points[:, None, :] - self.nodes[idx]
        # p + sum_j w_j [(A_j - I)(p - g_j) + t_j], exact for the identity graph
        moved = np.einsum("nkab,nkb->nka", self.A[idx] - np.eye(3), local) + self.t[idx]
        out = points + np.einsum("nk,nka->na", w, moved)
        if normals is None:
            return out
        # blended inverse-transpose
        Ainv_t = np.linalg.inv(self.A).transpose(0, 2, 1)
        Nmat = np.einsum("nk,nkab->nab", w, Ainv_t[idx])
        n = np.einsum("nab,nb->na", Nmat, normals)
        return out, n / np.linalg.norm(n, axis=1, keepdims=True)


def _st(points, times, scale) -> np.ndarray:
    return np.column_stack([points, scale * np.asarray(times, float)])


def build_graph(m: SurfelMap, spacing: float = 2.0, k: int = 4, time_scale: float = 0.0) -> DeformationGraph:
    """Greedy Poisson-disk subsample of surfel positions (insertion order)."""
    if len(m) == 0:
        raise ValueError("cannot build a graph on an empty map")
    X = _st(m.positions, m.t_init, time_scale)
    tree = cKDTree(X)
    taken = np.zeros(len(X), bool)
    chosen = []
    for i in range(len(X)):
        if taken[i]:
            continue
        chosen.append(i)
        taken[tree.query_ball_point(X[i], spacing)] = True
    chosen = np.array(chosen)
    return DeformationGraph.from_nodes(m.positions[chosen], m.t_init[chosen], k, time_scale)


def deform(m: SurfelMap, graph: DeformationGraph) -> SurfelMap:
    out = m.copy()
    if len(m) == 0 or graph.is_identity():
        return out
    out.positions, out.normals = graph.apply(m.positions, m.t_init, m.normals)
    return out


# ------------------------------------------------------------ optimization
@dataclass
class LoopConstraint:
    source: np.ndarray      # model point to move (cm)
    target: np.ndarray      # where it should end up (cm)
    time: float = 0.0       # creation time used for the node neighborhood


@dataclass
class GraphOptimization:
    graph: DeformationGraph
    energies: list = field(default_factory=list)
    iterations: int = 0
    underconstrained: bool = False


def _rot_terms(A: np.ndarray):
    """Residuals of A^T A - I and their Jacobians w.r.t. row-major A, per node."""
    M = len(A)
    r = (np.einsum("nca,ncb->nab", A, A) - np.eye(3)).reshape(M, 9)
    J = np.zeros((M, 9, 9))
    for a in range(3):
        for b in range(3):
            for c in range(3):
                # d (A^T A)_ab / d A_cd = delta_ad A_cb + delta_bd A_ca
                J[:, 3 * a + b, 3 * c + a] += A[:, c, b]
                J[:, 3 * a + b, 3 * c + b] += A[:, c, a]
    return r, J


def _linear_system(graph: DeformationGraph, cons_idx, cons_w, sources, targets, weights):
    """Residual vector and sparse Jacobian over x = [vec(A_j), t_j] per node."""
    w_rot, w_reg, w_con = (np.sqrt(w) for w in weights)
    M = len(graph)
    rows, cols, vals, res = [], [], [], []
    off = 0
    # rotation
    r, J = _rot_terms(graph.A)
    res.append(w_rot * r.ravel())
    node = np.repeat(np.arange(M), 81)
    rr = off + np.repeat(np.arange(M * 9), 9)
    cc = 12 * node + np.tile(np.arange(9), M * 9)
    rows.append(rr), cols.append(cc), vals.append(w_rot * J.ravel())
    off += 9 * M
    # regularization over directed edges j -> l
    j_idx, slot = np.nonzero(graph.edges >= 0)
    l_idx = graph.edges[j_idx, slot]
    E = len(j_idx)
    if E:
        d = graph.nodes[l_idx] - graph.nodes[j_idx]
        rreg = np.einsum("nab,nb->na", graph.A[j_idx] - np.eye(3), d) + graph.t[j_idx] - graph.t[l_idx]
        res.append(w_reg * rreg.ravel())
        for a in range(3):
            row = off + 3 * np.arange(E) + a
            for c in range(3):
                rows.append(row), cols.append(12 * j_idx + 3 * a + c), vals.append(w_reg * d[:, c])
            rows.append(row), cols.append(12 * j_idx + 9 + a), vals.append(np.full(E, w_reg))
            rows.append(row), cols.append(12 * l_idx + 9 + a), vals.append(np.full(E, -w_reg))
        off += 3 * E
    # constraints
    C = len(sources)
    if C:
        local = sources[:, None, :] - graph.nodes[cons_idx]
        moved = np.einsum("nkab,nkb->nka", graph.A[cons_idx] - np.eye(3), local) + graph.t[cons_idx]
        rcon = sources + np.einsum("nk,nka->na", cons_w, moved) - targets
        res.append(w_con * rcon.ravel())
        kk = cons_idx.shape[1]
        for a in range(3):
            row = np.repeat(off + 3 * np.arange(C) + a, kk)
            ni = cons_idx.ravel()
            wi = cons_w.ravel()
            for c in range(3):
                rows.append(row), cols.append(12 * ni + 3 * a + c), vals.append(w_con * wi * local[:, :, c].ravel())
            rows.append(row), cols.append(12 * ni + 9 + a), vals.append(w_con * wi)
        off += 3 * C
    r = np.concatenate(res)
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(off, 12 * M))
    return r, J


def _pack(graph: DeformationGraph) -> np.ndarray:
    return np.concatenate([graph.A.reshape(-1, 9), graph.t], axis=1).ravel()


def _unpack(graph: DeformationGraph, x: np.ndarray) -> DeformationGraph:
    g = graph.copy()
    X = x.reshape(-1, 12)
    g.A = X[:, :9].reshape(-1, 3, 3).copy()
    g.t = X[:, 9:].copy()
    return g


def optimize_graph(graph: DeformationGraph, constraints: list[LoopConstraint],
                   w_rot: float = 1.0, w_reg: float = 10.0, w_con: float = 100.0,
                   max_iter: int = 20, rel_tol: float = 1e-6) -> GraphOptimization:
    """Damped Gauss-Newton on the rotation, regularization and constraint energies."""
    sources = np.array([c.source for c in constraints], float).reshape(-1, 3)
    targets = np.array([c.target for c in constraints], float).reshape(-1, 3)
    times = np.array([c.time for c in constraints], float)
    under = len(sources) < 3
    if not under:
        s = np.linalg.svd(sources - sources.mean(axis=0), compute_uv=False)
        under = s[1] < 1e-6 * max(s[0], 1e-300)
    if under:
        log.warning("loop constraints do not pin a rigid motion; regularization dominates")
    if len(sources):
        cons_idx, cons_w = graph.neighbors(sources, times)
    else:
        cons_idx, cons_w = np.zeros((0, 1), int), np.zeros((0, 1))
    weights = (w_rot, w_reg, w_con)
    g = graph.copy()
    r, J = _linear_system(g, cons_idx, cons_w, sources, targets, weights)
    E = float(r @ r)
    energies = [E]
    lam = 1e-6
    it = 0
    for it in range(1, max_iter + 1):
        if E == 0.0:
            it -= 1
            break
        JtJ = (J.T @ J).tocsc()
        g_vec = J.T @ r
        diag = JtJ.diagonal()
        accepted = False
        while lam < 1e8:
            step = spsolve(JtJ + sp.diags(lam * np.maximum(diag, 1e-12)), -g_vec)
            cand = _unpack(g, _pack(g) + step)
            r_new, J_new = _linear_system(cand, cons_idx, cons_w, sources, targets, weights)
            E_new = float(r_new @ r_new)
            if np.isfinite(E_new) and E_new <= E:
                accepted = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not accepted:
            break
        rel = (E - E_new) / max(E, 1e-300)
        g, r, J, E = cand, r_new, J_new, E_new
        energies.append(E)
        if rel < rel_tol:
            break
    return GraphOptimization(g, energies, it, under)


# -------------------------------------------------------------- loop closure
@dataclass
class LoopClosureConfig:
    node_spacing: float = 2.0
    time_scale: float = 0.04         # cm per frame, 4 cm per default delta_t
    min_inlier_fraction: float = 0.6
    n_samples: int = 300             # frame-to-inactive constraints
    n_pins: int = 300                # inactive surfels held in place
    weights: tuple = (1.0, 10.0, 100.0)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)


@dataclass
class LoopClosureResult:
    map: SurfelMap
    applied: bool
    pose: Pose                       # corrected camera-to-world pose
    n_constraints: int = 0
    tracking: TrackingResult | None = None
    optimization: GraphOptimization | None = None


def _even_sample(ids: np.ndarray, n: int) -> np.ndarray:
    if len(ids) <= n:
        return ids
    return ids[np.linspace(0, len(ids) - 1, n).astype(int)]


def close_loop(m: SurfelMap, frame: Frame, pose: Pose, K: CameraIntrinsics,
               cfg: LoopClosureConfig = LoopClosureConfig()) -> LoopClosureResult:
    """Register ``frame`` against the inactive model and deform the map onto it."""
    view = predict_inactive_view(m, pose, K)
    if view.empty:
        return LoopClosureResult(m, False, pose)
    res = track(frame, view.view, Pose(), K, cfg.tracking)
    if res.degenerate or res.inlier_fraction <= cfg.min_inlier_fraction:
        return LoopClosureResult(m, False, pose, tracking=res)
    T = res.pose
    v = frame.vertices.reshape(-1, 3)
    ok = np.flatnonzero(np.isfinite(v).all(axis=1))
    pts = v[_even_sample(ok, cfg.n_samples)]
    src = pose.apply(pts)
    dst = (pose @ T).apply(pts)
    seen = np.unique(view.index[view.index >= 0])
    pins = _even_sample(seen, cfg.n_pins)
    cons = [LoopConstraint(s, d, float(m.time)) for s, d in zip(src, dst)]
    cons += [LoopConstraint(m.positions[i], m.positions[i], float(m.t_init[i])) for i in pins]
    graph = build_graph(m, cfg.node_spacing, time_scale=cfg.time_scale)
    opt = optimize_graph(graph, cons, *cfg.weights)
    out = deform(m, opt.graph)
    out.t_last[seen] = out.time  # reactivate the matched inactive surfels
    return LoopClosureResult(out, True, pose @ T, len(cons), res, opt)


def sheet_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Median distance from points ``a`` to their nearest neighbor in ``b``."""
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    d, _ = cKDTree(b).query(a)
    return float(np.median(d))
