"""Normalized spectral clustering and cluster-constrained client selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IsolatedNodeError, NumericError, ProtocolError


@dataclass
class AffinityMatrix:
    A: np.ndarray
    bandwidth: float


@dataclass
class LaplacianPair:
    D: np.ndarray
    L: np.ndarray
    L_norm: np.ndarray

    @property
    def degrees(self) -> np.ndarray:
        return np.diag(self.D)


@dataclass
class ClusterModel:
    affinity: AffinityMatrix
    laplacians: LaplacianPair
    eigenvalues: np.ndarray       # ascending, first k
    X: np.ndarray                 # (n, k) eigenvectors
    Y: np.ndarray                 # row-normalized X
    assignments: np.ndarray
    k: int
    zero_rows: int = 0


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    d = np.sqrt(pairwise_sq_dists(p)[np.triu_indices(len(p), 1)])
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def affinity(points, bandwidth: float | None = None) -> AffinityMatrix:
    """Gaussian kernel ``exp(-|p_i - p_j|^2 / (2 h^2))`` with zero diagonal.

    ``bandwidth=None`` uses the median pairwise distance.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[0] < 2:
        raise ValueError("affinity needs at least two points")
    h = median_bandwidth(p) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    A = np.exp(-pairwise_sq_dists(p) / (2.0 * h * h))
    np.fill_diagonal(A, 0.0)
    return AffinityMatrix(A, h)


def laplacians(aff: AffinityMatrix | np.ndarray) -> LaplacianPair:
    A = aff.A if isinstance(aff, AffinityMatrix) else np.asarray(aff, dtype=np.float64)
    deg = A.sum(axis=1)
    zero = np.nonzero(deg <= 0)[0]
    if zero.size:
        raise IsolatedNodeError(int(zero[0]))
    L = np.diag(deg) - A
    dinv = 1.0 / np.sqrt(deg)
    Ln = np.eye(len(A)) - dinv[:, None] * A * dinv[None, :]
    Ln = 0.5 * (Ln + Ln.T)
    return LaplacianPair(np.diag(deg), L, Ln)


def normalized_similarity(A) -> np.ndarray:
    """``S = D^{-1/2} A D^{-1/2}``; equals ``I - L_norm``."""
    A = A.A if isinstance(A, AffinityMatrix) else np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=1)
    zero = np.nonzero(deg <= 0)[0]
    if zero.size:
        raise IsolatedNodeError(int(zero[0]))
    dinv = 1.0 / np.sqrt(deg)
    S = dinv[:, None] * A * dinv[None, :]
    return 0.5 * (S + S.T)


# ---------------------------------------------------------------------------
# eigensolver


def _round_robin(m: int):
    """Yield m-1 rounds of disjoint index pairs covering every pair once."""
    players = list(range(m))
    for _ in range(m - 1):
        yield [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        players = [players[0], players[-1]] + players[1:-1]


def _orient(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[idx, np.arange(vecs.shape[1])] < 0, -1.0, 1.0)
    return vecs * signs


def sym_eig(M, k: int | None = None, max_sweeps: int = 60):
    """Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order, n/2 disjoint pairs at a
    time. Returns the ``k`` smallest eigenvalues (ascending) and their
    eigenvectors as columns.
    """
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    if M.ndim != 2 or M.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0, atol=1e-10):
        raise ValueError("matrix is not symmetric within 1e-10")
    k = n if k is None else k
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    A = 0.5 * (M + M.T)
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if n > 1 and scale > 0:
        m = n + (n % 2)
        tol = np.finfo(float).eps * scale * 1e-2
        for _ in range(max_sweeps):
            off = np.linalg.norm(A - np.diag(np.diag(A)))
            if off <= tol:
                break
            for pairs in _round_robin(m):
                pq = np.array([pr for pr in pairs if pr[0] < n and pr[1] < n])
                if pq.size == 0:
                    continue
                P, Q = pq[:, 0], pq[:, 1]
                apq = A[P, Q]
                act = np.abs(apq) > 1e-300
                if not act.any():
                    continue
                P, Q, apq = P[act], Q[act], apq[act]
                theta = (A[Q, Q] - A[P, P]) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                Ap, Aq = A[P, :].copy(), A[Q, :].copy()
                A[P, :] = c[:, None] * Ap - s[:, None] * Aq
                A[Q, :] = s[:, None] * Ap + c[:, None] * Aq
                Ap, Aq = A[:, P].copy(), A[:, Q].copy()
                A[:, P] = Ap * c - Aq * s
                A[:, Q] = Ap * s + Aq * c
                A[P, Q] = 0.0
                A[Q, P] = 0.0
                Vp, Vq = V[:, P].copy(), V[:, Q].copy()
                V[:, P] = Vp * c - Vq * s
                V[:, Q] = Vp * s + Vq * c
    vals = np.diag(A).copy()
    order = np.argsort(vals, kind="stable")
    vals, vecs = vals[order][:k], _orient(V[:, order][:, :k])
    res = np.linalg.norm(M @ vecs - vecs * vals, axis=0)
    bad = res > 1e-8 * max(1.0, scale)
    if bad.any():
        raise NumericError(f"Jacobi did not converge: worst residual {res.max():.3e} "
                           f"for eigenvalue {vals[np.argmax(res)]:.6g}")
    return vals, vecs


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    wcss_history: list
    iterations: int

    @property
    def wcss(self) -> float:
        return self.wcss_history[-1]


def _sq_to_centers(X, C):
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = _sq_to_centers(X, np.array(centers)).min(axis=1)
        total = d2.sum()
        i = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(X[i])
    return np.array(centers, dtype=np.float64)


def _fill_empty(X, labels, centers, k):
    """Move the farthest points into empty clusters; returns True if any moved."""
    moved = False
    for c in range(k):
        if np.any(labels == c):
            continue
        d2 = np.einsum("ij,ij->i", X - centers[labels], X - centers[labels])
        counts = np.bincount(labels, minlength=k)
        d2 = np.where(counts[labels] > 1, d2, -1.0)
        i = int(np.argmax(d2))
        labels[i] = c
        centers[c] = X[i]
        moved = True
    return moved


def lloyd(X, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from a seeded k-means++ start."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels = np.full(n, -1)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new = np.argmin(_sq_to_centers(X, centers), axis=1)
        _fill_empty(X, new, centers, k)
        for c in range(k):
            centers[c] = X[new == c].mean(axis=0)
        history.append(float(_sq_to_centers(X, centers)[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centers, history, it)


def kmeans(X, k: int, seed: int = 0) -> np.ndarray:
    return lloyd(X, k, seed).labels


# ---------------------------------------------------------------------------
# clustering


def spectral_cluster(points, k: int, bandwidth: float | None = None, seed: int = 0) -> ClusterModel:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if not 2 <= k <= len(p):
        raise ValueError(f"need n >= k >= 2, got n={len(p)}, k={k}")
    aff = affinity(p, bandwidth)
    lap = laplacians(aff)
    vals, X = sym_eig(lap.L_norm, k)
    norms = np.linalg.norm(X, axis=1)
    zero = norms <= 1e-300
    Y = np.zeros_like(X)
    Y[~zero] = X[~zero] / norms[~zero, None]
    labels = kmeans(Y, k, seed)
    return ClusterModel(aff, lap, vals, X, Y, labels, k, int(zero.sum()))


def relaxed_objective(B, S) -> float:
    """``trace(B^T S B)`` for an orthonormal ``B``."""
    B = np.asarray(B, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    if not np.allclose(B.T @ B, np.eye(B.shape[1]), rtol=0, atol=1e-8):
        raise ValueError("B must have orthonormal columns (B^T B = I within 1e-8)")
    return float(np.trace(B.T @ S @ B))


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(len(a)) if len(a) > 1 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# cluster-constrained selection


def allocate_slots(assignments, scores, k: int) -> list[int]:
    """Round-robin over clusters (largest first) picking the best-scoring
    unselected member each time. Ties go to the lower client id."""
    assignments = np.asarray(assignments)
    scores = np.asarray(scores, dtype=np.float64)
    if k > len(scores):
        raise ProtocolError(f"cannot select {k} of {len(scores)} clients")
    clusters = []
    for c in np.unique(assignments):
        members = np.nonzero(assignments == c)[0]
        order = members[np.lexsort((members, -scores[members]))]
        clusters.append(list(order))
    clusters.sort(key=lambda m: (-len(m), min(m)))
    chosen: list[int] = []
    while len(chosen) < k:
        for members in clusters:
            if members and len(chosen) < k:
                chosen.append(int(members.pop(0)))
    return sorted(chosen)


def scnet_select(embeddings, scores, k_clusters: int, k: int, seed: int = 0,
                 bandwidth: float | None = None) -> list[int]:
    """Spectral-cluster the client embeddings, then fill ``k`` slots with
    :func:`allocate_slots`."""
    emb = getattr(embeddings, "clients", embeddings)
    emb = np.asarray(emb, dtype=np.float64)
    n = len(emb)
    if k > n:
        raise ProtocolError(f"cannot select {k} of {n} clients")
    if not 1 <= k_clusters <= n or k < k_clusters:
        raise ValueError(f"need 1 <= k_clusters <= min(n, k), got {k_clusters}")
    if k_clusters == 1:
        return allocate_slots(np.zeros(n, dtype=int), scores, k)
    model = spectral_cluster(emb, k_clusters, bandwidth, seed)
    return allocate_slots(model.assignments, scores, k)
