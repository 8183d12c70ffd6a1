"""Graph container, Laplacian filters, a cyclic Jacobi eigensolver and spectral features."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class GraphError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph.

    ``edges`` is normalized on construction to sorted ``(i, j)`` pairs with
    ``i < j``. ``node_labels`` are integers; ``features`` is an ``n x d`` array.
    """

    n: int
    edges: tuple = ()
    node_labels: Optional[tuple] = None
    features: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 0:
            raise GraphError(f"negative node count {self.n}")
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={self.n}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
        object.__setattr__(self, "edges", tuple(sorted(seen)))
        if self.node_labels is not None:
            if len(self.node_labels) != self.n:
                raise GraphError(f"{len(self.node_labels)} node labels for {self.n} nodes")
            object.__setattr__(self, "node_labels", tuple(int(x) for x in self.node_labels))
        if self.features is not None:
            x = np.array(self.features, dtype=np.float64)
            if x.ndim == 1:
                x = x.reshape(-1, 1)
            if x.shape[0] != self.n:
                raise GraphError(f"features have {x.shape[0]} rows, graph has {self.n} nodes")
            x.setflags(write=False)
            object.__setattr__(self, "features", x)

    @classmethod
    def from_edges(cls, n, edges, node_labels=None, features=None, dedupe=False):
        if dedupe:
            edges = {(min(i, j), max(i, j)) for i, j in edges if i != j}
        return cls(n, tuple(edges), node_labels, features)

    def with_features(self, features) -> "Graph":
        return Graph(self.n, self.edges, self.node_labels, features)

    def with_labels(self, labels) -> "Graph":
        return Graph(self.n, self.edges, labels, self.features)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.edges:
            e = np.array(self.edges)
            a[e[:, 0], e[:, 1]] = 1.0
            a[e[:, 1], e[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            d[i] += 1
            d[j] += 1
        return d

    def neighbors(self) -> list:
        nbrs = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs

    def labels_or_degree(self) -> tuple:
        if self.node_labels is not None:
            return self.node_labels
        return tuple(int(d) for d in self.degrees())

    def components(self) -> np.ndarray:
        """Connected-component id per node, numbered in order of lowest node index."""
        comp = np.full(self.n, -1, dtype=np.int64)
        nbrs = self.neighbors()
        c = 0
        for s in range(self.n):
            if comp[s] >= 0:
                continue
            comp[s] = c
            stack = [s]
            while stack:
                u = stack.pop()
                for v in nbrs[u]:
                    if comp[v] < 0:
                        comp[v] = c
                        stack.append(v)
            c += 1
        return comp

    def num_components(self) -> int:
        return int(self.components().max()) + 1 if self.n else 0

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if (self.n, self.edges, self.node_labels) != (other.n, other.edges, other.node_labels):
            return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)

    def __hash__(self):
        return hash((self.n, self.edges, self.node_labels))


def laplacian(g: Graph) -> np.ndarray:
    a = g.adjacency()
    return np.diag(a.sum(axis=1)) - a


def normalized_adjacency(g: Graph) -> np.ndarray:
    # isolated nodes: 0/0 -> 0
    a = g.adjacency()
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def conv_filter(g: Graph) -> np.ndarray:
    """Renormalized propagation filter ``D^-1/2 A D^-1/2 + I``."""
    return normalized_adjacency(g) + np.eye(g.n)


def normalized_laplacian(g: Graph) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^-1/2 A D^-1/2``."""
    return np.eye(g.n) - normalized_adjacency(g)


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def eigendecompose(m, max_sweeps: int = 100, tol: float = 1e-12) -> SpectralDecomposition:
    """Cyclic Jacobi eigensolver for dense symmetric matrices.

    Sweeps all off-diagonal pairs in row order, rotating each away, until the
    off-diagonal Frobenius norm drops under ``tol`` (relative to the matrix norm,
    floored at 1). Eigenvalues are returned ascending with matching columns.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > 1e-10:
        raise ValueError(f"matrix is not symmetric (max asymmetry {np.max(np.abs(a - a.T)):.3e})")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))

    def off_norm(x):
        return float(np.linalg.norm(x - np.diag(np.diag(x))))

    converged = n < 2
    for _ in range(max_sweeps):
        if converged or off_norm(a) <= tol * scale:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < abs(diff) * 1e-36:
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    if not converged:
        if off_norm(a) > tol * scale:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps; off-diagonal residual {off_norm(a):.3e}"
            )
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return SpectralDecomposition(w[order], v[:, order])


def apply_spectral_fn(d: SpectralDecomposition, f: Callable) -> np.ndarray:
    """Return ``U diag(f(lambda)) U^T``."""
    vals = np.array([f(float(x)) for x in d.eigenvalues], dtype=np.float64)
    bad = ~np.isfinite(vals)
    if bad.any():
        lam = d.eigenvalues[np.argmax(bad)]
        raise ValueError(f"spectral function is not finite at eigenvalue {lam!r}")
    u = d.eigenvectors
    out = (u * vals) @ u.T
    return 0.5 * (out + out.T)


def make_rng(seed) -> np.random.Generator:
    """Seeded Philox4x32-10 generator (counter-based, identical stream on every platform).

    ``seed`` may be an int or a sequence of ints; sequences let callers derive
    independent per-item streams, e.g. ``make_rng((base_seed, graph_index))``.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def gaussian_features(n: int, d: int, sigma: float, seed) -> np.ndarray:
    if d < 1:
        raise ValueError(f"feature dimension must be >= 1, got {d}")
    return make_rng(seed).normal(0.0, sigma, size=(n, d))


def _fix_signs(u: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    u = u.copy()
    for k in range(u.shape[1]):
        col = u[:, k]
        mags = np.abs(col)
        if mags.size == 0 or mags.max() == 0:
            continue
        i = int(np.flatnonzero(mags >= mags.max() - tol)[0])
        if col[i] < 0:
            u[:, k] = -col
    return u


def spectral_features_from(d: SpectralDecomposition, k: int) -> np.ndarray:
    n = len(d.eigenvalues)
    if k < 1 or k > n - 1:
        raise ValueError(f"need 1 <= k <= n-1 nontrivial eigenvectors, got k={k}, n={n}")
    u = _fix_signs(d.eigenvectors[:, 1:k + 1])
    return u * d.eigenvalues[1:k + 1]


def spectral_node_features(g: Graph, k: int) -> np.ndarray:
    """Laplacian eigenvectors 1..k (the constant one skipped), scaled by their eigenvalue.

    Each column is sign-fixed so that its largest-magnitude entry is positive,
    lowest node index winning ties.
    """
    if k > g.n - 1:
        raise ValueError(f"k={k} exceeds the {g.n - 1} nontrivial eigenvectors of a {g.n}-node graph")
    return spectral_features_from(eigendecompose(laplacian(g)), k)


def permute(g: Graph, perm: Sequence[int]) -> Graph:
    """Relabel node ``i`` as ``perm[i]``; with ``P[perm[i], i] = 1`` this is ``A' = P A P^T``."""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(g.n)):
        raise GraphError(f"not a permutation of 0..{g.n - 1}: {perm}")
    edges = tuple((perm[i], perm[j]) for i, j in g.edges)
    labels = None
    if g.node_labels is not None:
        labels = [0] * g.n
        for i, lab in enumerate(g.node_labels):
            labels[perm[i]] = lab
    features = None
    if g.features is not None:
        features = np.empty_like(g.features)
        features[perm] = g.features
    return Graph(g.n, edges, labels, features)


def inverse_permutation(perm: Sequence[int]) -> list:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return inv


# small constructors used by tests, demos and the synthetic datasets

def cycle_graph(n: int) -> Graph:
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def complete_graph(n: int) -> Graph:
    return Graph(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)))


def path_graph(n: int) -> Graph:
    return Graph(n, tuple((i, i + 1) for i in range(n - 1)))


def disjoint_union(*graphs: Graph) -> Graph:
    edges, offset = [], 0
    for g in graphs:
        edges.extend((i + offset, j + offset) for i, j in g.edges)
        offset += g.n
    return Graph(offset, tuple(edges))


def random_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    return Graph(n, tuple(zip(iu[0][keep].tolist(), iu[1][keep].tolist())))


def random_regular_graph(n: int, k: int, rng: np.random.Generator, max_tries: int = 1000) -> Graph:
    """Pairing-model random k-regular simple graph (rejection sampling)."""
    if (n * k) % 2 or k >= n:
        raise ValueError(f"no simple {k}-regular graph on {n} nodes")
    for _ in range(max_tries):
        stubs = np.repeat(np.arange(n), k)
        rng.shuffle(stubs)
        pairs = stubs.reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        keys = {(min(a, b), max(a, b)) for a, b in pairs.tolist()}
        if len(keys) == len(pairs):
            return Graph(n, tuple(keys))
    raise RuntimeError(f"failed to sample a {k}-regular graph on {n} nodes")
