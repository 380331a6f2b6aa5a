"""Canonical mesh extraction and skeleton construction from learned skinning."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes as _skimage_mc

from . import geomcore as gc
from . import gradtape as gt
from .gradtape import InvalidInput


class EmptyMesh(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(L, 2)`` with ``i < j``."""
        if len(self.faces) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e[e[:, 0] != e[:, 1]], axis=1)
        return np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)

    def is_watertight(self) -> bool:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
        return bool(len(counts)) and bool(np.all(counts == 2))

    def area(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangles."""
        if len(self.faces) == 0:
            raise EmptyMesh("cannot sample an empty mesh")
        area = self.area()
        fi = rng.choice(len(self.faces), n, p=area / area.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (self.vertices[self.faces[fi, i]] for i in range(3))
        return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def evaluate_grid(sdf_fn, resolution: int, bounds, chunk: int = 65536) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(gt.value(sdf_fn(pts[i:i + chunk]))) for i in range(0, len(pts), chunk)])
    return vals.reshape((resolution,) * 3)


def marching_cubes(field, resolution: int = 64, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), P=None) -> Mesh:
    """Zero level set of ``field.sdf`` on a ``resolution^3`` grid."""
    if resolution < 8:
        raise InvalidInput("resolution must be at least 8")
    return mesh_from_sdf(lambda X: field.sdf(X, P), resolution, bounds)


def mesh_from_sdf(sdf_fn, resolution: int, bounds) -> Mesh:
    vol = evaluate_grid(sdf_fn, resolution, bounds)
    if not (vol.min() < 0 < vol.max()):
        raise EmptyMesh("SDF has no zero crossing inside the bounds")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = _skimage_mc(vol, level=0.0, spacing=tuple(spacing))
    return Mesh(verts + lo, faces)


@dataclass
class BoneDescriptor:
    feature: np.ndarray
    mass: float
    orphan: bool = False


@dataclass
class RangeStats:
    t_min: float
    t_max: float
    a_min: float
    a_max: float


@dataclass
class SkeletonGraph:
    n_bones: int
    edges: dict = field(default_factory=dict)        # (j, k) with j < k -> strength
    ranges: dict = field(default_factory=dict)       # (j, k) -> RangeStats
    alpha: float = 0.0
    xi: float = 0.0
    warning: bool = False

    @property
    def nodes(self) -> list[int]:
        return sorted({b for e in self.edges for b in e})

    @property
    def orphans(self) -> list[int]:
        keep = set(self.nodes)
        return [b for b in range(self.n_bones) if b not in keep]

    def edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def canonical_weights(skin, vertices, P=None) -> np.ndarray:
    return gt.value(skin.weights(np.asarray(vertices, dtype=float), space="canonical", P=P))


def bone_features(mesh: Mesh, field, skin, P=None, weights=None, features=None) -> list[BoneDescriptor]:
    """Skinning-weighted mean feature per bone."""
    if len(mesh.vertices) == 0:
        raise EmptyMesh("mesh has no vertices")
    S = canonical_weights(skin, mesh.vertices, P) if weights is None else np.asarray(weights, dtype=float)
    psi = gt.value(field.features(mesh.vertices, P)) if features is None else np.asarray(features, dtype=float)
    mass = S.sum(axis=0)
    out = []
    for b in range(S.shape[1]):
        if mass[b] < 1e-8:
            out.append(BoneDescriptor(np.zeros(psi.shape[1]), float(mass[b]), True))
        else:
            out.append(BoneDescriptor(S[:, b] @ psi / mass[b], float(mass[b])))
    return out


def semantic_correlation(descriptors: list[BoneDescriptor]) -> np.ndarray:
    """Row-wise softmax of pairwise cosine similarities."""
    if any(d.orphan for d in descriptors):
        raise InvalidInput("orphan bone descriptor")
    F = np.stack([d.feature for d in descriptors])
    n = np.linalg.norm(F, axis=1)
    if np.any(n == 0):
        raise InvalidInput("zero-norm bone feature")
    C = (F / n[:, None]) @ (F / n[:, None]).T
    e = np.exp(C - C.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def morphological_correlation(mesh: Mesh, skin=None, P=None, weights=None) -> np.ndarray:
    """Element-wise ``sqrt`` of summed endpoint weight outer products over ``L`` edges.

    Edges are stored with an arbitrary orientation, so the result is made
    symmetric with an element-wise maximum.
    """
    E = mesh.edges
    L = len(E)
    if L == 0:
        raise InvalidInput("mesh has no edges")
    S = canonical_weights(skin, mesh.vertices, P) if weights is None else np.asarray(weights, dtype=float)
    A = S[E[:, 0]].T @ S[E[:, 1]]
    M = np.sqrt(A) / L
    return np.maximum(M, M.T)


def _threshold(M, xi):
    B = len(M)
    iu = np.triu_indices(B, k=1)
    keep = M[iu] >= xi
    return [(int(j), int(k)) for j, k, ok in zip(*iu, keep) if ok]


def _connected(B, pairs) -> bool:
    if not pairs:
        return False
    nodes = sorted({b for p in pairs for b in p})
    idx = {b: i for i, b in enumerate(nodes)}
    r = [idx[j] for j, _ in pairs]
    c = [idx[k] for _, k in pairs]
    g = coo_matrix((np.ones(len(r)), (r, c)), shape=(len(nodes),) * 2)
    return connected_components(g, directed=False)[0] == 1


ALPHA_GRID = (0.0, 0.5, 1.0, 2.0)


def build_skeleton(G, M, mode="auto", alpha: float | None = None, xi: float | None = None,
                   keep_fraction: float = 0.8) -> SkeletonGraph:
    """Threshold bone pairs on ``M`` and weight them by ``G + alpha * M``.

    ``mode='auto'`` sets ``xi`` to the ``1 - keep_fraction`` quantile of the
    positive off-diagonal entries of ``M`` and picks the smallest ``alpha``
    on :data:`ALPHA_GRID` whose graph is connected over retained bones.
    ``mode='fixed'`` uses the given ``alpha`` and ``xi``.
    """
    G = np.asarray(G, dtype=float)
    M = np.asarray(M, dtype=float)
    if G.shape != M.shape or G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidInput("G and M must be matching square matrices")
    B = len(M)
    if mode == "fixed":
        if alpha is None or xi is None:
            raise InvalidInput("fixed mode needs alpha and xi")
        grid = (alpha,)
    elif mode == "auto":
        off = M[np.triu_indices(B, k=1)]
        pos = off[off > 0]
        xi = float(np.quantile(pos, 1.0 - keep_fraction)) if len(pos) else np.inf
        grid = ALPHA_GRID if alpha is None else (alpha,)
    else:
        raise InvalidInput(f"unknown mode {mode!r}")
    pairs = _threshold(M, xi)
    chosen, ok = grid[-1], False
    for a in grid:
        strength = {(j, k): 0.5 * (G[j, k] + G[k, j]) + a * M[j, k] for j, k in pairs}
        if _connected(B, [p for p, s in strength.items() if s > 0]):
            chosen, ok = a, True
            break
    edges = {(j, k): float(0.5 * (G[j, k] + G[k, j]) + chosen * M[j, k]) for j, k in pairs}
    edges = {p: s for p, s in edges.items() if s > 0}
    if not ok:
        warnings.warn("no alpha on the grid yields a connected skeleton", RuntimeWarning, stacklevel=2)
    return SkeletonGraph(B, edges, {}, float(chosen), float(xi), not ok)


def bone_rt(track, frames, P=None):
    """Rotation quaternions ``(F, B, 4)`` and translations ``(F, B, 3)`` of the bone transforms."""
    real, dual = track.transforms(frames, P)
    return real, gc.dq_translation(real, dual)


def pair_motion(track, pairs, frames, P=None):
    """Per-frame relative distance and angle for each pair: two ``(F, E)`` arrays."""
    rot, trans = bone_rt(track, frames, P)
    j = np.array([p[0] for p in pairs])
    k = np.array([p[1] for p in pairs])
    dt = trans[:, j] - trans[:, k]
    dist = gt.sqrt(gt.sum(dt * dt, axis=-1) + 1e-18)
    ang = gc.relative_angle_batch(rot[:, j], rot[:, k])
    return dist, ang


def range_stats(track, pair, frames, P=None) -> RangeStats:
    frames = np.atleast_1d(np.asarray(frames, dtype=float))
    if len(frames) == 0:
        raise InvalidInput("need at least one frame")
    d, a = (gt.value(x)[:, 0] for x in pair_motion(track, [pair], frames, P))
    return RangeStats(float(d.min()), float(d.max()), float(a.min()), float(a.max()))


def attach_ranges(graph: SkeletonGraph, track, frames, P=None) -> SkeletonGraph:
    graph.ranges = {p: range_stats(track, p, frames, P) for p in graph.edge_list()}
    return graph


def extract_skeleton(field, skin, resolution: int = 64, bounds=((-1, -1, -1), (1, 1, 1)), frames=None, P=None,
                     mode="auto", **kw):
    """Mesh, descriptors, correlations and the skeleton graph of a trained model."""
    mesh = marching_cubes(field, resolution, bounds, P)
    S = canonical_weights(skin, mesh.vertices, P)
    desc = bone_features(mesh, field, skin, P, weights=S)
    live = [b for b, d in enumerate(desc) if not d.orphan]
    G = np.zeros((len(desc),) * 2)
    G[np.ix_(live, live)] = semantic_correlation([desc[b] for b in live])
    M = morphological_correlation(mesh, weights=S)
    dead = [b for b in range(len(desc)) if b not in live]
    M[dead, :] = 0.0
    M[:, dead] = 0.0
    graph = build_skeleton(G, M, mode, **kw)
    if frames is not None:
        attach_ranges(graph, skin.track, frames, P)
    return graph, mesh, desc, G, M
