"""Triangulated rectangular domain with tagged boundary edges.

The domain is a rectangle ``[0, length] x [0, height]`` split into a structured
grid of quads, each cut into two triangles with alternating diagonals. Boundary
edges on ``x = 0`` are tagged ``left``, on ``x = length`` ``right`` and on
``y = 0`` / ``y = height`` ``top_bottom``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OutOfDomainError, SchemaError, ValidationError

BARY_TOL = 1e-12


class BoundaryTag(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    TOP_BOTTOM = "top_bottom"


@dataclass(frozen=True)
class DomainSpec:
    length: float = 2.0
    height: float = 1.0
    mesh_size_h: float = 0.1

    def __post_init__(self):
        if not (self.length > 0 and self.height > 0):
            raise ValidationError(f"domain extents must be positive, got {self.length} x {self.height}")
        if not (0 < self.mesh_size_h < min(self.length, self.height)):
            raise ValidationError(
                f"mesh_size_h must lie in (0, {min(self.length, self.height)}), got {self.mesh_size_h}"
            )


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation.

    Attributes:
        vertices: ``(N, 2)`` coordinates.
        triangles: ``(M, 3)`` counter-clockwise vertex indices.
        edges: ``(K, 2)`` vertex pairs of the boundary edges.
        edge_triangles: ``(K,)`` index of the unique triangle owning each boundary edge.
        edge_tags: ``(K,)`` tag of each boundary edge.
        h: maximal edge length.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_triangles: np.ndarray
    edge_tags: tuple[BoundaryTag, ...]
    h: float = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "edges", np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "edge_triangles", np.ascontiguousarray(self.edge_triangles, dtype=np.int64))
        object.__setattr__(self, "edge_tags", tuple(BoundaryTag(tag) for tag in self.edge_tags))
        for arr in (v, t, self.edges, self.edge_triangles):
            arr.setflags(write=False)
        if np.any(self.signed_areas() <= 0):
            raise ValidationError("mesh contains triangles with non-positive signed area")
        p = v[t]
        lengths = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        object.__setattr__(self, "h", float(lengths.max()))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def edges_with_tag(self, tag: BoundaryTag | str) -> np.ndarray:
        tag = BoundaryTag(tag)
        return np.array([k for k, g in enumerate(self.edge_tags) if g is tag], dtype=np.int64)

    def vertices_with_tag(self, tag: BoundaryTag | str) -> np.ndarray:
        return np.unique(self.edges[self.edges_with_tag(tag)])

    def edge_lengths(self) -> np.ndarray:
        a, b = self.vertices[self.edges[:, 0]], self.vertices[self.edges[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    def bounding_box(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def _boundary_edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edges used by exactly one triangle, oriented as in that triangle."""
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = triangles[:, local].reshape(-1, 2)
    owner = np.repeat(np.arange(len(triangles)), 3)
    key = np.sort(all_edges, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inverse.ravel()] == 1
    return all_edges[once], owner[once]


def build_mesh(spec: DomainSpec) -> Mesh:
    """Structured crisscross triangulation of the rectangle described by ``spec``."""
    nx = max(1, math.ceil(spec.length / spec.mesh_size_h - 1e-9))
    ny = max(1, math.ceil(spec.height / spec.mesh_size_h - 1e-9))
    xs = np.linspace(0.0, spec.length, nx + 1)
    ys = np.linspace(0.0, spec.height, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # row j = y index
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            if (i + j) % 2 == 0:
                tris += [(v00, v10, v11), (v00, v11, v01)]
            else:
                tris += [(v00, v10, v01), (v10, v11, v01)]
    triangles = np.array(tris, dtype=np.int64)

    edges, owners = _boundary_edges(triangles)
    mid = vertices[edges].mean(axis=1)
    tol = 1e-9 * max(spec.length, spec.height)
    tags = []
    for mx, my in mid:
        if abs(mx) < tol:
            tags.append(BoundaryTag.LEFT)
        elif abs(mx - spec.length) < tol:
            tags.append(BoundaryTag.RIGHT)
        elif abs(my) < tol or abs(my - spec.height) < tol:
            tags.append(BoundaryTag.TOP_BOTTOM)
        else:  # pragma: no cover - structured grid guarantees this
            raise ValidationError(f"boundary edge with midpoint ({mx}, {my}) is not on the rectangle")
    return Mesh(vertices, triangles, edges, owners, tuple(tags))


def outward_normal(mesh: Mesh, edge_index: int) -> np.ndarray:
    """Unit normal of a boundary edge pointing away from its triangle."""
    if not 0 <= edge_index < len(mesh.edges):
        raise IndexError(f"boundary edge index {edge_index} out of range")
    return outward_normals(mesh)[edge_index]


def outward_normals(mesh: Mesh) -> np.ndarray:
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    d = b - a
    n = np.column_stack([d[:, 1], -d[:, 0]])
    n /= np.linalg.norm(n, axis=1)[:, None]
    c = mesh.centroids()[mesh.edge_triangles]
    flip = np.einsum("ij,ij->i", n, c - 0.5 * (a + b)) > 0
    n[flip] *= -1.0
    return n


def barycentric_all(mesh: Mesh, x) -> np.ndarray:
    """Barycentric coordinates of point ``x`` with respect to every triangle, ``(M, 3)``."""
    p = mesh.vertices[mesh.triangles]
    x = np.asarray(x, dtype=float)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    r = x - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def locate_point(mesh: Mesh, x) -> tuple[int, np.ndarray]:
    """Find the triangle containing ``x``.

    Points on shared edges resolve to the lowest triangle index.

    Returns:
        ``(triangle index, barycentric coordinates)``.

    Raises:
        OutOfDomainError: if no triangle contains ``x``.
    """
    lam = barycentric_all(mesh, x)
    inside = np.all(lam >= -BARY_TOL, axis=1)
    hits = np.flatnonzero(inside)
    if hits.size == 0:
        raise OutOfDomainError(f"point {tuple(np.asarray(x, float))} lies outside the mesh")
    k = int(hits[0])
    bary = np.clip(lam[k], 0.0, 1.0)
    bary /= bary.sum()
    return k, bary


@dataclass(frozen=True)
class VerticalSection:
    y_a: float
    y_b: float
    # (triangle index, y_low, y_high) sorted by y_low
    segments: tuple[tuple[int, float, float], ...]


def vertical_section(mesh: Mesh, x_coord: float) -> VerticalSection:
    """Intersect the line ``x = x_coord`` with the mesh.

    The returned segments partition ``[y_a, y_b]``; where the line runs along
    an element edge, the segment is attributed to the lowest-index triangle.
    """
    xmin, xmax, _, _ = mesh.bounding_box()
    if not xmin < x_coord < xmax:
        raise OutOfDomainError(f"x = {x_coord} is not strictly inside ({xmin}, {xmax})")
    scale = max(xmax - xmin, 1.0)
    tol = 1e-12 * scale
    p = mesh.vertices[mesh.triangles]
    candidates = []
    for k in np.flatnonzero((p[:, :, 0].min(axis=1) <= x_coord + tol) & (p[:, :, 0].max(axis=1) >= x_coord - tol)):
        ys = []
        tri = p[k]
        for a, b in ((0, 1), (1, 2), (2, 0)):
            xa, ya = tri[a]
            xb, yb = tri[b]
            if abs(xb - xa) <= tol:
                if abs(xa - x_coord) <= tol:
                    ys += [ya, yb]
                continue
            s = (x_coord - xa) / (xb - xa)
            if -1e-12 <= s <= 1 + 1e-12:
                ys.append(ya + min(max(s, 0.0), 1.0) * (yb - ya))
        if ys:
            lo, hi = min(ys), max(ys)
            if hi - lo > tol:
                candidates.append((lo, hi, int(k)))
    if not candidates:
        raise OutOfDomainError(f"line x = {x_coord} does not intersect the mesh")
    candidates.sort(key=lambda c: (round(c[0] / tol), round(c[1] / tol), c[2]))
    segments = []
    covered = -math.inf
    for lo, hi, k in candidates:
        if hi <= covered + tol:
            continue  # duplicate of an edge already attributed to a lower index
        segments.append((k, max(lo, covered) if segments else lo, hi))
        covered = hi
    return VerticalSection(segments[0][1], segments[-1][2], tuple(segments))


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"vertices {mesh.n_vertices} triangles {mesh.n_triangles} boundary {len(mesh.edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [" ".join(str(i) for i in t) for t in mesh.triangles.tolist()]
    lines += [
        f"{a} {b} {k} {tag.value}"
        for (a, b), k, tag in zip(mesh.edges.tolist(), mesh.edge_triangles.tolist(), mesh.edge_tags)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    rows = Path(path).read_text().splitlines()
    try:
        head = rows[0].split()
        if head[0::2] != ["vertices", "triangles", "boundary"]:
            raise ValueError("bad header")
        nv, nt, nb = (int(s) for s in head[1::2])
        body = rows[1 : 1 + nv + nt + nb]
        if len(body) != nv + nt + nb:
            raise ValueError("truncated file")
        vertices = [[float(s) for s in r.split()] for r in body[:nv]]
        triangles = [[int(s) for s in r.split()] for r in body[nv : nv + nt]]
        bnd = [r.split() for r in body[nv + nt :]]
        edges = [[int(r[0]), int(r[1])] for r in bnd]
        owners = [int(r[2]) for r in bnd]
        tags = [BoundaryTag(r[3]) for r in bnd]
    except (IndexError, ValueError) as exc:
        raise SchemaError(f"cannot parse mesh file {path}: {exc}") from exc
    return Mesh(np.array(vertices), np.array(triangles), np.array(edges), np.array(owners), tuple(tags))
