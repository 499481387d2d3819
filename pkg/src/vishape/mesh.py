"""Structured P1 triangulations of the reference domain and nodal fields on them."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

AREA_EPS = 1e-14
DEFAULT_BOX = (-1.0, 2.0, -1.0, 2.0)


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangle mesh with boundary markers, living in a hold-all box.

    ``box`` is ``(x0, x1, y0, y1)``. Arrays are made read-only on construction.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    markers: np.ndarray
    box: tuple = DEFAULT_BOX
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        e = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        m = np.ascontiguousarray(self.markers, dtype=np.int64).reshape(-1)
        for a in (v, t, e, m):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "boundary_edges", e)
        object.__setattr__(self, "markers", m)
        object.__setattr__(self, "box", tuple(float(b) for b in self.box))
        self.validate()

    # -- invariants -------------------------------------------------------
    def validate(self):
        areas = self.signed_areas()
        bad = np.flatnonzero(areas <= AREA_EPS)
        if bad.size:
            raise MeshError(f"triangle {int(bad[0])} has non-positive area {areas[bad[0]]:.3e}")
        x0, x1, y0, y1 = self.box
        v = self.vertices
        if np.any(v[:, 0] < x0) or np.any(v[:, 0] > x1) or np.any(v[:, 1] < y0) or np.any(v[:, 1] > y1):
            raise MeshError("vertex outside hold-all box")
        if len(self.markers) != len(self.boundary_edges):
            raise MeshError("one marker per boundary edge required")
        # every boundary edge belongs to exactly one triangle
        counts = self._edge_counts()
        for a, b in self.boundary_edges:
            if counts.get((min(a, b), max(a, b)), 0) != 1:
                raise MeshError(f"boundary edge ({a},{b}) is not on exactly one triangle")
        # closed loops: each boundary vertex has even degree in the edge graph
        deg = np.bincount(self.boundary_edges.ravel(), minlength=self.n_vertices)
        if np.any(deg % 2):
            raise MeshError("boundary edges do not form closed loops")

    def _edge_counts(self):
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        keys, counts = np.unique(edges, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}

    # -- basic queries ----------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def boundary_nodes(self) -> np.ndarray:
        if "bnodes" not in self._cache:
            self._cache["bnodes"] = np.unique(self.boundary_edges.ravel())
        return self._cache["bnodes"]

    @property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = self.signed_areas()
        return self._cache["areas"]

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def grads(self) -> np.ndarray:
        """Gradients of the three barycentric basis functions, shape (ntri, 3, 2)."""
        if "grads" not in self._cache:
            p = self.vertices[self.triangles]
            a2 = 2.0 * self.areas
            g = np.empty((self.n_triangles, 3, 2))
            for k in range(3):
                i, j = (k + 1) % 3, (k + 2) % 3
                g[:, k, 0] = (p[:, i, 1] - p[:, j, 1]) / a2
                g[:, k, 1] = (p[:, j, 0] - p[:, i, 0]) / a2
            g.setflags(write=False)
            self._cache["grads"] = g
        return self._cache["grads"]

    @property
    def lumped_mass(self) -> np.ndarray:
        """Vertex-quadrature mass per node (|star(i)|/3)."""
        if "lumped" not in self._cache:
            m = np.zeros(self.n_vertices)
            np.add.at(m, self.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
            m.setflags(write=False)
            self._cache["lumped"] = m
        return self._cache["lumped"]

    def element_gradient(self, values: np.ndarray) -> np.ndarray:
        """Elementwise constant gradient of a P1 field, shape (ntri, 2)."""
        values = np.asarray(values, dtype=float)
        return np.einsum("tk,tkd->td", values[self.triangles], self.grads)

    def recovered_gradient(self, values: np.ndarray) -> np.ndarray:
        """Area-weighted average of element gradients at each vertex."""
        g = self.element_gradient(values)
        num = np.zeros((self.n_vertices, 2))
        den = np.zeros(self.n_vertices)
        w = self.areas
        for k in range(3):
            np.add.at(num, self.triangles[:, k], g * w[:, None])
            np.add.at(den, self.triangles[:, k], w)
        return num / den[:, None]

    def outward_normals(self) -> np.ndarray:
        """Unit outward normal per boundary edge."""
        tri_of_edge = self._boundary_edge_triangles()
        v = self.vertices
        a, b = self.boundary_edges[:, 0], self.boundary_edges[:, 1]
        d = v[b] - v[a]
        n = np.stack([d[:, 1], -d[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        # orient away from the opposite vertex
        c = self.centroids[tri_of_edge]
        mid = 0.5 * (v[a] + v[b])
        flip = np.einsum("ij,ij->i", n, mid - c) < 0
        n[flip] *= -1
        return n

    def _boundary_edge_triangles(self):
        if "betri" not in self._cache:
            lookup = {}
            for ti, (i, j, k) in enumerate(self.triangles):
                for a, b in ((i, j), (j, k), (k, i)):
                    lookup[(min(a, b), max(a, b))] = ti
            self._cache["betri"] = np.array(
                [lookup[(min(a, b), max(a, b))] for a, b in self.boundary_edges], dtype=np.int64
            )
        return self._cache["betri"]

    # -- norms ------------------------------------------------------------
    def l2_norm(self, values) -> float:
        v = _check_field(self, values)
        return float(np.sqrt(max(v @ (self.mass_matrix() @ v), 0.0)))

    def h1_seminorm(self, values) -> float:
        v = _check_field(self, values)
        g = self.element_gradient(v)
        return float(np.sqrt(np.sum(self.areas * np.einsum("td,td->t", g, g))))

    def h1_norm(self, values) -> float:
        return float(np.hypot(self.l2_norm(values), self.h1_seminorm(values)))

    def w1p_seminorm(self, values, p: float) -> float:
        v = _check_field(self, values)
        g = np.linalg.norm(self.element_gradient(v), axis=1)
        return float(np.sum(self.areas * g**p) ** (1.0 / p))

    def mass_matrix(self):
        """Consistent P1 mass matrix (exact for products of P1 functions)."""
        if "mass" not in self._cache:
            import scipy.sparse as sp

            local = (np.ones((3, 3)) + np.eye(3)) / 12.0
            data = self.areas[:, None, None] * local[None]
            rows = np.repeat(self.triangles, 3, axis=1).ravel()
            cols = np.tile(self.triangles, (1, 3)).ravel()
            self._cache["mass"] = sp.csr_matrix(
                (data.ravel(), (rows, cols)), shape=(self.n_vertices,) * 2
            )
        return self._cache["mass"]

    # -- export -----------------------------------------------------------
    def to_text(self) -> str:
        out = io.StringIO()
        out.write("vertices:\n")
        for x, y in self.vertices:
            out.write(f"{x:.17g} {y:.17g}\n")
        out.write("triangles:\n")
        for i, j, k in self.triangles:
            out.write(f"{i} {j} {k}\n")
        out.write("boundary:\n")
        for (i, j), m in zip(self.boundary_edges, self.markers):
            out.write(f"{i} {j} {m}\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str, box=DEFAULT_BOX) -> Mesh:
        section = None
        verts, tris, bnd = [], [], []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.endswith(":"):
                section = line[:-1]
                continue
            parts = line.split()
            if section == "vertices":
                verts.append([float(p) for p in parts])
            elif section == "triangles":
                tris.append([int(p) for p in parts])
            elif section == "boundary":
                bnd.append([int(p) for p in parts])
            else:
                raise MeshError(f"data outside a section: {line!r}")
        bnd = np.array(bnd, dtype=np.int64).reshape(-1, 3)
        return cls(np.array(verts), np.array(tris), bnd[:, :2], bnd[:, 2], box=box)


def _check_field(mesh: Mesh, values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape != (mesh.n_vertices,):
        raise MeshError(f"field of shape {v.shape} does not match mesh with {mesh.n_vertices} vertices")
    if not np.all(np.isfinite(v)):
        raise MeshError("field has non-finite entries")
    return v


def field_csv(mesh: Mesh, values, name="value") -> str:
    v = _check_field(mesh, values)
    lines = [f"node,x,y,{name}"]
    for i, ((x, y), val) in enumerate(zip(mesh.vertices, v)):
        lines.append(f"{i},{x:.17g},{y:.17g},{val:.17g}")
    return "\n".join(lines) + "\n"


def unit_square_mesh(n: int, box=DEFAULT_BOX) -> Mesh:
    """Structured mesh of [0,1]^2 with (n+1)^2 vertices and 2n^2 triangles."""
    if int(n) != n or n < 1:
        raise MeshError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    s = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    edges = []
    for i in range(n):
        edges.append((vid(i, 0), vid(i + 1, 0)))
        edges.append((vid(n, i), vid(n, i + 1)))
        edges.append((vid(i + 1, n), vid(i, n)))
        edges.append((vid(0, i + 1), vid(0, i)))
    return Mesh(verts, np.array(tris), np.array(edges), np.ones(len(edges), dtype=np.int64), box=box)


def disk_mesh(n: int, center=(0.5, 0.5), radius=0.5, box=DEFAULT_BOX) -> Mesh:
    """Square mesh pushed onto a disk by the elliptical square-to-disk map."""
    sq = unit_square_mesh(n, box=box)
    p = 2.0 * sq.vertices - 1.0
    u = p[:, 0] * np.sqrt(1.0 - 0.5 * p[:, 1] ** 2)
    v = p[:, 1] * np.sqrt(1.0 - 0.5 * p[:, 0] ** 2)
    verts = np.stack([center[0] + radius * u, center[1] + radius * v], axis=1)
    tris = sq.triangles
    bad = np.flatnonzero(_areas(verts, tris) <= AREA_EPS)
    if bad.size:
        raise MeshError(f"square-to-disk map inverted triangle {int(bad[0])}")
    return Mesh(verts, tris, sq.boundary_edges, sq.markers, box=box)


def _areas(verts, tris):
    p = verts[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle split into four through its edge midpoints."""
    verts = [tuple(v) for v in mesh.vertices]
    mid: dict[tuple[int, int], int] = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in mid:
            mid[key] = len(verts)
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            verts.append(tuple(0.5 * (pa + pb)))
        return mid[key]

    tris = []
    for i, j, k in mesh.triangles:
        a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        tris += [(i, a, c), (a, j, b), (c, b, k), (a, b, c)]
    edges, marks = [], []
    for (i, j), m in zip(mesh.boundary_edges, mesh.markers):
        c = midpoint(i, j)
        edges += [(i, c), (c, j)]
        marks += [m, m]
    return Mesh(np.array(verts), np.array(tris), np.array(edges), np.array(marks), box=mesh.box)


def deform(mesh: Mesh, mapping: Callable[[np.ndarray], np.ndarray]) -> Mesh:
    """Move every vertex by ``mapping`` (vectorised over an (n, 2) array)."""
    new = np.asarray(mapping(mesh.vertices), dtype=float)
    if new.shape != mesh.vertices.shape:
        raise MeshError("mapping must return an (n, 2) array")
    areas = _areas(new, mesh.triangles)
    bad = np.flatnonzero(areas <= AREA_EPS)
    if bad.size:
        raise MeshError(f"deformation inverts triangle {int(bad[0])}")
    return Mesh(new, mesh.triangles, mesh.boundary_edges, mesh.markers, box=mesh.box)
