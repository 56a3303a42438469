"""Conforming macro-triangulations with full topological classification.

A macro-mesh is the coarse triangulation before the Powell-Sabin split is
applied.  Every mesh built or loaded here is validated: triangles are
counter-clockwise, each interior edge has exactly two incident triangles,
the Euler identity for simply connected planar triangulations holds, and
the boundary edges form a single closed cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for unreadable, non-conforming or degenerate meshes."""


# Triangles thinner than this fraction of the bounding-box area make the
# incenter and split geometry ill-conditioned.
DEGENERATE_AREA_FRACTION = 1e-14


def signed_area(a, b, c):
    """Signed area of triangle (a, b, c); positive when counter-clockwise."""
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))


def rot90_ccw(v):
    """Rotate a 2-vector by +90 degrees."""
    return np.array([-v[1], v[0]])


@dataclass
class MacroMesh:
    """Validated conforming triangulation of a simply connected polygon.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array
        Vertex indices, counter-clockwise.
    edges : (ne, 2) int array
        Undirected edges as (lo, hi) vertex pairs.
    edge_tris : (ne, 2) int array
        Incident triangles (left, right) of the directed edge lo -> hi;
        -1 marks the missing side of a boundary edge.
    edge_is_boundary : (ne,) bool array
    vertex_is_boundary : (nv,) bool array
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_tris: np.ndarray
    edge_is_boundary: np.ndarray
    vertex_is_boundary: np.ndarray
    edge_index: dict = field(repr=False, default_factory=dict)
    vertex_tris: list = field(repr=False, default_factory=list)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def interior_edges(self):
        return np.flatnonzero(~self.edge_is_boundary)

    @property
    def exterior_edges(self):
        return np.flatnonzero(self.edge_is_boundary)

    @property
    def interior_vertices(self):
        return np.flatnonzero(~self.vertex_is_boundary)

    @property
    def exterior_vertices(self):
        return np.flatnonzero(self.vertex_is_boundary)

    def triangle_points(self, k):
        return self.vertices[self.triangles[k]]

    def triangle_area(self, k):
        a, b, c = self.triangle_points(k)
        return signed_area(a, b, c)

    def h_max(self):
        """Largest triangle diameter (longest edge length)."""
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return float(np.max(np.hypot(d[:, 0], d[:, 1])))

    def boundary_cycle(self):
        """Boundary vertices in counter-clockwise order (domain on the left).

        Returns the cyclic vertex list ``[v0, v1, ..., v_{m-1}]``; boundary
        edge j joins cycle position j and j+1 (mod m).
        """
        succ = {}
        for e in self.exterior_edges:
            lo, hi = self.edges[e]
            # The triangle traversing lo->hi lies to the left; traversing the
            # boundary with the domain on the left is counter-clockwise.
            if self.edge_tris[e, 0] >= 0:
                succ[lo] = hi
            else:
                succ[hi] = lo
        start = min(succ)
        cycle = [start]
        while True:
            nxt = succ[cycle[-1]]
            if nxt == start:
                break
            cycle.append(nxt)
        return cycle


@dataclass
class VertexStar:
    """Triangles and edges around a vertex, in rotational order.

    ``triangles[j]`` lies between ``edges[j]`` (incoming for counter-clockwise
    rotation around the center) and ``edges[j + 1]`` (outgoing; index taken
    mod ``len(edges)`` when the star is cyclic).  For an exterior center the
    fan is open, starts at a boundary edge, and has one more edge than
    triangles.
    """

    center: int
    triangles: list
    edges: list
    is_cyclic: bool

    def incoming_edge(self, j):
        return self.edges[j]

    def outgoing_edge(self, j):
        if self.is_cyclic:
            return self.edges[(j + 1) % len(self.edges)]
        return self.edges[j + 1]


def _build(vertices, triangles, fix_orientation=False):
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=int).copy()
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertex array must have shape (nv, 2)")
    if not np.all(np.isfinite(vertices)):
        raise MeshError("vertex coordinates must be finite")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError("triangle array must have shape (nt, 3)")
    nv = len(vertices)
    if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= nv:
        raise MeshError("triangle refers to a vertex index out of range")
    for k, tri in enumerate(triangles):
        if len(set(tri.tolist())) != 3:
            raise MeshError(f"triangle {k} repeats a vertex")

    bbox = vertices.max(axis=0) - vertices.min(axis=0)
    area_floor = DEGENERATE_AREA_FRACTION * max(bbox[0] * bbox[1], 1e-300)
    for k in range(len(triangles)):
        a, b, c = vertices[triangles[k]]
        area = signed_area(a, b, c)
        if abs(area) < area_floor:
            raise MeshError(f"triangle {k} is degenerate (area {area:.3e})")
        if area < 0:
            if not fix_orientation:
                raise MeshError(f"triangle {k} is not counter-clockwise")
            triangles[k, [1, 2]] = triangles[k, [2, 1]]

    edge_index = {}
    edges = []
    ntri = len(triangles)
    edge_tris = []
    for k in range(ntri):
        tri = triangles[k]
        for i in range(3):
            u, v = int(tri[i]), int(tri[(i + 1) % 3])
            key = (u, v) if u < v else (v, u)
            e = edge_index.get(key)
            if e is None:
                e = len(edges)
                edge_index[key] = e
                edges.append(key)
                edge_tris.append([-1, -1])
            side = 0 if (u, v) == key else 1
            if edge_tris[e][side] != -1:
                raise MeshError(
                    f"non-conforming mesh: edge {key} has more than two "
                    "incident triangles (or inconsistent orientation)"
                )
            edge_tris[e][side] = k

    edges = np.array(edges, dtype=int).reshape(-1, 2)
    edge_tris = np.array(edge_tris, dtype=int).reshape(-1, 2)
    edge_is_boundary = np.any(edge_tris < 0, axis=1)

    vertex_is_boundary = np.zeros(nv, dtype=bool)
    vertex_is_boundary[edges[edge_is_boundary].ravel()] = True
    if np.any(~np.isin(np.arange(nv), triangles)):
        raise MeshError("mesh contains vertices not used by any triangle")

    n_edges = len(edges)
    if n_edges - ntri != nv - 1:
        raise MeshError(
            "Euler identity violated: |E| - |T| = "
            f"{n_edges - ntri}, expected |V| - 1 = {nv - 1} "
            "(domain not simply connected?)"
        )

    vertex_tris = [[] for _ in range(nv)]
    for k in range(ntri):
        for v in triangles[k]:
            vertex_tris[v].append(k)

    mesh = MacroMesh(
        vertices=vertices,
        triangles=triangles,
        edges=edges,
        edge_tris=edge_tris,
        edge_is_boundary=edge_is_boundary,
        vertex_is_boundary=vertex_is_boundary,
        edge_index=edge_index,
        vertex_tris=vertex_tris,
    )
    _check_single_boundary_cycle(mesh)
    return mesh


def _check_single_boundary_cycle(mesh):
    boundary = mesh.exterior_edges
    succ = {}
    for e in boundary:
        lo, hi = mesh.edges[e]
        tail = int(lo) if mesh.edge_tris[e, 0] >= 0 else int(hi)
        if tail in succ:
            raise MeshError(f"boundary is not a simple cycle near vertex {tail}")
        succ[tail] = e
    if not succ:
        raise MeshError("mesh has no boundary edges")
    cycle = mesh.boundary_cycle()
    if len(cycle) != len(boundary):
        raise MeshError(
            "boundary edges form more than one cycle "
            f"({len(cycle)} of {len(boundary)} reachable); "
            "only simply connected domains are supported"
        )


def generate_structured(n):
    """Uniform unit-square mesh with each grid cell split along its
    lower-left to upper-right diagonal.

    Parameters
    ----------
    n : int
        Number of cells per side; the mesh has (n+1)^2 vertices and
        2 n^2 triangles.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    triangles = []
    for j in range(n):
        for i in range(n):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            triangles.append((a, b, c))
            triangles.append((a, c, d))
    return _build(vertices, np.array(triangles))


def load_mesh(path):
    """Read a mesh from a plain-text node/element file.

    Format: first data line ``V T``; then V lines ``x y``; then T lines
    ``i j k`` with 0-based vertex indices.  Tokens are whitespace-separated
    and ``#`` starts a comment line.  Clockwise triangles are re-oriented.
    """
    with open(path) as f:
        rows = [
            line.split()
            for line in f
            if line.strip() and not line.lstrip().startswith("#")
        ]
    if not rows:
        raise MeshError(f"{path}: empty mesh file")
    try:
        nv, ntri = (int(tok) for tok in rows[0][:2])
        if len(rows) != 1 + nv + ntri:
            raise MeshError(
                f"{path}: expected {1 + nv + ntri} data lines, found {len(rows)}"
            )
        vertices = np.array([[float(t) for t in r[:2]] for r in rows[1 : 1 + nv]])
        triangles = np.array(
            [[int(t) for t in r[:3]] for r in rows[1 + nv : 1 + nv + ntri]]
        )
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: parse failure: {exc}") from exc
    return _build(vertices, triangles, fix_orientation=True)


def from_arrays(vertices, triangles, fix_orientation=True):
    """Build a validated mesh directly from coordinate/connectivity arrays."""
    return _build(vertices, triangles, fix_orientation=fix_orientation)


def vertex_star(mesh, z):
    """Ordered star of macro-triangles and edges around vertex ``z``.

    Consecutive triangles share an edge and rotating counter-clockwise
    around ``z`` across that edge moves from one into the next.  For an
    exterior center the open fan starts at a boundary edge.
    """
    incident = mesh.vertex_tris[z]
    if not incident:
        raise ValueError(f"vertex {z} has no incident triangles")

    # For triangle (z, a, b) in counter-clockwise order, rotation around z
    # enters through edge (z, a) and leaves through edge (z, b).
    enters_at = {}
    leaves_at = {}
    for k in incident:
        tri = mesh.triangles[k].tolist()
        p = tri.index(z)
        a, b = tri[(p + 1) % 3], tri[(p + 2) % 3]
        enters_at[a] = (k, a, b)
        leaves_at[k] = b

    def edge_id(u, v):
        return mesh.edge_index[(u, v) if u < v else (v, u)]

    if mesh.vertex_is_boundary[z]:
        starts = [
            a
            for a, (k, _, _) in enters_at.items()
            if mesh.edge_is_boundary[edge_id(z, a)]
        ]
        if len(starts) != 1:
            raise MeshError(f"inconsistent boundary fan at vertex {z}")
        first = starts[0]
        cyclic = False
    else:
        first = min(enters_at)  # deterministic start for cyclic stars
        cyclic = True

    order = []
    a = first
    while True:
        k, a_in, b = enters_at[a]
        order.append(k)
        a = b
        if cyclic and a == first:
            break
        if not cyclic and a not in enters_at:
            break
    if len(order) != len(incident):
        raise MeshError(f"star of vertex {z} is not edge-connected")

    edge_list = [edge_id(z, mesh.triangles[k][(mesh.triangles[k].tolist().index(z) + 1) % 3]) for k in order]
    if not cyclic:
        edge_list.append(edge_id(z, leaves_at[order[-1]]))
    return VertexStar(center=z, triangles=order, edges=edge_list, is_cyclic=cyclic)
