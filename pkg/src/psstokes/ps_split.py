"""Powell-Sabin split of a macro-mesh.

Each macro-triangle is subdivided into six subtriangles by connecting its
incenter to the three corners and to one point per edge: on an interior
edge, the intersection of the segment joining the two adjacent incenters
with the edge; on an exterior edge, the midpoint.  Those per-edge points
are the *singular vertices* of the split: all split edges meeting there
lie on exactly two straight lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .macro_mesh import MacroMesh, MeshError

# Geometric predicates use this tolerance relative to the local edge length;
# double-precision construction noise sits near 1e-16.
GEOM_RTOL = 1e-12

# Reference triangle corners; an affine map sends them to a macro-triangle's
# vertices in stored order.
REF_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def incenter(a, b, c):
    """Incenter of a triangle: side-length weighted average of the corners."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    la = np.linalg.norm(b - c)
    lb = np.linalg.norm(c - a)
    lc = np.linalg.norm(a - b)
    s = la + lb + lc
    u, v = b - a, c - a
    twice_area = u[0] * v[1] - u[1] * v[0]
    if s == 0.0 or abs(twice_area) < GEOM_RTOL * s * s:
        raise ValueError("degenerate triangle has no incenter")
    return (la * a + lb * b + lc * c) / s


@dataclass
class PSMesh:
    """A macro-mesh together with its Powell-Sabin split.

    Split vertices are indexed as: the macro vertices first (same ids),
    then one singular vertex per macro edge (``n_macro_vertices + e``),
    then one incenter per macro-triangle.  ``tri_table[k]`` lists the seven
    split vertices of macro-triangle ``k``: the corner/singular boundary
    cycle (six entries, counter-clockwise, starting at the corner with the
    smallest global index) followed by the incenter.  Subtriangle ``6k + j``
    spans the incenter and boundary-cycle entries ``j`` and ``j + 1``.
    """

    macro: MacroMesh
    points: np.ndarray
    subtris: np.ndarray
    subtri_parent: np.ndarray
    tri_table: np.ndarray
    point_subtris: list = field(repr=False, default_factory=list)
    _geom_cache: tuple = field(repr=False, default=None, compare=False)

    @property
    def n_split_vertices(self):
        return len(self.points)

    @property
    def n_subtris(self):
        return len(self.subtris)

    def singular_vertex(self, e):
        """Split-vertex id of the singular vertex on macro edge ``e``."""
        return self.macro.n_vertices + e

    def incenter_vertex(self, k):
        """Split-vertex id of the incenter of macro-triangle ``k``."""
        return self.macro.n_vertices + self.macro.n_edges + k

    def singular_edge(self, z):
        """Macro edge carrying singular split vertex ``z``, else None."""
        e = z - self.macro.n_vertices
        if 0 <= e < self.macro.n_edges:
            return e
        return None

    def singular_is_boundary(self, z):
        e = self.singular_edge(z)
        return e is not None and bool(self.macro.edge_is_boundary[e])

    def subtri_points(self, t):
        return self.points[self.subtris[t]]

    def subtri_areas(self):
        p = self.points[self.subtris]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def interior_split_vertices(self):
        """Split vertices not on the domain boundary."""
        nv, ne = self.macro.n_vertices, self.macro.n_edges
        mask = np.zeros(self.n_split_vertices, dtype=bool)
        mask[:nv] = ~self.macro.vertex_is_boundary
        mask[nv : nv + ne] = ~self.macro.edge_is_boundary
        mask[nv + ne :] = True
        return np.flatnonzero(mask)

    def h_split(self):
        """Largest subtriangle diameter."""
        p = self.points[self.subtris]
        d = [np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1) for i in range(3)]
        return float(np.max(d))


def split(mesh: MacroMesh) -> PSMesh:
    """Construct the Powell-Sabin split of a validated macro-mesh."""
    nv, ne, nt = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
    points = np.empty((nv + ne + nt, 2))
    points[:nv] = mesh.vertices

    centers = np.empty((nt, 2))
    for k in range(nt):
        a, b, c = mesh.triangle_points(k)
        centers[k] = incenter(a, b, c)
    points[nv + ne :] = centers

    for e in range(ne):
        a = mesh.vertices[mesh.edges[e, 0]]
        b = mesh.vertices[mesh.edges[e, 1]]
        if mesh.edge_is_boundary[e]:
            points[nv + e] = 0.5 * (a + b)
            continue
        z1 = centers[mesh.edge_tris[e, 0]]
        z2 = centers[mesh.edge_tris[e, 1]]
        # Solve a + t (b - a) = z1 + s (z2 - z1) for (t, s); parameterizing by
        # t keeps the singular vertex exactly on the macro edge.
        mat = np.column_stack([b - a, z1 - z2])
        t, s = np.linalg.solve(mat, z1 - a)
        if not (GEOM_RTOL < t < 1.0 - GEOM_RTOL and 0.0 < s < 1.0):
            raise MeshError(
                f"incenter segment misses the open interior of edge {e} "
                f"(t={t}, s={s}); split geometry is inconsistent"
            )
        points[nv + e] = a + t * (b - a)

    tri_table = np.empty((nt, 7), dtype=int)
    for k in range(nt):
        tri = mesh.triangles[k]
        r = int(np.argmin(tri))  # deterministic cycle start
        c0, c1, c2 = (int(tri[(r + i) % 3]) for i in range(3))

        def sing(u, v):
            return nv + mesh.edge_index[(u, v) if u < v else (v, u)]

        tri_table[k] = [c0, sing(c0, c1), c1, sing(c1, c2), c2, sing(c2, c0),
                        nv + ne + k]

    subtris = np.empty((6 * nt, 3), dtype=int)
    subtri_parent = np.repeat(np.arange(nt), 6)
    for k in range(nt):
        cyc = tri_table[k]
        for j in range(6):
            subtris[6 * k + j] = (cyc[6], cyc[j], cyc[(j + 1) % 6])

    point_subtris = [[] for _ in range(len(points))]
    for t, tri in enumerate(subtris):
        for z in tri:
            point_subtris[z].append(t)

    ps = PSMesh(
        macro=mesh,
        points=points,
        subtris=subtris,
        subtri_parent=subtri_parent,
        tri_table=tri_table,
        point_subtris=point_subtris,
    )
    areas = ps.subtri_areas()
    if np.any(areas <= 0.0):
        bad = int(np.argmin(areas))
        raise MeshError(f"subtriangle {bad} of the split is not positive")
    return ps


def subtri_shape_gradients(ps: PSMesh):
    """Per-subtriangle areas and linear shape-function gradients.

    Returns ``(areas, grads)`` with shapes (n,) and (n, 3, 2);
    ``grads[t, i]`` is the constant gradient on subtriangle ``t`` of the
    barycentric shape function attached to its corner ``i``.
    """
    if ps._geom_cache is not None:
        return ps._geom_cache
    p = ps.points[ps.subtris]
    areas = ps.subtri_areas()
    grads = np.empty((len(p), 3, 2))
    for i in range(3):
        v = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]  # edge opposite corner i
        grads[:, i, 0] = -v[:, 1]
        grads[:, i, 1] = v[:, 0]
    grads /= 2.0 * areas[:, None, None]
    ps._geom_cache = (areas, grads)
    return areas, grads


def nodal_divergence(ps: PSMesh, field):
    """Constant divergence per subtriangle of a piecewise-linear nodal
    2-vector field given by its values at the split vertices."""
    _, grads = subtri_shape_gradients(ps)
    vals = np.asarray(field)[ps.subtris]  # (n, 3, 2)
    return np.einsum("tic,tic->t", vals, grads)


def outward_normals(p):
    """Edge lengths and outward unit normals of a counter-clockwise triangle.

    Edge ``i`` lies opposite corner ``i``.  Returns ``(lengths, normals)``
    with shapes (3,) and (3, 2).
    """
    p = np.asarray(p, dtype=float)
    lengths = np.empty(3)
    normals = np.empty((3, 2))
    for i in range(3):
        v = p[(i + 2) % 3] - p[(i + 1) % 3]
        lengths[i] = np.linalg.norm(v)
        normals[i] = np.array([v[1], -v[0]]) / lengths[i]
    return lengths, normals


def incident_split_edges(ps: PSMesh, z):
    """Neighbor split vertices joined to ``z`` by a split edge."""
    neighbors = set()
    for t in ps.point_subtris[z]:
        tri = ps.subtris[t]
        neighbors.update(int(v) for v in tri if v != z)
    return sorted(neighbors)


def verify_singular(ps: PSMesh, z) -> bool:
    """True when every split edge meeting at ``z`` lies on one of exactly
    two straight lines."""
    zp = ps.points[z]
    directions = []
    for w in incident_split_edges(ps, z):
        d = ps.points[w] - zp
        norm = np.linalg.norm(d)
        if norm == 0.0:
            return False
        directions.append(d / norm)
    lines = []
    for d in directions:
        for line in lines:
            if abs(d[0] * line[1] - d[1] * line[0]) <= GEOM_RTOL:
                break
        else:
            lines.append(d)
    return len(lines) == 2


@dataclass
class ReferenceGeometry:
    """Preimage of one macro-triangle's split under its affine chart.

    ``ref_singular[i]`` is the preimage of the singular vertex on reference
    edge ``i + 1`` in the 1-based edge labelling: edge 1 joins corners
    (0,1) and (0,0), edge 2 joins (0,0) and (1,0), edge 3 is the hypotenuse.
    """

    tri: int
    offset: np.ndarray       # image of the reference origin
    jacobian: np.ndarray     # (2, 2)
    jacobian_inv: np.ndarray
    det: float
    ref_center: np.ndarray   # (2,)
    ref_singular: np.ndarray  # (3, 2)

    def to_physical(self, xhat):
        return self.offset + np.asarray(xhat) @ self.jacobian.T

    def to_reference(self, x):
        return (np.asarray(x) - self.offset) @ self.jacobian_inv.T


def reference_geometry(ps: PSMesh, k) -> ReferenceGeometry:
    """Affine chart of macro-triangle ``k`` and the preimages of its
    incenter and singular vertices."""
    mesh = ps.macro
    tri = mesh.triangles[k]
    p = mesh.vertices[tri]
    jac = np.column_stack([p[1] - p[0], p[2] - p[0]])
    det = float(np.linalg.det(jac))
    jac_inv = np.array([[jac[1, 1], -jac[0, 1]], [-jac[1, 0], jac[0, 0]]]) / det

    def pre(x):
        return jac_inv @ (x - p[0])

    center = pre(ps.points[ps.incenter_vertex(k)])

    # Reference edge i+1 joins local corners ((i+2) % 3, i).
    ref_singular = np.empty((3, 2))
    for i in range(3):
        u, v = int(tri[(i + 2) % 3]), int(tri[i])
        e = mesh.edge_index[(u, v) if u < v else (v, u)]
        ref_singular[i] = pre(ps.points[ps.singular_vertex(e)])

    return ReferenceGeometry(
        tri=k,
        offset=p[0].copy(),
        jacobian=jac,
        jacobian_inv=jac_inv,
        det=det,
        ref_center=center,
        ref_singular=ref_singular,
    )
