"""Locally supported solenoidal basis of the piecewise-linear velocity space.

Each macro vertex z carries three basis functions supported on its star of
macro-triangles.  On every star triangle the function is piecewise linear
on the six Powell-Sabin subtriangles, vanishes on the edge opposite z, and
is fixed by three degrees of freedom: the value at z and the normal moment
across the star edges.  The triple (value_x, value_y, moment) is the unit
vector e_i for function i.  Construction solves, per star triangle, an
8x8 linear system: values at the four free split vertices constrained by
the two nodal conditions, one edge-moment condition and divergence-zero
on five of the six subtriangles (the sixth then vanishes identically).

The same solve applied on the reference triangle yields the tabulated
reference functions, which transform to physical triangles through the
Piola map v = J vhat / |det J|.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .macro_mesh import rot90_ccw, vertex_star
from .ps_split import PSMesh, ReferenceGeometry, outward_normals

# Slot layout of a macro-triangle's seven split points, matching
# PSMesh.tri_table: boundary cycle (corner, singular, corner, singular,
# corner, singular) then the incenter.
CENTER_SLOT = 6

# Map from the reference labelling (center, singular 1..3, corner 1..3)
# to the cycle layout starting at corner 1 = (0, 0).
REF_POINT_SLOTS = {
    "center": 6,
    "s1": 5, "s2": 1, "s3": 3,
    "z1": 0, "z2": 2, "z3": 4,
}


def div_integral(points, values):
    """Integral of the divergence of a linear field over one triangle.

    Uses the boundary form -(1/2) sum |e_i| v(z_i) . n_i with e_i the edge
    opposite corner i and n_i its outward unit normal; exact for linear v
    on a counter-clockwise triangle.
    """
    lengths, normals = outward_normals(points)
    values = np.asarray(values, dtype=float)
    return -0.5 * float(np.sum(lengths * np.sum(values * normals, axis=1)))


def piecewise_moment(a, s, b, va, vs, vb, normal):
    """Integral of v . n over the segment a -> s -> b for v linear on each
    half; the two-piece trapezoid rule is exact here."""
    l1 = np.linalg.norm(s - a)
    l2 = np.linalg.norm(b - s)
    na = np.dot(va, normal)
    ns = np.dot(vs, normal)
    nb = np.dot(vb, normal)
    return 0.5 * (l1 * (na + ns) + l2 * (ns + nb))


def ccw_normal(z, w):
    """Unit normal on the segment z-w pointing in the direction of
    counter-clockwise rotation around z."""
    d = np.asarray(w, dtype=float) - np.asarray(z, dtype=float)
    return rot90_ccw(d) / np.linalg.norm(d)


def solve_star_triangle(pts7, corner_slot, check=True):
    """Solve the local constraint system on one macro-triangle.

    Parameters
    ----------
    pts7 : (7, 2) array
        Split points of the triangle in cycle layout.
    corner_slot : int
        Cycle slot (0, 2 or 4) of the basis-center corner z.

    Returns
    -------
    (3, 7, 2) array
        Nodal tables of the three local functions; entry order is the unit
        triple index i - 1 for (value, moment) data (1,0,0), (0,1,0),
        (0,0,1).  Points off the two edges through z hold zeros.
    """
    cs = corner_slot
    slot_in = (cs + 1) % 6   # singular vertex on the rotation-entry edge
    slot_out = (cs + 5) % 6  # singular vertex on the rotation-exit edge
    far_in = (cs + 2) % 6    # far corner of the entry edge
    far_out = (cs + 4) % 6   # far corner of the exit edge

    unknown_slots = [cs, slot_in, slot_out, CENTER_SLOT]
    col_of = {s: 2 * i for i, s in enumerate(unknown_slots)}

    A = np.zeros((8, 8))
    rhs = np.zeros((8, 3))
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    rhs[0, 0] = 1.0
    rhs[1, 1] = 1.0

    # Moment across the exit edge z -> slot_out -> far_out, with the unit
    # normal pointing along counter-clockwise rotation around z.
    n_out = ccw_normal(pts7[cs], pts7[far_out])
    l1 = np.linalg.norm(pts7[slot_out] - pts7[cs])
    l2 = np.linalg.norm(pts7[far_out] - pts7[slot_out])
    A[2, 0:2] = 0.5 * l1 * n_out
    A[2, col_of[slot_out] : col_of[slot_out] + 2] = 0.5 * (l1 + l2) * n_out
    rhs[2, 2] = 1.0

    # Divergence-zero on five subtriangles; subtriangle j spans the center
    # and cycle slots j, j+1.  The one skipped is adjacent to the opposite
    # edge and vanishes automatically.
    skipped = (cs + 2) % 6
    row = 3
    for j in range(6):
        if j == skipped:
            continue
        slots = [CENTER_SLOT, j, (j + 1) % 6]
        tri = pts7[slots]
        lengths, normals = outward_normals(tri)
        for i, s in enumerate(slots):
            if s in col_of:
                A[row, col_of[s] : col_of[s] + 2] = -0.5 * lengths[i] * normals[i]
        row += 1

    # Equilibrate rows (nodal rows are O(1), moment and divergence rows are
    # O(edge length)), then refine with extended-precision residuals.  The
    # refinement pushes the true constraint residual of the stored nodal
    # values well below double rounding, which keeps assembled velocity
    # fields divergence free at the audit's round-off level even though the
    # divergence evaluation divides by subtriangle areas.
    row_scale = np.max(np.abs(A), axis=1)
    a_scaled = A / row_scale[:, None]
    b_scaled = rhs / row_scale[:, None]
    try:
        sol = np.linalg.solve(a_scaled, b_scaled)
        a_long = A.astype(np.longdouble)
        b_long = rhs.astype(np.longdouble)
        for _ in range(2):
            r = np.asarray(a_long @ sol.astype(np.longdouble) - b_long,
                           dtype=float)
            sol -= np.linalg.solve(a_scaled, r / row_scale[:, None])
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(
            "local solenoidal constraint system is singular; "
            "split geometry is inconsistent"
        ) from exc

    tables = np.zeros((3, 7, 2))
    for s, c in col_of.items():
        tables[:, s, :] = sol[c : c + 2, :].T

    if check:
        scale = max(1.0, float(np.max(np.abs(sol))))
        n_in = ccw_normal(pts7[cs], pts7[far_in])
        for i in range(3):
            t = tables[i]
            # implied divergence on the skipped subtriangle
            slots = [CENTER_SLOT, skipped, (skipped + 1) % 6]
            div = div_integral(pts7[slots], t[slots])
            # entry-edge moment must reproduce the same value as the exit edge
            m_in = piecewise_moment(
                pts7[cs], pts7[slot_in], pts7[far_in],
                t[cs], t[slot_in], t[far_in], n_in,
            )
            target = 1.0 if i == 2 else 0.0
            if abs(div) > 1e-10 * scale or abs(m_in - target) > 1e-10 * scale:
                raise RuntimeError(
                    "local basis consistency check failed "
                    f"(div={div:.2e}, moment error={m_in - target:.2e})"
                )
    return tables


@dataclass
class LocalBasisFunction:
    """One member of the three-dimensional local solenoidal space at a
    macro vertex: nodal tables per star triangle, zero outside the star."""

    center: int
    kind: int  # 1, 2 or 3: which unit (value_x, value_y, moment) triple
    star: object
    tables: dict  # macro-triangle index -> (7, 2) nodal values

    def center_value(self, ps):
        k = self.star.triangles[0]
        table = ps.tri_table[k]
        slot = int(np.flatnonzero(table == self.center)[0])
        return self.tables[k][slot]

    def star_edge_moment(self, ps, e):
        """Normal moment across star edge e, normal oriented along
        counter-clockwise rotation around the center."""
        mesh = ps.macro
        z = self.center
        w = int(mesh.edges[e, 0] if mesh.edges[e, 1] == z else mesh.edges[e, 1])
        s = ps.singular_vertex(e)
        # either adjacent star triangle gives the same trace
        for k in self.star.triangles:
            table = ps.tri_table[k]
            if s in table:
                t = self.tables[k]
                iz = int(np.flatnonzero(table == z)[0])
                isg = int(np.flatnonzero(table == s)[0])
                iw = int(np.flatnonzero(table == w)[0])
                return piecewise_moment(
                    ps.points[z], ps.points[s], ps.points[w],
                    t[iz], t[isg], t[iw], ccw_normal(ps.points[z], ps.points[w]),
                )
        raise ValueError(f"edge {e} is not a star edge of vertex {z}")


def local_basis(ps: PSMesh, z):
    """The three solenoidal basis functions supported on the star of z."""
    star = vertex_star(ps.macro, z)
    tables = [dict(), dict(), dict()]
    for k in star.triangles:
        table = ps.tri_table[k]
        corner_slot = int(np.flatnonzero(table[:6] == z)[0])
        try:
            local = solve_star_triangle(ps.points[table], corner_slot)
        except RuntimeError as exc:
            raise RuntimeError(f"macro-triangle {k}: {exc}") from exc
        for i in range(3):
            tables[i][k] = local[i]
    return [
        LocalBasisFunction(center=z, kind=i + 1, star=star, tables=tables[i])
        for i in range(3)
    ]


def reference_basis(geom: ReferenceGeometry, j):
    """The three reference functions attached to reference corner j (1-3),
    as (3, 7, 2) nodal tables in the reference cycle layout."""
    if j not in (1, 2, 3):
        raise ValueError("reference corner index must be 1, 2 or 3")
    pts7 = reference_points(geom)
    return solve_star_triangle(pts7, corner_slot=2 * (j - 1))


def reference_points(geom: ReferenceGeometry):
    """Seven reference points in cycle layout starting at corner (0, 0)."""
    pts7 = np.empty((7, 2))
    pts7[0] = (0.0, 0.0)
    pts7[1] = geom.ref_singular[1]  # on the y=0 edge
    pts7[2] = (1.0, 0.0)
    pts7[3] = geom.ref_singular[2]  # on the hypotenuse
    pts7[4] = (0.0, 1.0)
    pts7[5] = geom.ref_singular[0]  # on the x=0 edge
    pts7[6] = geom.ref_center
    return pts7


def piola_push(geom: ReferenceGeometry, ref_values):
    """Map reference nodal values to physical ones: v = J vhat / |det J|."""
    ref_values = np.asarray(ref_values, dtype=float)
    return ref_values @ geom.jacobian.T / abs(geom.det)


def combine_reference(geom: ReferenceGeometry, ps: PSMesh, z):
    """Physical local basis on one macro-triangle built from the reference
    functions; agrees with the direct constraint solve.

    The value functions mix under the chart: with (a_i, b_i) =
    |det J| J^{-1} e_i, function i (i = 1, 2) is a_i and b_i times the
    pushed reference value functions; the moment function pushes straight
    through because the Piola map preserves edge normal moments.
    """
    tri = ps.macro.triangles[geom.tri].tolist()
    local = tri.index(z)
    ref = reference_basis(geom, local + 1)
    pushed = np.stack([piola_push(geom, ref[i]) for i in range(3)])

    out = np.empty_like(pushed)
    for i in range(2):
        a, b = abs(geom.det) * (geom.jacobian_inv @ np.eye(2)[i])
        out[i] = a * pushed[0] + b * pushed[1]
    out[2] = pushed[2]

    # reference layout starts at stored corner 0; rotate into the
    # tri_table layout, which starts at the smallest-index corner
    r = int(np.argmin(tri))
    rot = [(s + 2 * r) % 6 for s in range(6)] + [CENTER_SLOT]
    return out[:, rot, :]


@dataclass
class VelocityBasis:
    """Global solenoidal bases of the velocity space.

    The full basis holds three functions per macro vertex minus the one
    excluded moment function at the designated exterior vertex ``z0``; the
    interior basis keeps only functions centered at interior vertices.
    ``tri_tables[k]`` stacks the nodal tables of the nine local functions
    of macro-triangle k (corner cycle position p = 0, 1, 2 and kind i give
    row 3 p + i - 1); ``tri_dofs`` / ``tri_interior_dofs`` map those rows
    to global unknowns, -1 where a function is excluded.
    """

    ps: PSMesh
    z0: int
    functions: dict
    dof_of: dict
    pairs: list
    interior_dof_of: dict
    interior_pairs: list
    tri_tables: np.ndarray
    tri_dofs: np.ndarray
    tri_interior_dofs: np.ndarray
    _counts: np.ndarray = field(repr=False, default=None)
    _tables_long: np.ndarray = field(repr=False, default=None)

    @property
    def n_dofs(self):
        return len(self.pairs)

    @property
    def n_interior_dofs(self):
        return len(self.interior_pairs)

    def function(self, z, i):
        return self.functions[(z, i)]

    def point_multiplicity(self):
        """How many macro-triangle tables cover each split point."""
        if self._counts is None:
            counts = np.zeros(self.ps.n_split_vertices, dtype=int)
            np.add.at(counts, self.ps.tri_table.ravel(), 1)
            self._counts = counts
        return self._counts

    def nodal_values(self, coeffs, interior=False):
        """Expand a coefficient vector into the (n_split, 2) nodal field.

        The moment-kind functions scale like one over the mesh size while
        their coefficients carry stream-function values, so the expansion
        cancels terms far larger than the result; accumulating in extended
        precision keeps the rounded field divergence free at the level of
        its final representation.
        """
        dofs = self.tri_interior_dofs if interior else self.tri_dofs
        if self._tables_long is None:
            self._tables_long = self.tri_tables.astype(np.longdouble)
        coeffs = np.asarray(coeffs).astype(np.longdouble)
        local = np.where(dofs >= 0, coeffs[np.clip(dofs, 0, None)],
                         np.longdouble(0.0))
        per_tri = np.einsum("kr,krsc->ksc", local, self._tables_long)
        out = np.zeros((self.ps.n_split_vertices, 2), dtype=np.longdouble)
        np.add.at(out, self.ps.tri_table.ravel(), per_tri.reshape(-1, 2))
        out /= self.point_multiplicity()[:, None]
        return out.astype(float)

    def nodal_matrix(self, interior=False):
        """Dense (n_basis, 2 n_split) matrix of nodal values; small meshes
        only, used for rank checks."""
        n = self.n_interior_dofs if interior else self.n_dofs
        rows = np.empty((n, 2 * self.ps.n_split_vertices))
        for d in range(n):
            c = np.zeros(n)
            c[d] = 1.0
            rows[d] = self.nodal_values(c, interior=interior).ravel()
        return rows

    def dump_csv(self, path):
        """Debug dump: one row per stored nodal value."""
        with open(path, "w") as f:
            f.write("dof,macro_triangle,point_id,vx,vy\n")
            for k in range(self.ps.macro.n_triangles):
                for row in range(9):
                    d = self.tri_dofs[k, row]
                    if d < 0:
                        continue
                    for slot in range(7):
                        p = self.ps.tri_table[k, slot]
                        vx, vy = self.tri_tables[k, row, slot]
                        f.write(f"{d},{k},{p},{vx!r},{vy!r}\n")


def global_basis(ps: PSMesh, z0=None) -> VelocityBasis:
    """Assemble the global solenoidal bases from the per-vertex local ones."""
    mesh = ps.macro
    if z0 is None:
        z0 = int(mesh.exterior_vertices[0])
    if not mesh.vertex_is_boundary[z0]:
        raise ValueError(f"z0={z0} must be an exterior (boundary) vertex")

    functions = {}
    pairs = []
    interior_pairs = []
    for z in range(mesh.n_vertices):
        for fn in local_basis(ps, z):
            functions[(z, fn.kind)] = fn
            if (z, fn.kind) == (z0, 3):
                continue  # the one excluded moment function
            pairs.append((z, fn.kind))
            if not mesh.vertex_is_boundary[z]:
                interior_pairs.append((z, fn.kind))

    dof_of = {pair: d for d, pair in enumerate(pairs)}
    interior_dof_of = {pair: d for d, pair in enumerate(interior_pairs)}

    nt = mesh.n_triangles
    tri_tables = np.zeros((nt, 9, 7, 2))
    tri_dofs = np.full((nt, 9), -1, dtype=int)
    tri_interior_dofs = np.full((nt, 9), -1, dtype=int)
    for (z, i), fn in functions.items():
        for k, table in fn.tables.items():
            corners = ps.tri_table[k][[0, 2, 4]].tolist()
            row = 3 * corners.index(z) + (i - 1)
            tri_tables[k, row] = table
            if (z, i) in dof_of:
                tri_dofs[k, row] = dof_of[(z, i)]
            if (z, i) in interior_dof_of:
                tri_interior_dofs[k, row] = interior_dof_of[(z, i)]

    return VelocityBasis(
        ps=ps,
        z0=z0,
        functions=functions,
        dof_of=dof_of,
        pairs=pairs,
        interior_dof_of=interior_dof_of,
        interior_pairs=interior_pairs,
        tri_tables=tri_tables,
        tri_dofs=tri_dofs,
        tri_interior_dofs=tri_interior_dofs,
    )


GAUSS_X, GAUSS_W = np.polynomial.legendre.leggauss(8)


def segment_quadrature(f, a, b, x=GAUSS_X, w=GAUSS_W):
    """Integral of a vector function along the segment a -> b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * np.linalg.norm(b - a)
    pts = 0.5 * (1 - x)[:, None] * a + 0.5 * (1 + x)[:, None] * b
    vals = np.asarray([f(p) for p in pts], dtype=float)
    return half * np.einsum("q,q...->...", w, vals)


def boundary_edge_flux(ps, g, tail, head):
    """Integral of g . n over the boundary macro edge tail -> head traversed
    counter-clockwise, n the outward unit normal.

    Integrates separately on the two halves cut by the singular vertex, so
    traces of the velocity space (piecewise linear with a kink there) are
    integrated exactly.
    """
    mesh = ps.macro
    a = mesh.vertices[tail]
    b = mesh.vertices[head]
    key = (tail, head) if tail < head else (head, tail)
    s = ps.points[ps.singular_vertex(mesh.edge_index[key])]
    t = (b - a) / np.linalg.norm(b - a)
    n_out = np.array([t[1], -t[0]])  # domain lies left of the traversal

    def flux(p):
        return np.dot(g(p), n_out)

    return float(segment_quadrature(flux, a, s) + segment_quadrature(flux, s, b))


@dataclass
class BoundaryInterpolant:
    """Coefficients of the solenoidal interpolant of boundary data.

    Nodal coefficients reproduce the data at exterior macro vertices; the
    moment coefficients are obtained by forward substitution around the
    boundary cycle so that every exterior edge carries the correct normal
    flux.  The coefficient at the start vertex of the cycle is zero by
    convention.
    """

    basis: VelocityBasis
    cycle: list
    coeffs: dict  # (vertex, i) -> float

    def coefficient_vector(self, dtype=np.longdouble):
        """Coefficients over the full basis; extended precision by default
        because the moment coefficients are consumed in a cancelling
        expansion (see VelocityBasis.nodal_values)."""
        c = np.zeros(self.basis.n_dofs, dtype=dtype)
        for pair, val in self.coeffs.items():
            d = self.basis.dof_of.get(pair)
            if d is not None:
                c[d] = val
        return c

    def nodal_values(self):
        return self.basis.nodal_values(self.coefficient_vector())


def interpolate_boundary(ps: PSMesh, basis: VelocityBasis, g,
                         compat_rtol=1e-8) -> BoundaryInterpolant:
    """Interpolate boundary data g into the trace of the solenoidal space.

    Raises ValueError when the net boundary flux of g exceeds
    ``compat_rtol * perimeter * max|g|``: such data cannot be matched by a
    divergence-free field.
    """
    mesh = ps.macro
    cycle = mesh.boundary_cycle()
    start = cycle.index(basis.z0)
    cycle = cycle[start:] + cycle[:start]
    m = len(cycle)

    fluxes = np.empty(m)
    gmax = 0.0
    perimeter = 0.0
    for k in range(m):
        tail, head = cycle[k - 1], cycle[k]
        fluxes[k] = boundary_edge_flux(ps, g, tail, head)
        a, b = mesh.vertices[tail], mesh.vertices[head]
        perimeter += np.linalg.norm(b - a)
        gmax = max(gmax, np.max(np.abs(g(a))), np.max(np.abs(g(0.5 * (a + b)))))
    total = float(fluxes.sum())
    if abs(total) > compat_rtol * perimeter * max(gmax, 1e-30):
        raise ValueError(
            f"boundary data is not compatible: net flux {total:.3e} "
            "(a solenoidal field must have zero net boundary flux)"
        )

    coeffs = {}
    for z in cycle:
        gz = np.asarray(g(mesh.vertices[z]), dtype=float)
        coeffs[(z, 1)] = float(gz[0])
        coeffs[(z, 2)] = float(gz[1])

    # Moments: on the edge from cycle[k-1] to cycle[k] the flux of the
    # expansion reduces to the two moment coefficients, each weighted by
    # the alignment of the outward normal with its own counter-clockwise
    # rotation normal.
    coeffs[(cycle[0], 3)] = 0.0
    for k in range(1, m):
        tail, head = cycle[k - 1], cycle[k]
        a, b = mesh.vertices[tail], mesh.vertices[head]
        t = (b - a) / np.linalg.norm(b - a)
        n_out = np.array([t[1], -t[0]])
        s_tail = float(np.dot(n_out, ccw_normal(a, b)))
        s_head = float(np.dot(n_out, ccw_normal(b, a)))
        coeffs[(head, 3)] = (fluxes[k] - s_tail * coeffs[(tail, 3)]) / s_head
    return BoundaryInterpolant(basis=basis, cycle=cycle, coeffs=coeffs)


def alternating_sum(ps: PSMesh, cellwise, z):
    """Alternating sum of a per-subtriangle quantity over the subtriangles
    meeting at singular vertex z, taken in cyclic order around z.

    Vanishes for the divergence of any continuous piecewise-linear field
    that is zero on the domain boundary.
    """
    if ps.singular_edge(z) is None:
        raise ValueError(f"split vertex {z} is not a singular vertex")
    tris = ps.point_subtris[z]
    centroids = np.array([ps.subtri_points(t).mean(axis=0) for t in tris])
    rel = centroids - ps.points[z]
    order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]))
    signs = np.array([1.0, -1.0] * (len(tris) // 2))
    return float(np.dot(signs, np.asarray(cellwise)[np.asarray(tris)[order]]))
