"""Assembly and solution of the velocity, pressure and saddle-point systems.

The solenoidal route solves two symmetric positive-definite systems: the
velocity system over the interior solenoidal basis, then (optionally) a
Gram system in the divergence basis for the pressure.  The classical
saddle-point route assembles the usual indefinite block system over the
nodal velocity basis at interior split vertices and the same divergence
basis for pressure; it is kept as a reference and benchmark.

Stiffness entries are integrated exactly (gradients are constant per
subtriangle); only data terms and error norms use quadrature.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ps_split import PSMesh, subtri_shape_gradients
from .pressure_basis import PressureBasis, divergence_field
from .velocity_basis import BoundaryInterpolant, VelocityBasis

DIRECT_DIMENSION_LIMIT = 50_000


@dataclass
class QuadratureRule:
    """Barycentric quadrature rule on a triangle; weights sum to one so the
    integral is the area times the weighted sum of point values."""

    points: np.ndarray   # (nq, 3)
    weights: np.ndarray  # (nq,)
    degree: int

    def physical_points(self, corners):
        """Map to physical coordinates; corners (..., 3, 2)."""
        return np.einsum("qm,...mx->...qx", self.points, corners)


def _degree4_rule():
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    pts = []
    wts = []
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [(b, a, a), (a, b, a), (a, a, b)]
        wts += [w, w, w]
    return QuadratureRule(points=np.array(pts), weights=np.array(wts), degree=4)


DEGREE4 = _degree4_rule()


def monomial_integral(p, q):
    """Exact integral of x^p y^q over the reference triangle."""
    from math import factorial

    return factorial(p) * factorial(q) / factorial(p + q + 2)


def verify_quadrature(rule=DEGREE4, tol=1e-12):
    """Weights sum to one and monomials integrate exactly up to the
    declared degree; returns the worst relative error."""
    worst = abs(float(rule.weights.sum()) - 1.0)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    x = rule.physical_points(corners)
    for p in range(rule.degree + 1):
        for q in range(rule.degree + 1 - p):
            approx = 0.5 * float(rule.weights @ (x[:, 0] ** p * x[:, 1] ** q))
            exact = monomial_integral(p, q)
            worst = max(worst, abs(approx - exact) / exact)
    if worst > tol:
        raise RuntimeError(f"quadrature rule fails its exactness check ({worst:.2e})")
    return worst


@dataclass
class SparseSymSystem:
    """A symmetric sparse linear system with its expected definiteness."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    spd: bool
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def symmetry_error(self):
        d = self.matrix - self.matrix.T
        if d.nnz == 0:
            return 0.0
        return float(np.max(np.abs(d.data)))

    def check_symmetry(self, rtol=1e-12):
        scale = max(float(np.max(np.abs(self.matrix.data))), 1e-300)
        err = self.symmetry_error()
        if err > rtol * scale:
            raise RuntimeError(
                f"{self.label or 'system'} is not symmetric "
                f"(max asymmetry {err:.2e} vs scale {scale:.2e})"
            )
        return err / scale


def nodal_gradients(ps: PSMesh, nodal):
    """Constant gradient per subtriangle of a nodal 2-vector field;
    result[t, c, x] is the x-derivative of component c."""
    _, grads = subtri_shape_gradients(ps)
    vals = np.asarray(nodal)[ps.subtris]
    return np.einsum("tmc,tmx->tcx", vals, grads)


# ---------------------------------------------------------------------------
# solenoidal (SOL) velocity system
# ---------------------------------------------------------------------------

def _local_stiffness(ps, basis, nu):
    """Exact per-macro-triangle 9x9 stiffness blocks over the local basis."""
    areas, grads = subtri_shape_gradients(ps)
    nt = ps.macro.n_triangles
    areas6 = areas.reshape(nt, 6)
    grads6 = grads.reshape(nt, 6, 3, 2)
    local = np.zeros((nt, 9, 9))
    for j in range(6):
        slots = [6, j, (j + 1) % 6]
        tbl = basis.tri_tables[:, :, slots, :]  # (nt, 9, 3, 2)
        g = np.einsum("krmc,kmx->krcx", tbl, grads6[:, j])
        local += np.einsum("krcx,kscx,k->krs", g, g, areas6[:, j])
    return nu * local


def _scatter_symmetric(local, dof_rows, n):
    """Accumulate (nt, 9, 9) blocks into an n x n sparse matrix following
    per-triangle DOF maps with -1 for inactive rows."""
    rows = np.repeat(dof_rows[:, :, None], 9, axis=2)
    cols = np.repeat(dof_rows[:, None, :], 9, axis=1)
    mask = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix(
        (local[mask], (rows[mask], cols[mask])), shape=(n, n)
    ).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_load(ps: PSMesh, basis: VelocityBasis, f, rule=DEGREE4):
    """Load vector (f, phi) over the full solenoidal basis; f is a
    vectorized callable mapping (..., 2) points to (..., 2) values."""
    areas, _ = subtri_shape_gradients(ps)
    nt = ps.macro.n_triangles
    corners = ps.points[ps.subtris]
    x = rule.physical_points(corners)                     # (n_sub, nq, 2)
    fvals = np.asarray(f(x), dtype=float).reshape(x.shape)
    fvals6 = fvals.reshape(nt, 6, -1, 2)
    areas6 = areas.reshape(nt, 6)

    out = np.zeros(basis.n_dofs)
    lam = rule.points
    w = rule.weights
    for j in range(6):
        slots = [6, j, (j + 1) % 6]
        tbl = basis.tri_tables[:, :, slots, :]
        phi = np.einsum("qm,krmc->kqrc", lam, tbl)
        bloc = np.einsum("q,kqc,kqrc,k->kr", w, fvals6[:, j], phi, areas6[:, j])
        valid = basis.tri_dofs >= 0
        np.add.at(out, basis.tri_dofs[valid], bloc[valid])
    return out


def assemble_velocity(ps: PSMesh, basis: VelocityBasis, f,
                      gh: BoundaryInterpolant, nu, rule=DEGREE4):
    """The SPD system for the interior solenoidal velocity coefficients.

    Matrix entries are nu (grad phi_j, grad phi_i) over the interior basis;
    the right side carries the body force and the boundary-lift term
    -nu (grad G_h, grad phi_i).
    """
    t0 = time.perf_counter()
    local = _local_stiffness(ps, basis, nu)
    full = _scatter_symmetric(local, basis.tri_dofs, basis.n_dofs)

    load = assemble_load(ps, basis, f, rule=rule)
    c_gh = gh.coefficient_vector(dtype=float)
    rhs_full = load - full @ c_gh

    interior = np.array(
        [basis.dof_of[pair] for pair in basis.interior_pairs], dtype=int
    )
    matrix = full[interior][:, interior].tocsr()
    rhs = rhs_full[interior]
    elapsed = time.perf_counter() - t0
    return SparseSymSystem(
        matrix=matrix, rhs=rhs, spd=True, label="sol-velocity",
        meta={"t_assemble": elapsed, "full_matrix": full, "interior": interior},
    )


# ---------------------------------------------------------------------------
# SOL pressure system
# ---------------------------------------------------------------------------

def divergence_matrix(ps: PSMesh, pbasis: PressureBasis):
    """Sparse (n_members, n_subtris) matrix of member divergence fields."""
    rows, cols, data = [], [], []
    _, grads = subtri_shape_gradients(ps)
    for i, m in enumerate(pbasis.members):
        d = np.asarray(m.direction)
        for t in ps.point_subtris[m.vertex]:
            corner = int(np.flatnonzero(ps.subtris[t] == m.vertex)[0])
            rows.append(i)
            cols.append(t)
            data.append(float(d @ grads[t, corner]))
    return sp.coo_matrix(
        (data, (rows, cols)), shape=(pbasis.n_members, ps.n_subtris)
    ).tocsr()


def assemble_pressure(ps: PSMesh, pbasis: PressureBasis, u_nodal, f, nu,
                      rule=DEGREE4):
    """Gram system in the divergence basis recovering the pressure from an
    already computed velocity field."""
    t0 = time.perf_counter()
    areas, grads = subtri_shape_gradients(ps)
    q_mat = divergence_matrix(ps, pbasis)
    gram = (q_mat.multiply(areas[None, :]) @ q_mat.T).tocsr()

    # r_i = nu (grad u_h, grad s_i) - (f, s_i), both supported on a few
    # subtriangles per member
    ugrad = nodal_gradients(ps, u_nodal)
    corners = ps.points[ps.subtris]
    x = rule.physical_points(corners)
    fvals = np.asarray(f(x), dtype=float).reshape(x.shape)
    # per-subtriangle, per-corner weighted force moments against the hats
    fmom = np.einsum("q,qm,tqc,t->tmc", rule.weights, rule.points, fvals, areas)

    rhs = np.empty(pbasis.n_members)
    for i, m in enumerate(pbasis.members):
        d = np.asarray(m.direction)
        acc = 0.0
        for t in ps.point_subtris[m.vertex]:
            corner = int(np.flatnonzero(ps.subtris[t] == m.vertex)[0])
            acc += nu * areas[t] * float(d @ ugrad[t] @ grads[t, corner])
            acc -= float(d @ fmom[t, corner])
        rhs[i] = acc
    elapsed = time.perf_counter() - t0
    return SparseSymSystem(
        matrix=gram, rhs=rhs, spd=True, label="sol-pressure",
        meta={"t_assemble": elapsed, "divergence_matrix": q_mat},
    )


# ---------------------------------------------------------------------------
# saddle-point (SP) system
# ---------------------------------------------------------------------------

def scalar_p1_stiffness(ps: PSMesh):
    """Scalar piecewise-linear stiffness matrix over all split vertices."""
    areas, grads = subtri_shape_gradients(ps)
    local = np.einsum("tmx,tnx,t->tmn", grads, grads, areas)
    rows = np.repeat(ps.subtris[:, :, None], 3, axis=2).ravel()
    cols = np.repeat(ps.subtris[:, None, :], 3, axis=1).ravel()
    n = ps.n_split_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_saddle_point(ps: PSMesh, pbasis: PressureBasis, f,
                          gh: BoundaryInterpolant, nu, rule=DEGREE4):
    """The symmetric indefinite block system of the mixed formulation.

    Velocity unknowns are nodal values at interior split vertices
    (x-component then y-component per vertex); pressure unknowns are the
    coefficients in the divergence basis.  The assembled block form is
    [[A, D.T], [D, 0]] with D the divergence pairing, so the multiplier
    equals minus the pressure.
    """
    t0 = time.perf_counter()
    interior = ps.interior_split_vertices()
    pos = -np.ones(ps.n_split_vertices, dtype=int)
    pos[interior] = np.arange(len(interior))
    nvdof = 2 * len(interior)

    a_scalar = scalar_p1_stiffness(ps)[interior][:, interior]
    a_block = nu * sp.kron(a_scalar, sp.eye(2), format="csr")

    areas, grads = subtri_shape_gradients(ps)
    # divergence pairing: rows over subtriangles, columns over velocity dofs
    rows, cols, data = [], [], []
    for corner in range(3):
        verts = ps.subtris[:, corner]
        keep = pos[verts] >= 0
        t_idx = np.flatnonzero(keep)
        for c in range(2):
            rows.extend(t_idx.tolist())
            cols.extend((2 * pos[verts[keep]] + c).tolist())
            data.extend((areas[keep] * grads[keep, corner, c]).tolist())
    div_pairing = sp.coo_matrix(
        (data, (rows, cols)), shape=(ps.n_subtris, nvdof)
    ).tocsr()
    q_mat = divergence_matrix(ps, pbasis)
    d_block = (q_mat @ div_pairing).tocsr()

    matrix = sp.bmat(
        [[a_block, d_block.T], [d_block, None]], format="csr"
    )

    # right side: (f, v) - nu (grad G_h, grad v) on velocity rows
    corners = ps.points[ps.subtris]
    x = rule.physical_points(corners)
    fvals = np.asarray(f(x), dtype=float).reshape(x.shape)
    fmom = np.einsum("q,qm,tqc,t->tmc", rule.weights, rule.points, fvals, areas)
    gh_nodal = gh.nodal_values()
    ggrad = nodal_gradients(ps, gh_nodal)
    lift = np.einsum("tcx,tmx,t->tmc", ggrad, grads, areas)

    rhs_v = np.zeros(nvdof)
    for corner in range(3):
        verts = ps.subtris[:, corner]
        keep = pos[verts] >= 0
        for c in range(2):
            np.add.at(rhs_v, 2 * pos[verts[keep]] + c,
                      fmom[keep, corner, c] - nu * lift[keep, corner, c])
    rhs = np.concatenate([rhs_v, np.zeros(pbasis.n_members)])
    elapsed = time.perf_counter() - t0
    return SparseSymSystem(
        matrix=matrix, rhs=rhs, spd=False, label="saddle-point",
        meta={
            "t_assemble": elapsed,
            "interior_split_vertices": interior,
            "n_velocity_dofs": nvdof,
            "divergence_matrix": q_mat,
            "gh_nodal": gh_nodal,
        },
    )


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def solve(system: SparseSymSystem, method=None, rtol=1e-12):
    """Solve the assembled system; returns (x, info).

    SPD systems take a sparse direct factorization up to a size cutoff and
    diagonally preconditioned conjugate gradients beyond it; indefinite
    systems always use the direct factorization.  The relative residual is
    always computed and reported.
    """
    if method is None:
        if system.spd and system.dimension > DIRECT_DIMENSION_LIMIT:
            method = "cg"
        else:
            method = "direct"
    t0 = time.perf_counter()
    a = system.matrix
    b = system.rhs
    if method == "direct":
        x = spla.splu(a.tocsc()).solve(b)
    elif method == "cg":
        if not system.spd:
            raise ValueError("conjugate gradients require an SPD system")
        diag = a.diagonal()
        precond = spla.LinearOperator(a.shape, matvec=lambda v: v / diag)
        x, code = spla.cg(a, b, rtol=rtol, atol=0.0, M=precond,
                          maxiter=20 * system.dimension)
        if code != 0:
            raise RuntimeError(
                f"conjugate gradients failed to converge (code {code})"
            )
    else:
        raise ValueError(f"unknown solver method {method!r}")
    elapsed = time.perf_counter() - t0

    bnorm = float(np.linalg.norm(b))
    residual = float(np.linalg.norm(a @ x - b)) / max(bnorm, 1e-300)
    info = {"method": method, "residual": residual, "t_solve": elapsed}
    system.meta.setdefault("solves", []).append(info)
    return x, info


def cholesky_certify(system: SparseSymSystem, dense_limit=6000):
    """Dense Cholesky factorization as an SPD certificate; raises
    numpy.linalg.LinAlgError on any pivot breakdown."""
    if system.dimension > dense_limit:
        raise ValueError(
            f"dimension {system.dimension} too large for the dense certificate"
        )
    np.linalg.cholesky(system.matrix.toarray())
    return True


def condition_estimate(system, dense_limit=3000):
    """2-norm condition number estimate, within a factor of two.

    Dense singular values below the size cutoff; Lanczos extremal
    eigenvalues (the matrices are symmetric) above it.
    """
    a = system.matrix if isinstance(system, SparseSymSystem) else system
    n = a.shape[0]
    if n <= dense_limit:
        return float(np.linalg.cond(a.toarray(), 2))
    top = spla.eigsh(a, k=1, which="LM", return_eigenvectors=False,
                     tol=1e-8)
    bottom = spla.eigsh(a, k=1, sigma=0.0, which="LM",
                        return_eigenvectors=False, tol=1e-8)
    return float(abs(top[0]) / abs(bottom[0]))


# ---------------------------------------------------------------------------
# solution container and post-processing
# ---------------------------------------------------------------------------

@dataclass
class Solution:
    """A computed Stokes state: interior solenoidal coefficients plus the
    boundary interpolant, with optional pressure."""

    ps: PSMesh
    basis: VelocityBasis
    boundary: BoundaryInterpolant
    w_coeffs: np.ndarray
    u_nodal: np.ndarray
    p_values: np.ndarray | None = None
    p_coeffs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    _finder: object = field(default=None, repr=False)

    def _tri_finder(self):
        if self._finder is None:
            import matplotlib.tri as mtri

            t = mtri.Triangulation(self.ps.points[:, 0], self.ps.points[:, 1],
                                   self.ps.subtris)
            self._finder = (t, t.get_trifinder())
        return self._finder

    def velocity_at(self, pts):
        """Evaluate the velocity field at arbitrary points of the domain."""
        tri, finder = self._tri_finder()
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        t = finder(pts[:, 0], pts[:, 1])
        if np.any(t < 0):
            raise ValueError("point outside the mesh")
        corners = self.ps.subtris[t]
        p = self.ps.points[corners]
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        d = pts - p[:, 0]
        l1 = (d[:, 0] * v1[:, 1] - d[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * d[:, 1] - v0[:, 1] * d[:, 0]) / det
        lam = np.stack([1.0 - l1 - l2, l1, l2], axis=1)
        return np.einsum("nm,nmc->nc", lam, self.u_nodal[corners])

    def pressure_at(self, pts):
        if self.p_values is None:
            raise ValueError("pressure was not computed for this solution")
        _, finder = self._tri_finder()
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        t = finder(pts[:, 0], pts[:, 1])
        if np.any(t < 0):
            raise ValueError("point outside the mesh")
        return self.p_values[t]


def divergence_audit(ps: PSMesh, u_nodal):
    """Largest per-subtriangle constant divergence magnitude."""
    from .ps_split import nodal_divergence

    return float(np.max(np.abs(nodal_divergence(ps, u_nodal))))


def gradient_scale(ps: PSMesh, u_nodal):
    """Largest gradient entry, the natural scale for divergence audits."""
    return float(np.max(np.abs(nodal_gradients(ps, u_nodal))))


def error_norms(ps: PSMesh, u_nodal, exact_u, exact_grad_u,
                p_values=None, exact_p=None, rule=DEGREE4):
    """L2 and H1 velocity errors and, when a pressure is supplied, the L2
    pressure error, all by per-subtriangle quadrature."""
    areas, _ = subtri_shape_gradients(ps)
    corners = ps.points[ps.subtris]
    x = rule.physical_points(corners)           # (n_sub, nq, 2)
    w = rule.weights

    uh = np.einsum("qm,tmc->tqc", rule.points, np.asarray(u_nodal)[ps.subtris])
    du = np.asarray(exact_u(x), dtype=float).reshape(x.shape) - uh
    l2_sq = float(np.einsum("q,tqc,tqc,t->", w, du, du, areas))

    gh = nodal_gradients(ps, u_nodal)
    ge = np.asarray(exact_grad_u(x), dtype=float).reshape(x.shape + (2,))
    dg = ge - gh[:, None, :, :]
    semi_sq = float(np.einsum("q,tqcx,tqcx,t->", w, dg, dg, areas))

    l2_u = np.sqrt(l2_sq)
    h1_u = np.sqrt(l2_sq + semi_sq)
    if p_values is None or exact_p is None:
        return l2_u, h1_u, None
    pe = np.asarray(exact_p(x), dtype=float).reshape(x.shape[:2])
    dp = pe - np.asarray(p_values)[:, None]
    l2_p = float(np.sqrt(np.einsum("q,tq,tq,t->", w, dp, dp, areas)))
    return l2_u, h1_u, l2_p


def galerkin_residual(system: SparseSymSystem, x):
    """Worst equation residual of the solved system, relative to the
    matrix and data scale."""
    r = system.matrix @ x - system.rhs
    scale = max(
        float(np.max(np.abs(system.rhs))),
        float(np.max(np.abs(system.matrix.data))) * max(float(np.max(np.abs(x))), 1.0),
    )
    return float(np.max(np.abs(r))) / max(scale, 1e-300)


# ---------------------------------------------------------------------------
# end-to-end drivers
# ---------------------------------------------------------------------------

def solve_stokes(ps: PSMesh, f, g, nu=1.0, with_pressure=False,
                 pbasis: PressureBasis | None = None, method=None) -> Solution:
    """SOL route: interpolate the boundary data, solve the SPD velocity
    system, optionally recover the pressure from its Gram system."""
    from .velocity_basis import global_basis, interpolate_boundary

    t0 = time.perf_counter()
    basis = global_basis(ps)
    gh = interpolate_boundary(ps, basis, g)
    system = assemble_velocity(ps, basis, f, gh, nu)
    t_assemble = time.perf_counter() - t0

    w, info = solve(system, method=method)
    u_nodal = basis.nodal_values(w, interior=True) + gh.nodal_values()

    sol = Solution(
        ps=ps, basis=basis, boundary=gh, w_coeffs=w, u_nodal=u_nodal,
        meta={
            "t_assemble": t_assemble,
            "t_solve": info["t_solve"],
            "residual": info["residual"],
            "system": system,
        },
    )
    if with_pressure:
        if pbasis is None:
            from .pressure_basis import build_pressure_basis, kruskal_tree

            pbasis = build_pressure_basis(ps, kruskal_tree(ps, basis.z0))
        t0 = time.perf_counter()
        psys = assemble_pressure(ps, pbasis, u_nodal, f, nu)
        tp_assemble = time.perf_counter() - t0
        p, pinfo = solve(psys, method=method)
        q_mat = psys.meta["divergence_matrix"]
        sol.p_coeffs = p
        sol.p_values = np.asarray(q_mat.T @ p).ravel()
        sol.meta.update({
            "pressure_system": psys,
            "t_assemble_pressure": tp_assemble,
            "t_solve_pressure": pinfo["t_solve"],
            "pbasis": pbasis,
        })
    return sol


def solve_saddle_point_stokes(ps: PSMesh, f, g, nu=1.0,
                              pbasis: PressureBasis | None = None):
    """SP route: one indefinite solve for velocity and pressure together.

    Returns (u_nodal, p_values, meta).
    """
    from .pressure_basis import build_pressure_basis, kruskal_tree
    from .velocity_basis import global_basis, interpolate_boundary

    t0 = time.perf_counter()
    basis = global_basis(ps)
    gh = interpolate_boundary(ps, basis, g)
    if pbasis is None:
        pbasis = build_pressure_basis(ps, kruskal_tree(ps, basis.z0))
    system = assemble_saddle_point(ps, pbasis, f, gh, nu)
    t_assemble = time.perf_counter() - t0

    x, info = solve(system)
    nv = system.meta["n_velocity_dofs"]
    interior = system.meta["interior_split_vertices"]
    w_nodal = np.zeros((ps.n_split_vertices, 2))
    w_nodal[interior] = x[:nv].reshape(-1, 2)
    u_nodal = w_nodal + system.meta["gh_nodal"]
    # the block system solves for minus the pressure (see assembly docstring)
    p_coeffs = -x[nv:]
    q_mat = system.meta["divergence_matrix"]
    p_values = np.asarray(q_mat.T @ p_coeffs).ravel()
    meta = {
        "t_assemble": t_assemble,
        "t_solve": info["t_solve"],
        "residual": info["residual"],
        "system": system,
        "basis": basis,
        "boundary": gh,
        "pbasis": pbasis,
        "w_nodal": w_nodal,
    }
    return u_nodal, p_values, meta
