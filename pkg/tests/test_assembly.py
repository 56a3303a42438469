import numpy as np
import pytest
import scipy.sparse as sp

from psstokes import manufactured
from psstokes.assembly import (
    DEGREE4,
    SparseSymSystem,
    assemble_pressure,
    assemble_saddle_point,
    assemble_velocity,
    cholesky_certify,
    condition_estimate,
    divergence_audit,
    error_norms,
    galerkin_residual,
    gradient_scale,
    monomial_integral,
    nodal_gradients,
    solve,
    solve_saddle_point_stokes,
    solve_stokes,
    verify_quadrature,
)
from psstokes.macro_mesh import generate_structured
from psstokes.ps_split import split
from psstokes.pressure_basis import build_pressure_basis, kruskal_tree
from psstokes.velocity_basis import (
    alternating_sum,
    global_basis,
    interpolate_boundary,
)


def zero_field(p):
    return np.zeros(np.asarray(p).shape)


@pytest.fixture(scope="module")
def problem2():
    ps = split(generate_structured(2))
    basis = global_basis(ps)
    f = manufactured.body_force(1.0)
    gh = interpolate_boundary(ps, basis, manufactured.boundary_velocity)
    return ps, basis, f, gh


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def test_quadrature_weights_and_exactness():
    assert verify_quadrature(DEGREE4) < 1e-12
    assert abs(float(DEGREE4.weights.sum()) - 1.0) < 1e-12


def test_monomial_oracle_values():
    assert monomial_integral(0, 0) == pytest.approx(0.5)
    assert monomial_integral(1, 0) == pytest.approx(1 / 6)
    assert monomial_integral(2, 2) == pytest.approx(4 / 720)


# ---------------------------------------------------------------------------
# SOL velocity system
# ---------------------------------------------------------------------------

def test_homogeneous_problem_is_zero():
    ps = split(generate_structured(2))
    sol = solve_stokes(ps, zero_field, lambda p: np.zeros(2), nu=1.0)
    assert np.max(np.abs(sol.w_coeffs)) < 1e-14
    assert np.max(np.abs(sol.u_nodal)) < 1e-14


def test_velocity_system_symmetry(problem2):
    ps, basis, f, gh = problem2
    system = assemble_velocity(ps, basis, f, gh, nu=1.0)
    assert system.check_symmetry(1e-12) < 1e-12
    assert system.dimension == basis.n_interior_dofs


def test_velocity_system_positive_definite(problem2):
    ps, basis, f, gh = problem2
    system = assemble_velocity(ps, basis, f, gh, nu=1.0)
    eigs = np.linalg.eigvalsh(system.matrix.toarray())
    assert eigs.min() > 0
    assert cholesky_certify(system)


def test_solve_identity():
    rhs = np.array([1.0, -2.0, 3.0])
    system = SparseSymSystem(matrix=sp.eye(3, format="csr"), rhs=rhs, spd=True)
    x, info = solve(system)
    np.testing.assert_allclose(x, rhs)
    assert info["residual"] < 1e-15


def test_cg_and_direct_agree(problem2):
    ps, basis, f, gh = problem2
    system = assemble_velocity(ps, basis, f, gh, nu=1.0)
    xd, info_d = solve(system, method="direct")
    xc, info_c = solve(system, method="cg")
    assert info_d["residual"] < 1e-12
    assert info_c["residual"] < 1e-12
    np.testing.assert_allclose(xd, xc, atol=1e-10 * max(1, np.max(np.abs(xd))))


def test_galerkin_residual_after_solve(problem2):
    ps, basis, f, gh = problem2
    system = assemble_velocity(ps, basis, f, gh, nu=1.0)
    x, _ = solve(system)
    assert galerkin_residual(system, x) < 1e-10


# ---------------------------------------------------------------------------
# SOL pressure system
# ---------------------------------------------------------------------------

def test_pressure_recovery(problem2):
    ps, basis, f, gh = problem2
    sol = solve_stokes(ps, f, manufactured.boundary_velocity, nu=1.0,
                       with_pressure=True)
    psys = sol.meta["pressure_system"]
    assert psys.check_symmetry(1e-12) < 1e-12
    eigs = np.linalg.eigvalsh(psys.matrix.toarray())
    assert eigs.min() > 0
    # recovered pressure is automatically mean free
    areas = ps.subtri_areas()
    mean = float(areas @ sol.p_values)
    assert abs(mean) < 1e-12 * max(1.0, np.max(np.abs(sol.p_values)))
    # consistency of the solved Gram system
    assert galerkin_residual(psys, sol.p_coeffs) < 1e-9
    # membership in the pressure space
    scale = max(1.0, float(np.max(np.abs(sol.p_values))))
    for e in range(ps.macro.n_edges):
        z = ps.singular_vertex(e)
        assert abs(alternating_sum(ps, sol.p_values, z)) < 1e-12 * scale


# ---------------------------------------------------------------------------
# saddle point and SOL/SP agreement
# ---------------------------------------------------------------------------

def test_saddle_point_homogeneous_is_zero():
    ps = split(generate_structured(2))
    u, p, meta = solve_saddle_point_stokes(ps, zero_field, lambda q: np.zeros(2))
    assert np.max(np.abs(u)) < 1e-12
    assert np.max(np.abs(p)) < 1e-12


def test_saddle_point_symmetry_and_block_structure(problem2):
    ps, basis, f, gh = problem2
    pbasis = build_pressure_basis(ps, kruskal_tree(ps, basis.z0))
    system = assemble_saddle_point(ps, pbasis, f, gh, nu=1.0)
    assert not system.spd
    assert system.check_symmetry(1e-12) < 1e-12
    nv = system.meta["n_velocity_dofs"]
    assert system.dimension == nv + pbasis.n_members
    # zero pressure-pressure block
    tail = system.matrix[nv:, nv:]
    assert tail.nnz == 0 or np.max(np.abs(tail.toarray())) == 0.0


def test_sol_and_sp_agree(problem2):
    ps, basis, f, gh = problem2
    sol = solve_stokes(ps, f, manufactured.boundary_velocity, nu=1.0,
                       with_pressure=True)
    u_sp, p_sp, meta = solve_saddle_point_stokes(
        ps, f, manufactured.boundary_velocity, nu=1.0)
    u_scale = np.max(np.abs(sol.u_nodal))
    p_scale = max(1.0, np.max(np.abs(sol.p_values)))
    assert np.max(np.abs(sol.u_nodal - u_sp)) < 1e-8 * u_scale
    assert np.max(np.abs(sol.p_values - p_sp)) < 1e-8 * p_scale


def test_sp_velocity_satisfies_alternating_sum(problem2):
    ps, basis, f, gh = problem2
    u_sp, _, meta = solve_saddle_point_stokes(
        ps, f, manufactured.boundary_velocity, nu=1.0)
    from psstokes.ps_split import nodal_divergence

    divs = nodal_divergence(ps, meta["w_nodal"])
    scale = max(1.0, float(np.max(np.abs(divs))))
    for e in range(ps.macro.n_edges):
        z = ps.singular_vertex(e)
        assert abs(alternating_sum(ps, divs, z)) < 1e-12 * scale


# ---------------------------------------------------------------------------
# norms, audits, conditioning
# ---------------------------------------------------------------------------

def test_error_norms_exact_for_member_of_space():
    # a constant field lies in the space: interpolation error is zero
    ps = split(generate_structured(2))
    u_nodal = np.tile([2.0, -1.0], (ps.n_split_vertices, 1))

    def u(p):
        out = np.zeros(np.asarray(p).shape)
        out[..., 0] = 2.0
        out[..., 1] = -1.0
        return out

    def du(p):
        return np.zeros(np.asarray(p).shape + (2,))

    l2, h1, _ = error_norms(ps, u_nodal, u, du)
    assert l2 < 1e-14 and h1 < 1e-14


def test_error_norms_quadrature_exact_for_quadratics():
    # u = (x^2, x y), u_h = 0: the squared norms are degree-4 polynomials
    # with analytic values 14/45 (L2^2) and 14/45 + 2 (H1^2)
    ps = split(generate_structured(3))
    u_nodal = np.zeros((ps.n_split_vertices, 2))

    def u(p):
        p = np.asarray(p)
        return np.stack([p[..., 0] ** 2, p[..., 0] * p[..., 1]], axis=-1)

    def du(p):
        p = np.asarray(p)
        g = np.zeros(p.shape + (2,))
        g[..., 0, 0] = 2 * p[..., 0]
        g[..., 1, 0] = p[..., 1]
        g[..., 1, 1] = p[..., 0]
        return g

    def pr(p):
        p = np.asarray(p)
        return p[..., 0] * p[..., 1]

    l2, h1, l2p = error_norms(ps, u_nodal, u, du,
                              p_values=np.zeros(ps.n_subtris), exact_p=pr)
    assert abs(l2**2 - 14 / 45) < 1e-12
    assert abs(h1**2 - (14 / 45 + 2.0)) < 1e-12
    assert abs(l2p**2 - 1 / 9) < 1e-12


def test_divergence_audit_sol_vs_naive():
    ps = split(generate_structured(2))
    f = manufactured.body_force(1.0)
    sol = solve_stokes(ps, f, manufactured.boundary_velocity, nu=1.0)
    scale = gradient_scale(ps, sol.u_nodal)
    assert divergence_audit(ps, sol.u_nodal) <= 1e-12 * scale
    # naive nodal interpolation of the exact solenoidal field is NOT
    # discretely divergence free
    naive = manufactured.velocity(ps.points)
    assert divergence_audit(ps, naive) > 1e-3


def test_condition_identity():
    system = SparseSymSystem(matrix=sp.eye(5, format="csr"),
                             rhs=np.zeros(5), spd=True)
    assert condition_estimate(system) == pytest.approx(1.0)


def test_condition_dense_vs_lanczos(problem2):
    ps, basis, f, gh = problem2
    system = assemble_velocity(ps, basis, f, gh, nu=1.0)
    dense = condition_estimate(system)
    lanczos = condition_estimate(system, dense_limit=0)
    assert dense / 2 < lanczos < dense * 2


def test_condition_sol_below_sp(problem2):
    ps, basis, f, gh = problem2
    vsys = assemble_velocity(ps, basis, f, gh, nu=1.0)
    pbasis = build_pressure_basis(ps, kruskal_tree(ps, basis.z0))
    spsys = assemble_saddle_point(ps, pbasis, f, gh, nu=1.0)
    assert condition_estimate(vsys) < condition_estimate(spsys)


def test_solution_point_evaluation():
    ps = split(generate_structured(2))
    f = manufactured.body_force(1.0)
    sol = solve_stokes(ps, f, manufactured.boundary_velocity, nu=1.0,
                       with_pressure=True)
    pts = np.array([[0.3, 0.4], [0.72, 0.11]])
    vals = sol.velocity_at(pts)
    assert vals.shape == (2, 2)
    # piecewise-linear interpolant stays within mesh-size error of the
    # smooth exact field
    assert np.max(np.abs(vals - manufactured.velocity(pts))) < 0.1
    press = sol.pressure_at(pts)
    assert press.shape == (2,)
    with pytest.raises(ValueError):
        sol.velocity_at(np.array([[2.0, 2.0]]))


def test_nodal_gradients_of_linear_field():
    ps = split(generate_structured(2))
    # v = (3x - y, x + 2y) has constant gradient [[3, -1], [1, 2]]
    field = np.column_stack([
        3 * ps.points[:, 0] - ps.points[:, 1],
        ps.points[:, 0] + 2 * ps.points[:, 1],
    ])
    g = nodal_gradients(ps, field)
    expected = np.array([[3.0, -1.0], [1.0, 2.0]])
    np.testing.assert_allclose(g, np.broadcast_to(expected, g.shape),
                               atol=1e-12)
