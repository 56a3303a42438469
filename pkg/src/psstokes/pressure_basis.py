"""Pressure-space basis built from divergences of non-solenoidal hats.

The piecewise-constant pressure space is spanned by divergences of nodal
velocity functions attached to singular vertices and incenters: at each
interior singular vertex a hat directed along the edge normal and one
along the edge tangent, and at each incenter one hat per coordinate
direction.  To reach a basis, the normal-directed hats on the edges of a
spanning tree are dropped; the tree connects one designated boundary
vertex with all interior macro vertices and is computed with Kruskal's
algorithm over edge-index weights (any spanning tree works; fixed weights
keep the result deterministic).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .macro_mesh import rot90_ccw
from .ps_split import PSMesh, nodal_divergence, subtri_shape_gradients


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.size = {x: 1 for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


@dataclass
class SpanningTree:
    """Spanning tree over the designated boundary vertex and all interior
    macro vertices, using interior macro edges."""

    z0: int
    nodes: list
    edges: list          # macro edge indices, in rooted (depth) order
    parent: dict         # vertex -> (parent vertex, macro edge), root absent

    @property
    def n_edges(self):
        return len(self.edges)

    def dump_csv(self, path, mesh):
        with open(path, "w") as f:
            f.write("edge,tail,head\n")
            for e in self.edges:
                lo, hi = mesh.edges[e]
                f.write(f"{e},{lo},{hi}\n")


def kruskal_tree(ps: PSMesh, z0) -> SpanningTree:
    """Kruskal spanning tree of the interior-vertex graph extended by z0.

    Edge weights are the global edge indices, making the tree deterministic.
    Raises ValueError listing the components when the graph is disconnected.
    """
    mesh = ps.macro
    if not mesh.vertex_is_boundary[z0]:
        raise ValueError(f"z0={z0} must be an exterior (boundary) vertex")
    nodes = [int(z0)] + [int(v) for v in mesh.interior_vertices]
    node_set = set(nodes)

    uf = _UnionFind(nodes)
    tree_edges = []
    for e in mesh.interior_edges:  # ascending index = ascending weight
        a, b = (int(v) for v in mesh.edges[e])
        if a in node_set and b in node_set and uf.union(a, b):
            tree_edges.append(int(e))

    if len(tree_edges) != len(nodes) - 1:
        components = {}
        for v in nodes:
            components.setdefault(uf.find(v), []).append(v)
        raise ValueError(
            "interior-vertex graph is disconnected; components: "
            + "; ".join(str(sorted(c)) for c in components.values())
        )

    # Root at z0 and order tree edges by depth: each vertex is reached
    # through exactly one parent edge.
    adjacency = {v: [] for v in nodes}
    for e in tree_edges:
        a, b = (int(v) for v in mesh.edges[e])
        adjacency[a].append((b, e))
        adjacency[b].append((a, e))
    parent = {}
    ordered = []
    frontier = [int(z0)]
    seen = {int(z0)}
    while frontier:
        nxt = []
        for v in frontier:
            for w, e in sorted(adjacency[v]):
                if w not in seen:
                    seen.add(w)
                    parent[w] = (v, e)
                    ordered.append(e)
                    nxt.append(w)
        frontier = nxt
    return SpanningTree(z0=int(z0), nodes=nodes, edges=ordered, parent=parent)


@dataclass(frozen=True)
class HatFunction:
    """A nodal hat at one split vertex times a fixed unit direction."""

    kind: str       # "edge_normal", "edge_tangent", "center_x", "center_y"
    entity: int     # macro edge (singular hats) or macro triangle (incenter)
    vertex: int     # split vertex carrying the hat
    direction: tuple

    def nodal_field(self, ps):
        field = np.zeros((ps.n_split_vertices, 2))
        field[self.vertex] = self.direction
        return field


def edge_frame(mesh, e):
    """Unit tangent (lower to higher vertex index) and its +90 degree
    rotation, the unit normal, of macro edge e."""
    lo, hi = mesh.edges[e]
    t = mesh.vertices[hi] - mesh.vertices[lo]
    t = t / np.linalg.norm(t)
    return t, rot90_ccw(t)


@dataclass
class PressureBasis:
    """The retained hat set whose divergences span the pressure space.

    ``interior_edge_order`` permutes the interior macro edges so the tree
    edges come first (in rooted order); the normal-directed hats on those
    leading edges are the excluded ones.
    """

    ps: PSMesh
    tree: SpanningTree
    members: list
    interior_edge_order: list

    @property
    def n_members(self):
        return len(self.members)

    def member_divergences(self):
        """Dense (n_members, n_subtris) matrix of divergence fields."""
        return np.array([divergence_field(self.ps, m) for m in self.members])


def build_pressure_basis(ps: PSMesh, tree: SpanningTree) -> PressureBasis:
    mesh = ps.macro
    tree_set = set(tree.edges)
    non_tree = [int(e) for e in mesh.interior_edges if int(e) not in tree_set]
    order = list(tree.edges) + non_tree

    members = []
    for e in non_tree:
        _, n = edge_frame(mesh, e)
        members.append(HatFunction("edge_normal", e, ps.singular_vertex(e),
                                   tuple(n)))
    for e in mesh.interior_edges:
        t, _ = edge_frame(mesh, int(e))
        members.append(HatFunction("edge_tangent", int(e),
                                   ps.singular_vertex(int(e)), tuple(t)))
    for k in range(mesh.n_triangles):
        members.append(HatFunction("center_x", k, ps.incenter_vertex(k),
                                   (1.0, 0.0)))
    for k in range(mesh.n_triangles):
        members.append(HatFunction("center_y", k, ps.incenter_vertex(k),
                                   (0.0, 1.0)))

    basis = PressureBasis(ps=ps, tree=tree, members=members,
                          interior_edge_order=order)
    expected = (2 * mesh.n_triangles + 2 * len(mesh.interior_edges)
                - len(mesh.interior_vertices))
    if basis.n_members != expected:
        raise RuntimeError(
            f"pressure basis has {basis.n_members} members, expected {expected}"
        )
    return basis


def divergence_field(ps: PSMesh, member: HatFunction):
    """Per-subtriangle constant divergence of one hat function."""
    _, grads = subtri_shape_gradients(ps)
    out = np.zeros(ps.n_subtris)
    d = np.asarray(member.direction)
    for t in ps.point_subtris[member.vertex]:
        i = int(np.flatnonzero(ps.subtris[t] == member.vertex)[0])
        out[t] = float(d @ grads[t, i])
    return out


def check_pressure_field(ps: PSMesh, q, rtol=1e-12):
    """Validate membership in the pressure space: zero mean and vanishing
    alternating sums at every singular vertex.  Returns the worst residual
    scaled by max|q|."""
    from .velocity_basis import alternating_sum

    q = np.asarray(q, dtype=float)
    areas = ps.subtri_areas()
    scale = max(1.0, float(np.max(np.abs(q))))
    worst = abs(float(areas @ q)) / scale
    for e in range(ps.macro.n_edges):
        z = ps.singular_vertex(e)
        worst = max(worst, abs(alternating_sum(ps, q, z)) / scale)
    return worst


def dimension_identity(ps: PSMesh):
    """The two equivalent counts of the pressure-space dimension."""
    mesh = ps.macro
    by_cells = (2 * mesh.n_triangles + 2 * len(mesh.interior_edges)
                - len(mesh.interior_vertices))
    by_edges = (3 * len(mesh.interior_edges) + len(mesh.exterior_edges) - 1)
    return by_cells, by_edges
