"""Triangulated 2-surfaces through the center of a geodesic 3-ball.

Meshes live in a conformal chart centered at p.  The default is the Poincare
ball chart of hyperbolic space, metric ``lambda(x)^2 |dx|^2`` with
``lambda = 2 / (1 - |x|^2)``; the flat chart (``lambda = 1``) serves as the
Euclidean reference.  Triangles are flat in the chart; areas, fluxes and
divergences are computed with the chart metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibrationField, frame_divergence, power_integral
from .errors import FluxPreconditionError, MeshError
from .warp_geometry import ball_radius, conformal_factor, geodesic_radius

# Symmetric 6-point rule, exact for degree 4 (barycentric coordinates, weights sum to 1).
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [_A1, _A1, 1 - 2 * _A1], [_A1, 1 - 2 * _A1, _A1], [1 - 2 * _A1, _A1, _A1],
    [_A2, _A2, 1 - 2 * _A2], [_A2, 1 - 2 * _A2, _A2], [1 - 2 * _A2, _A2, _A2],
])
QUAD_W = np.array([_W1] * 3 + [_W2] * 3)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)

DEGENERATE_AREA = 1e-300


@dataclass(frozen=True)
class ConformalChart:
    """Chart centered at p with metric ``lambda(x)^2 |dx|^2`` depending on |x| only."""

    name: str
    to_chart: object  # geodesic radius -> chart radius
    from_chart: object  # chart radius -> geodesic radius
    factor: object  # lambda(x)
    density: object  # lambda(x)^2
    density_grad: object  # gradient of lambda(x)^2
    bounded: bool  # chart confined to the open unit ball

    def inside(self, x: np.ndarray) -> bool:
        return not self.bounded or bool(np.all(np.sum(x * x, axis=-1) < 1.0))


def _ball_density(x):
    return conformal_factor(x) ** 2


def _ball_density_grad(x):
    sq = np.sum(x * x, axis=-1)
    return 16.0 * x / (1.0 - sq)[..., None] ** 3


CHARTS = {
    "hyperbolic": ConformalChart("hyperbolic", ball_radius, geodesic_radius, conformal_factor,
                                 _ball_density, _ball_density_grad, True),
    "euclidean": ConformalChart(
        "euclidean", lambda r: np.asarray(r, dtype=float), lambda s: np.asarray(s, dtype=float),
        lambda x: np.ones(np.shape(x)[:-1]), lambda x: np.ones(np.shape(x)[:-1]),
        lambda x: np.zeros(np.shape(x)), False),
}


@dataclass
class DiscreteSubmanifold:
    """A triangulated disk in a conformal chart with one vertex pinned at the origin.

    ``metric`` names the chart: ``"hyperbolic"`` (Poincare ball) or ``"euclidean"``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    center_index: int
    rho0: float
    boundary_loop: np.ndarray = field(default=None)
    metric: str = "hyperbolic"

    def __post_init__(self):
        if self.metric not in CHARTS:
            raise MeshError(f"unknown metric {self.metric!r}; expected one of {sorted(CHARTS)}")
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.boundary_loop is None:
            self.boundary_loop = boundary_cycle(self.triangles)
        self.boundary_loop = np.asarray(self.boundary_loop, dtype=np.int64)

    @property
    def chart(self) -> ConformalChart:
        return CHARTS[self.metric]

    @property
    def boundary_radius(self) -> float:
        """Chart radius of the geodesic sphere of radius rho0."""
        return float(self.chart.to_chart(self.rho0))

    @property
    def interior_mask(self) -> np.ndarray:
        mask = np.ones(len(self.vertices), dtype=bool)
        mask[self.boundary_loop] = False
        mask[self.center_index] = False
        return mask

    def with_vertices(self, vertices: np.ndarray) -> "DiscreteSubmanifold":
        return DiscreteSubmanifold(vertices, self.triangles, self.center_index, self.rho0,
                                   self.boundary_loop, self.metric)

    def reversed(self) -> "DiscreteSubmanifold":
        """Same surface with the opposite triangle orientation."""
        return DiscreteSubmanifold(self.vertices, self.triangles[:, ::-1].copy(),
                                   self.center_index, self.rho0, self.boundary_loop[::-1].copy(),
                                   self.metric)

    def validate(self, boundary_tol: float = 1e-10) -> None:
        v, t = self.vertices, self.triangles
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must be an (V, 3) array")
        if t.ndim != 2 or t.shape[1] != 3 or t.min() < 0 or t.max() >= len(v):
            raise MeshError("triangles must index existing vertices")
        if np.linalg.norm(v[self.center_index]) >= 1e-14:
            raise MeshError("center vertex is not at the origin")
        if not self.chart.inside(v):
            raise MeshError("vertex outside the unit ball")
        radii = np.linalg.norm(v[self.boundary_loop], axis=1)
        if np.max(np.abs(radii - self.boundary_radius)) >= boundary_tol:
            raise MeshError("boundary vertex off the sphere of radius rho0")
        edges, counts = _edge_counts(t)
        if np.any(counts > 2):
            raise MeshError("non-manifold edge")
        euler = len(v) - len(edges) + len(t)
        if euler != 1:
            raise MeshError(f"not a disk: Euler characteristic {euler}")
        loop = boundary_cycle(t)
        if len(loop) != int(np.sum(counts == 1)):
            raise MeshError("boundary edges do not form a single cycle")
        if set(loop.tolist()) != set(self.boundary_loop.tolist()):
            raise MeshError("stored boundary loop disagrees with the triangulation")

    # --- serialization ---
    def to_dict(self) -> dict:
        return {"vertices": self.vertices.tolist(), "triangles": self.triangles.tolist(),
                "center_index": int(self.center_index), "rho0": self.rho0, "metric": self.metric}

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteSubmanifold":
        mesh = cls(np.array(data["vertices"], float), np.array(data["triangles"], np.int64),
                   int(data["center_index"]), float(data["rho0"]),
                   metric=data.get("metric", "hyperbolic"))
        mesh.validate()
        return mesh

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DiscreteSubmanifold":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _edge_counts(triangles: np.ndarray):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def boundary_cycle(triangles: np.ndarray) -> np.ndarray:
    """Boundary vertices in the order induced by the triangle orientation."""
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bdry = directed[counts[inv.ravel()] == 1]
    if len(bdry) == 0:
        raise MeshError("mesh has no boundary")
    nxt = dict(zip(bdry[:, 0].tolist(), bdry[:, 1].tolist()))
    if len(nxt) != len(bdry):
        raise MeshError("boundary is not a simple cycle")
    start = int(bdry[0, 0])
    loop = [start]
    cur = nxt[start]
    while cur != start:
        loop.append(cur)
        cur = nxt.get(cur)
        if cur is None or len(loop) > len(bdry):
            raise MeshError("boundary edges do not close into one cycle")
    return np.array(loop, dtype=np.int64)


# --- construction ------------------------------------------------------------

def geodesic_disk_mesh(rho0: float, depth: int, tilt: np.ndarray | None = None,
                       metric: str = "hyperbolic") -> DiscreteSubmanifold:
    """Triangulated totally geodesic disk of radius rho0 through the origin.

    Concentric rings at equally spaced geodesic radii, ring j carrying 6j
    vertices; ``N = 2**depth`` rings, so the vertex count is 1 + 3N(N+1).
    ``tilt`` is an optional 3x3 rotation applied to the disk in the xy-plane.
    """
    if int(depth) != depth or depth < 1:
        raise MeshError("depth must be a positive integer")
    if not rho0 > 0:
        raise MeshError("rho0 must be positive")
    if metric not in CHARTS:
        raise MeshError(f"unknown metric {metric!r}")
    to_chart = CHARTS[metric].to_chart
    n_rings = 2**int(depth)
    pts = [np.zeros(3)]
    for j in range(1, n_rings + 1):
        s = to_chart(rho0 * j / n_rings)
        ang = 2 * np.pi * np.arange(6 * j) / (6 * j)
        ring = np.column_stack([s * np.cos(ang), s * np.sin(ang), np.zeros(6 * j)])
        pts.append(ring)
    verts = np.vstack(pts)
    # pin the last ring exactly onto the sphere
    start_last = 1 + 3 * n_rings * (n_rings - 1)
    last = verts[start_last:]
    verts[start_last:] = last / np.linalg.norm(last, axis=1)[:, None] * to_chart(rho0)

    def idx(j, i):
        return 0 if j == 0 else 1 + 3 * j * (j - 1) + (i % (6 * j))

    tris = []
    for j in range(1, n_rings + 1):
        for q in range(6):
            outer = [idx(j, q * j + t) for t in range(j + 1)]
            inner = [idx(j - 1, q * (j - 1) + t) for t in range(j)]
            for t in range(j):
                tris.append((inner[t], outer[t], outer[t + 1]))
            for t in range(j - 1):
                tris.append((inner[t], outer[t + 1], inner[t + 1]))
    if tilt is not None:
        tilt = np.asarray(tilt, dtype=float)
        if np.max(np.abs(tilt @ tilt.T - np.eye(3))) > 1e-12:
            raise MeshError("tilt must be a rotation matrix")
        verts = verts @ tilt.T
    boundary = np.array([idx(n_rings, i) for i in range(6 * n_rings)])
    mesh = DiscreteSubmanifold(verts, np.array(tris), 0, float(rho0), boundary, metric)
    return mesh


def random_rotation(seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def disk_frame(mesh: DiscreteSubmanifold) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(u, v, normal) of the best-fit plane of the boundary loop through the origin.

    The normal agrees with the triangle orientation (SVD signs are arbitrary).
    """
    b = mesh.vertices[mesh.boundary_loop]
    _, _, vt = np.linalg.svd(b, full_matrices=False)
    u, n = vt[0], vt[2]
    p0, p1, p2 = _corners(mesh.vertices, mesh.triangles)
    if np.dot(np.sum(np.cross(p1 - p0, p2 - p0), axis=0), n) < 0:
        n = -n
    return u, np.cross(n, u), n


def project_boundary(mesh_vertices: np.ndarray, boundary: np.ndarray, radius: float) -> np.ndarray:
    out = mesh_vertices.copy()
    b = out[boundary]
    out[boundary] = b / np.linalg.norm(b, axis=1)[:, None] * radius
    return out


def graph_perturbation(mesh: DiscreteSubmanifold, amplitude: float, mode_index: int = 0,
                       seed=0) -> DiscreteSubmanifold:
    """Push interior vertices off the disk plane by a smooth bump.

    Displacement along the plane normal is ``amplitude * sin(pi t)^2 * a(theta)``
    with t the in-plane radius over the boundary radius; ``a = 1`` for mode 0
    and ``cos(m theta + phase)`` otherwise, the phase drawn from ``seed``.
    The bump vanishes to second order at the center, so the perturbed surface
    keeps a tangent plane at p.
    """
    if amplitude == 0:
        return mesh.with_vertices(mesh.vertices.copy())
    u, v, n = disk_frame(mesh)
    x = mesh.vertices
    a, b = x @ u, x @ v
    t = np.hypot(a, b) / mesh.boundary_radius
    theta = np.arctan2(b, a)
    if mode_index == 0:
        ang = np.ones_like(theta)
    else:
        phase = np.random.default_rng(seed).uniform(0, 2 * np.pi)
        ang = np.cos(mode_index * theta + phase)
    bump = amplitude * np.sin(np.pi * np.clip(t, 0.0, 1.0)) ** 2 * ang
    bump[~mesh.interior_mask] = 0.0
    new = x + bump[:, None] * n[None, :]
    new = project_boundary(new, mesh.boundary_loop, mesh.boundary_radius)
    if not mesh.chart.inside(new):
        raise MeshError("perturbation pushed a vertex out of the unit ball")
    out = mesh.with_vertices(new)
    out.validate()
    return out


def twist_boundary(mesh: DiscreteSubmanifold, amplitude: float, mode_index: int = 2,
                   seed=0) -> DiscreteSubmanifold:
    """Bend the boundary loop off its great circle (saddle-like for mode 2).

    Every vertex moves along the plane normal by ``amplitude * t^2 *
    cos(m theta + phase)``; boundary vertices are then re-projected onto
    the sphere, so the loop stays on the sphere but leaves the plane.
    """
    u, v, n = disk_frame(mesh)
    x = mesh.vertices
    a, b = x @ u, x @ v
    t = np.hypot(a, b) / mesh.boundary_radius
    theta = np.arctan2(b, a)
    phase = np.random.default_rng(seed).uniform(0, 2 * np.pi)
    disp = amplitude * t**2 * np.cos(mode_index * theta + phase)
    disp[mesh.center_index] = 0.0
    new = project_boundary(x + disp[:, None] * n[None, :], mesh.boundary_loop, mesh.boundary_radius)
    out = mesh.with_vertices(new)
    out.validate()
    return out


# --- area --------------------------------------------------------------------

def _corners(vertices: np.ndarray, triangles: np.ndarray):
    return vertices[triangles[:, 0]], vertices[triangles[:, 1]], vertices[triangles[:, 2]]


def conformal_density(x):
    """lambda(x)^2 = 4 / (1 - |x|^2)^2, the hyperbolic area density of the chart."""
    return conformal_factor(x) ** 2


def triangle_areas_from_corners(p0, p1, p2, chart: ConformalChart | None = None) -> np.ndarray:
    """Areas of chart-flat triangles (arrays of shape (F, 3)); hyperbolic by default."""
    chart = chart or CHARTS["hyperbolic"]
    jac = np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=-1)
    nodes = np.einsum("qi,ifd->qfd", QUAD_BARY, np.stack([p0, p1, p2]))
    dens = chart.density(nodes)
    return 0.5 * jac * np.einsum("q,qf->f", QUAD_W, dens)


def triangle_areas(mesh: DiscreteSubmanifold, check: bool = True) -> np.ndarray:
    areas = triangle_areas_from_corners(*_corners(mesh.vertices, mesh.triangles), mesh.chart)
    if check:
        bad = np.flatnonzero(areas <= DEGENERATE_AREA)
        if bad.size:
            raise MeshError(f"degenerate triangle {int(bad[0])} (zero area)")
    return areas


def riemannian_area(mesh: DiscreteSubmanifold) -> float:
    """Riemannian area of the mesh (degree-4 quadrature on every triangle)."""
    return float(np.sum(triangle_areas(mesh)))


def vertex_patch_areas(mesh: DiscreteSubmanifold) -> np.ndarray:
    """Barycentric (one third of incident triangle areas) Riemannian area per vertex."""
    areas = triangle_areas(mesh)
    out = np.zeros(len(mesh.vertices))
    for c in range(3):
        np.add.at(out, mesh.triangles[:, c], areas / 3.0)
    return out


def vertex_normals(mesh: DiscreteSubmanifold) -> np.ndarray:
    p0, p1, p2 = _corners(mesh.vertices, mesh.triangles)
    cr = np.cross(p1 - p0, p2 - p0)
    out = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(out, mesh.triangles[:, c], cr)
    norm = np.linalg.norm(out, axis=1)
    norm[norm == 0] = 1.0
    return out / norm[:, None]


def fd_area_gradient(mesh: DiscreteSubmanifold, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the total area with respect to every vertex."""
    p = list(_corners(mesh.vertices, mesh.triangles))
    grad = np.zeros_like(mesh.vertices)
    for slot in range(3):
        for d in range(3):
            shifted = [c.copy() for c in p]
            shifted[slot][:, d] += step
            plus = triangle_areas_from_corners(*shifted, mesh.chart)
            shifted[slot][:, d] -= 2 * step
            minus = triangle_areas_from_corners(*shifted, mesh.chart)
            np.add.at(grad[:, d], mesh.triangles[:, slot], (plus - minus) / (2 * step))
    return grad


def mean_curvature_estimate(mesh: DiscreteSubmanifold, step: float = 1e-6) -> np.ndarray:
    """Per-vertex mean curvature vectors (chart components).

    The normal part of the finite-difference area gradient, divided by the
    vertex's barycentric patch area and the squared conformal factor, so that
    ``sum_v A_v <H_v, X_v> = -dArea(X)`` for normal variations X.  Zero at the
    center and on the boundary.
    """
    grad = fd_area_gradient(mesh, step)
    normals = vertex_normals(mesh)
    patch = vertex_patch_areas(mesh)
    if np.any(patch[mesh.interior_mask] <= 0):
        raise MeshError("degenerate vertex star")
    lam2 = mesh.chart.density(mesh.vertices)
    normal_part = np.sum(grad * normals, axis=1)[:, None] * normals
    h = -normal_part / (patch * lam2)[:, None]
    h[~mesh.interior_mask] = 0.0
    return h


def metric_norms(points: np.ndarray, vectors: np.ndarray, metric: str = "hyperbolic") -> np.ndarray:
    """Riemannian lengths of chart vectors attached at the given points."""
    return CHARTS[metric].factor(points) * np.linalg.norm(vectors, axis=-1)


# --- flux --------------------------------------------------------------------

def _check_field(mesh: DiscreteSubmanifold, field: CalibrationField):
    if field.profile.kind != mesh.metric or field.k != 2:
        raise ValueError(f"mesh fluxes need a {mesh.metric} profile with k = 2, got "
                         f"{field.profile.kind} with k = {field.k}")
    if not math.isclose(field.rho0, mesh.rho0, rel_tol=1e-12):
        raise ValueError(f"field rho0 {field.rho0} does not match mesh rho0 {mesh.rho0}")


def center_star(mesh: DiscreteSubmanifold):
    """Triangles incident to the center, rotated so the center comes first."""
    t = mesh.triangles
    hit = np.flatnonzero(np.any(t == mesh.center_index, axis=1))
    out = []
    for i in hit:
        tri = list(t[i])
        while tri[0] != mesh.center_index:
            tri = tri[1:] + tri[:1]
        out.append(tri)
    return hit, np.array(out, dtype=np.int64)


def max_inner_radius(mesh: DiscreteSubmanifold) -> float:
    """Largest geodesic cut radius for which the sphere meets only the center edges."""
    _, star = center_star(mesh)
    a = mesh.vertices[star[:, 1]]
    b = mesh.vertices[star[:, 2]]
    # distance from the origin to each opposite edge segment
    d = b - a
    t = np.clip(-np.sum(a * d, axis=1) / np.sum(d * d, axis=1), 0.0, 1.0)
    dist = np.linalg.norm(a + t[:, None] * d, axis=1)
    return float(mesh.chart.from_chart(np.min(dist)))


def _field_dot(field: CalibrationField, chart: ConformalChart, y: np.ndarray,
               nu_e: np.ndarray) -> np.ndarray:
    """<W, nu>_g for chart points y and Euclidean-unit chart directions nu_e."""
    s = np.linalg.norm(y, axis=-1)
    f = field.f_unchecked(chart.from_chart(s))
    # W = f yhat / lambda, nu = nu_e / lambda, g = lambda^2 delta
    return f * np.sum(y * nu_e, axis=-1) / s


def inner_flux(mesh: DiscreteSubmanifold, field: CalibrationField, eps: float,
               conormal: str = "outward", return_angle: bool = False):
    """Flux of W through M intersected with the geodesic sphere of radius eps.

    Each center-incident triangle is cut exactly by the chart sphere matching
    the geodesic sphere (radius tanh(eps/2) in the ball chart); the cut is a circular arc, integrated with Gauss-Legendre
    nodes.  The conormal lies in the triangle plane, is orthogonal to the
    arc, and points toward p (outward from M minus the small ball).
    """
    _check_field(mesh, field)
    limit = max_inner_radius(mesh)
    if not 0 < eps < limit:
        raise FluxPreconditionError(
            f"cut radius {eps!r} must lie in (0, {limit:.6g}), the distance to the far edges "
            "of the center star"
        )
    sign = 1.0 if conormal == "outward" else -1.0
    _, star = center_star(mesh)
    chart = mesh.chart
    s = float(chart.to_chart(eps))
    total = 0.0
    max_angle = 0.0
    for tri in star:
        a = mesh.vertices[tri[1]]
        b = mesh.vertices[tri[2]]
        ua = a / np.linalg.norm(a)
        w = b - (b @ ua) * ua
        uw = w / np.linalg.norm(w)
        alpha = math.atan2(float(b @ uw), float(b @ ua))
        normal = np.cross(ua, uw)
        phis = 0.5 * alpha * (_GL_NODES + 1.0)
        y = s * (np.cos(phis)[:, None] * ua + np.sin(phis)[:, None] * uw)
        # in-plane gradient of |y|, reversed to point at p
        grad = y / s
        tangential = grad - (grad @ normal)[:, None] * normal
        nu = -tangential / np.linalg.norm(tangential, axis=1)[:, None]
        dot = _field_dot(field, chart, y, nu)
        ds = chart.factor(y) * s  # |dy/dphi| scaled to Riemannian length
        total += 0.5 * alpha * float(np.sum(_GL_WEIGHTS * dot * ds))
        sin_ang = np.linalg.norm(np.cross(nu, -grad), axis=1)
        ang = np.arctan2(sin_ang, -np.sum(nu * grad, axis=1))
        max_angle = max(max_angle, float(np.max(ang)))
    val = sign * total
    return (val, max_angle) if return_angle else val


def outer_flux(mesh: DiscreteSubmanifold, field: CalibrationField, conormal: str = "outward") -> float:
    """Flux of W through the boundary loop (trapezoid rule on boundary edges)."""
    _check_field(mesh, field)
    sign = 1.0 if conormal == "outward" else -1.0
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    opposite = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    on_bdry = counts[inv.ravel()] == 1
    e = directed[on_bdry]
    opp = opposite[on_bdry]
    x = mesh.vertices
    pa, pb, pc = x[e[:, 0]], x[e[:, 1]], x[opp]
    edge = pb - pa
    length = np.linalg.norm(edge, axis=1)
    te = edge / length[:, None]
    # outward conormal: in the triangle plane, orthogonal to the edge, away from the third vertex
    away = pa - pc
    nu = away - np.sum(away * te, axis=1)[:, None] * te
    nu /= np.linalg.norm(nu, axis=1)[:, None]
    chart = mesh.chart
    ga = _field_dot(field, chart, pa, nu) * chart.factor(pa)
    gb = _field_dot(field, chart, pb, nu) * chart.factor(pb)
    return sign * float(np.sum(0.5 * length * (ga + gb)))


def boundary_flux(mesh: DiscreteSubmanifold, field: CalibrationField, which: str = "outer",
                  eps: float | None = None, conormal: str = "outward") -> float:
    if which == "outer":
        return outer_flux(mesh, field, conormal)
    if which == "inner":
        if eps is None:
            raise ValueError("inner flux needs a cut radius eps")
        return inner_flux(mesh, field, eps, conormal)
    raise ValueError("which must be 'outer' or 'inner'")


def observed_order(eps: np.ndarray, values: np.ndarray) -> float:
    """Error decay order from the three smallest radii of a geometric ladder.

    Falls back to 1 when fewer than three radii are given or the differences
    do not shrink monotonically.
    """
    order = np.argsort(eps)
    if eps.size < 3:
        return 1.0
    e3, e2, e1 = eps[order[:3]]
    v3, v2, v1 = values[order[:3]]
    d1, d2 = v2 - v1, v3 - v2
    ratio = e1 / e2
    if d1 == 0 or d2 == 0 or d1 * d2 < 0 or not math.isclose(ratio, e2 / e3, rel_tol=1e-9):
        return 1.0
    p = math.log(abs(d1 / d2)) / math.log(ratio)
    return float(min(max(p, 0.5), 4.0))


def richardson(eps: np.ndarray, values: np.ndarray, order: float = 1.0) -> float:
    """Extrapolate to eps = 0 from the two smallest radii, assuming error ~ eps**order."""
    idx = np.argsort(eps)
    e1, e2 = eps[idx[1]], eps[idx[0]]
    v1, v2 = values[idx[1]], values[idx[0]]
    q = (e1 / e2) ** order
    return float(v2 + (v2 - v1) / (q - 1.0))


@dataclass
class FluxResult:
    outer_flux: float
    inner_flux: dict
    extrapolated_inner_flux: float
    interior_divergence_integral: float
    divergence_term: float
    mean_curvature_term: float
    excised_area: float
    area_outside: float
    max_conormal_angle: float
    extrapolation_order: float
    residual: float

    @property
    def relative_residual(self) -> float:
        return self.residual / abs(self.outer_flux + self.extrapolated_inner_flux)

    def to_dict(self) -> dict:
        return {
            "outer_flux": self.outer_flux,
            "inner_flux": [{"epsilon": e, "flux": v} for e, v in self.inner_flux.items()],
            "extrapolated_inner_flux": self.extrapolated_inner_flux,
            "interior_divergence_integral": self.interior_divergence_integral,
            "divergence_term": self.divergence_term,
            "mean_curvature_term": self.mean_curvature_term,
            "excised_area": self.excised_area,
            "area_outside": self.area_outside,
            "max_conormal_angle": self.max_conormal_angle,
            "extrapolation_order": self.extrapolation_order,
            "residual": self.residual,
            "relative_residual": self.relative_residual,
        }


def node_divergence(mesh: DiscreteSubmanifold, field: CalibrationField):
    """frame_divergence at every quadrature node, with the node's area weights.

    Returns (divergence, weights, radial_mass), each of shape (6, F).
    """
    p0, p1, p2 = _corners(mesh.vertices, mesh.triangles)
    cr = np.cross(p1 - p0, p2 - p0)
    jac = np.linalg.norm(cr, axis=1)
    normal = cr / jac[:, None]
    nodes = np.einsum("qi,ifd->qfd", QUAD_BARY, np.stack([p0, p1, p2]))
    s = np.linalg.norm(nodes, axis=-1)
    r = mesh.chart.from_chart(s)
    # the chart is conformal: the angle between d/dr and the plane is Euclidean
    cos_n = np.einsum("qfd,fd->qf", nodes, normal) / s
    mass = np.clip(1.0 - cos_n**2, 0.0, 1.0)
    div = frame_divergence(field, np.minimum(r, field.rho0), mass)
    weights = 0.5 * jac[None, :] * QUAD_W[:, None] * mesh.chart.density(nodes)
    return div, weights, mass


def divergence_theorem_check(mesh: DiscreteSubmanifold, field: CalibrationField,
                             eps_ladder, h_step: float = 1e-6) -> FluxResult:
    """Both sides of the divergence theorem for W^T on M minus B_p(eps_min).

    Interior side: quadrature of the closed-form divergence over every
    triangle, minus the exact contribution of the excised sectors, plus the
    vertex sum of <H_est, W> weighted by patch areas.  Boundary side: outer
    flux plus the Richardson-extrapolated inner flux.
    """
    _check_field(mesh, field)
    eps = np.asarray(sorted(eps_ladder, reverse=True), dtype=float)
    if eps.size < 2:
        raise ValueError("epsilon ladder needs at least two radii")
    fluxes = {}
    max_angle = 0.0
    for e in eps:
        val, ang = inner_flux(mesh, field, float(e), return_angle=True)
        fluxes[float(e)] = val
        max_angle = max(max_angle, ang)
    vals = np.array(list(fluxes.values()))
    p = observed_order(eps, vals)
    extrap = richardson(eps, vals, p)
    out = outer_flux(mesh, field)

    div, w, _ = node_divergence(mesh, field)
    eps_min = float(eps.min())
    _, star = center_star(mesh)
    # center triangles contain d/dr in their plane, so the divergence is 1 there
    # and each removed sector of angle alpha has area alpha * int_0^eps phi
    alpha = np.array([_center_angle(mesh, tri) for tri in star])
    excised = float(np.sum(alpha) * power_integral(field.profile, 2, 0.0, eps_min))
    div_term = float(np.sum(div * w)) - excised
    area_outside = riemannian_area(mesh) - excised

    h = mean_curvature_estimate(mesh, h_step)
    patch = vertex_patch_areas(mesh)
    x = mesh.vertices
    inner = mesh.interior_mask
    s = np.linalg.norm(x[inner], axis=1)
    f = field.f_unchecked(mesh.chart.from_chart(s))
    lam = mesh.chart.factor(x[inner])
    # <H, W>_g = lambda^2 H . (f yhat / lambda)
    hw = lam * f * np.sum(h[inner] * x[inner], axis=1) / s
    h_term = float(np.sum(patch[inner] * hw))

    interior = div_term + h_term
    residual = abs(interior - (out + extrap))
    return FluxResult(out, fluxes, extrap, interior, div_term, h_term, excised, area_outside,
                      max_angle, p, residual)


def _center_angle(mesh: DiscreteSubmanifold, tri) -> float:
    a = mesh.vertices[tri[1]]
    b = mesh.vertices[tri[2]]
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b))
