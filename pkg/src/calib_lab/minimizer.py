"""Projected gradient descent on the Riemannian area of a pinned disk mesh.

The center vertex stays at the origin; boundary vertices either slide on the
sphere of radius rho0 (re-projected radially after every step) or stay put.
Descent directions are preconditioned by a cotangent Laplacian weighted with
the conformal density, which approximates the area Hessian and keeps the
iteration count roughly independent of the mesh size.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import factorized

from .calibration import CalibrationField, geodesic_disk_area
from .errors import MeshError
from .submanifold import (
    QUAD_BARY,
    QUAD_W,
    DiscreteSubmanifold,
    _corners,
    divergence_theorem_check,
    max_inner_radius,
    node_divergence,
    project_boundary,
    triangle_areas,
    triangle_areas_from_corners,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinimizeOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    # relative area decrease per iteration below which the descent counts as stalled
    area_tolerance: float = 1e-8
    initial_step: float = 1.0
    backtracking: float = 0.5
    sufficient_decrease: float = 1e-4
    min_step: float = 1e-12
    log_every: int = 1
    boundary: str = "fixed"  # or "slide"
    precondition: bool = True

    def __post_init__(self):
        if (self.max_iterations < 1 or self.gradient_tolerance <= 0 or self.initial_step <= 0
                or self.area_tolerance < 0):
            raise ValueError("iteration count, tolerance and step must be positive")
        if not 0 < self.backtracking < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not 0 < self.sufficient_decrease < 1:
            raise ValueError("sufficient-decrease constant must lie in (0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")
        if self.boundary not in ("slide", "fixed"):
            raise ValueError("boundary mode is 'slide' or 'fixed'")


@dataclass
class MinimizeTrace:
    iterations: list = field(default_factory=list)
    areas: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    mesh: DiscreteSubmanifold | None = None
    converged: bool = False
    message: str = ""

    def record(self, it, area, gnorm, violation):
        self.iterations.append(it)
        self.areas.append(area)
        self.gradient_norms.append(gnorm)
        self.violations.append(violation)

    @property
    def final_area(self) -> float:
        return self.areas[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "area", "gradient_norm", "violation"])
            for row in zip(self.iterations, self.areas, self.gradient_norms, self.violations):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def area_gradient(mesh: DiscreteSubmanifold) -> np.ndarray:
    """Exact gradient of the quadrature area with respect to every vertex (chart coordinates)."""
    p0, p1, p2 = _corners(mesh.vertices, mesh.triangles)
    cr = np.cross(p1 - p0, p2 - p0)
    jac = np.linalg.norm(cr, axis=1)
    if np.any(jac <= 0):
        raise MeshError(f"degenerate triangle {int(np.argmax(jac <= 0))}")
    nhat = cr / jac[:, None]
    corners = np.stack([p0, p1, p2])
    nodes = np.einsum("qi,ifd->qfd", QUAD_BARY, corners)
    dens = mesh.chart.density(nodes)
    dens_grad = mesh.chart.density_grad(nodes)
    mean_dens = np.einsum("q,qf->f", QUAD_W, dens)
    # d|e1 x e2| / dx_i = (x_{i+1} - x_{i+2}) x nhat
    djac = [np.cross(p1 - p2, nhat), np.cross(p2 - p0, nhat), np.cross(p0 - p1, nhat)]
    grad = np.zeros_like(mesh.vertices)
    for i in range(3):
        g = 0.5 * djac[i] * mean_dens[:, None]
        g += 0.5 * jac[:, None] * np.einsum("q,qfd->fd", QUAD_W * QUAD_BARY[:, i], dens_grad)
        np.add.at(grad, mesh.triangles[:, i], g)
    return grad


def constraint_violation(mesh: DiscreteSubmanifold) -> float:
    radii = np.linalg.norm(mesh.vertices[mesh.boundary_loop], axis=1)
    return float(max(np.linalg.norm(mesh.vertices[mesh.center_index]),
                     np.max(np.abs(radii - mesh.boundary_radius))))


def _project_gradient(mesh: DiscreteSubmanifold, g: np.ndarray, boundary: str) -> np.ndarray:
    g = g.copy()
    g[mesh.center_index] = 0.0
    b = mesh.boundary_loop
    if boundary == "fixed":
        g[b] = 0.0
    else:
        xb = mesh.vertices[b]
        rhat = xb / np.linalg.norm(xb, axis=1)[:, None]
        g[b] -= np.sum(g[b] * rhat, axis=1)[:, None] * rhat
    return g


def _laplacian(mesh: DiscreteSubmanifold) -> sparse.csr_matrix:
    """Cotangent Laplacian weighted by the conformal density at each triangle centroid."""
    x, t = mesh.vertices, mesh.triangles
    p = _corners(x, t)
    dens = mesh.chart.density((p[0] + p[1] + p[2]) / 3.0)
    rows, cols, vals = [], [], []
    for i in range(3):
        a, b, c = p[i], p[(i + 1) % 3], p[(i + 2) % 3]
        u, v = b - a, c - a
        cot = np.sum(u * v, axis=1) / np.linalg.norm(np.cross(u, v), axis=1)
        # angle at corner i weights the opposite edge (i+1, i+2)
        w = 0.5 * np.maximum(cot, 1e-3) * dens
        j, k = t[:, (i + 1) % 3], t[:, (i + 2) % 3]
        rows += [j, k, j, k]
        cols += [k, j, j, k]
        vals += [-w, -w, w, w]
    n = len(x)
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))


def _descent_direction(mesh: DiscreteSubmanifold, g: np.ndarray, opts: MinimizeOptions) -> np.ndarray:
    if not opts.precondition:
        return g
    free = np.ones(len(mesh.vertices), dtype=bool)
    free[mesh.center_index] = False
    if opts.boundary == "fixed":
        free[mesh.boundary_loop] = False
    lap = _laplacian(mesh)[free][:, free]
    shift = 1e-9 * lap.diagonal().max()
    solve = factorized((lap + shift * sparse.identity(lap.shape[0])).tocsc())
    d = np.zeros_like(g)
    for c in range(3):
        d[free, c] = solve(g[free, c])
    d = _project_gradient(mesh, d, opts.boundary)
    if np.sum(d * g) <= 0:
        return g
    return d


def _apply_constraints(mesh: DiscreteSubmanifold, x: np.ndarray, boundary: str,
                       original: np.ndarray) -> np.ndarray:
    x[mesh.center_index] = 0.0
    if boundary == "fixed":
        x[mesh.boundary_loop] = original[mesh.boundary_loop]
        return x
    return project_boundary(x, mesh.boundary_loop, mesh.boundary_radius)


def _acceptable(mesh: DiscreteSubmanifold, x: np.ndarray, ref_normals: np.ndarray) -> bool:
    if not mesh.chart.inside(x):
        return False
    p0, p1, p2 = _corners(x, mesh.triangles)
    cr = np.cross(p1 - p0, p2 - p0)
    if np.any(np.linalg.norm(cr, axis=1) <= 1e-300):
        return False
    # reject steps that fold a triangle over
    return bool(np.all(np.sum(cr * ref_normals, axis=1) > 0))


def minimize_area(mesh: DiscreteSubmanifold, options: MinimizeOptions | None = None) -> MinimizeTrace:
    """Projected (preconditioned) gradient descent with Armijo backtracking."""
    opts = options or MinimizeOptions()
    mesh.validate()
    cur = mesh.with_vertices(mesh.vertices.copy())
    original = mesh.vertices
    trace = MinimizeTrace()
    area = float(np.sum(triangle_areas(cur)))
    step0 = opts.initial_step
    for it in range(opts.max_iterations + 1):
        g = _project_gradient(cur, area_gradient(cur), opts.boundary)
        d = _descent_direction(cur, g, opts)
        slope = float(np.sum(g * d))
        gnorm = math.sqrt(max(slope, 0.0))
        if it % opts.log_every == 0:
            trace.record(it, area, gnorm, constraint_violation(cur))
        if gnorm < opts.gradient_tolerance:
            trace.converged = True
            trace.message = f"gradient norm {gnorm:.3g} below tolerance after {it} iterations"
            break
        if it == opts.max_iterations:
            trace.message = "iteration limit reached"
            break
        p0, p1, p2 = _corners(cur.vertices, cur.triangles)
        ref_normals = np.cross(p1 - p0, p2 - p0)
        step = step0
        accepted = False
        while step >= opts.min_step:
            x = _apply_constraints(cur, cur.vertices - step * d, opts.boundary, original)
            if _acceptable(cur, x, ref_normals):
                new_area = float(np.sum(triangle_areas_from_corners(*_corners(x, cur.triangles),
                                                                    cur.chart)))
                if new_area <= area - opts.sufficient_decrease * step * slope:
                    accepted = True
                    break
            step *= opts.backtracking
        if not accepted:
            trace.message = f"line search failed at iteration {it}"
            break
        cur = cur.with_vertices(x)
        decrease = (area - new_area) / area
        area = new_area
        if decrease < opts.area_tolerance:
            trace.converged = True
            trace.message = (f"relative area decrease {decrease:.3g} below {opts.area_tolerance:g} "
                             f"at iteration {it + 1}")
            it += 1
            break
        # let the next line search start a little above the last accepted step
        step0 = min(opts.initial_step, step / opts.backtracking)
        log.debug("iter %d area %.12g step %.3g |g| %.3g", it, area, step, gnorm)
    if trace.iterations[-1] != it:
        trace.record(it, area, gnorm, constraint_violation(cur))
    trace.mesh = cur
    return trace


@dataclass
class BoundReport:
    final_area: float
    omega: float
    gap: float
    extrapolated_flux: float
    max_node_divergence: float
    slack: float
    flux_tolerance: float
    converged: bool

    @property
    def area_ok(self) -> bool:
        return self.final_area >= self.omega * (1.0 - self.slack)

    @property
    def flux_ok(self) -> bool:
        return abs(self.extrapolated_flux - self.omega) <= self.flux_tolerance * self.omega

    @property
    def passed(self) -> bool:
        return self.area_ok and self.flux_ok

    def to_dict(self) -> dict:
        return {"final_area": self.final_area, "omega": self.omega, "gap": self.gap,
                "relative_gap": self.gap / self.omega,
                "extrapolated_flux": self.extrapolated_flux,
                "max_node_divergence": self.max_node_divergence, "slack": self.slack,
                "flux_tolerance": self.flux_tolerance, "converged": self.converged,
                "area_ok": self.area_ok, "flux_ok": self.flux_ok, "pass": self.passed}


def verify_bound(trace_or_mesh, field: CalibrationField, slack: float = 0.005,
                 flux_tolerance: float = 0.005, eps_ladder=(1e-2, 5e-3, 2.5e-3)) -> BoundReport:
    """Compare a (minimized) mesh's area against the geodesic disk area omega."""
    if isinstance(trace_or_mesh, MinimizeTrace):
        mesh, converged = trace_or_mesh.mesh, trace_or_mesh.converged
    else:
        mesh, converged = trace_or_mesh, False
    omega = geodesic_disk_area(field.profile, field.k, field.rho0)
    area = float(np.sum(triangle_areas(mesh)))
    eps_max = max(eps_ladder)
    limit = max_inner_radius(mesh)
    if eps_max >= limit:
        scale = 0.5 * limit / eps_max
        eps_ladder = tuple(e * scale for e in eps_ladder)
    flux = divergence_theorem_check(mesh, field, eps_ladder).extrapolated_inner_flux
    div, _, _ = node_divergence(mesh, field)
    return BoundReport(area, omega, area - omega, flux, float(np.max(div)), slack,
                       flux_tolerance, converged)
