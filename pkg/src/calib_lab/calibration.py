"""Radial calibration field W = f(r) d/dr and its verification.

``f(r) = phi(r)^{-(k-1)} * int_{rho0}^{r} phi^{k-1}`` solves
``f' + (k-1) f phi'/phi = 1`` with ``f(rho0) = 0``.  The tangential
divergence of W on a k-plane depends only on r and on the squared length of
the projection of d/dr onto the plane (the "radial mass"), and never exceeds 1.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .errors import DomainError, QuadratureError
from .warp_geometry import (
    PolarPoint,
    WarpProfile,
    _log_derivative,
    ball_from_polar,
    chart_christoffels,
    conformal_factor,
    geodesic_radius,
    tangent_basis,
)

QUAD_EPSABS = 1e-12
QUAD_EPSREL = 1e-14
QUAD_LIMIT = 10_000
ORACLE_STEP = 1e-4  # relative to the chart radius |x|
ORACLE_MIN_RADIUS = 1e-2
CENTER_PROBE = 1e-5


def threads_from_env(default: int = 1) -> int:
    """Worker cap from CALIB_LAB_THREADS (>= 1)."""
    try:
        return max(1, int(os.environ.get("CALIB_LAB_THREADS", default)))
    except ValueError:
        return default


# --- integrals of phi^(k-1) --------------------------------------------------

def _closed_form_integral(profile: WarpProfile, k: int, a, b):
    """int_a^b phi^(k-1) by antiderivative, or None when no closed form is wired."""
    if k == 1:
        return b - a
    kind = profile.kind
    if kind == "euclidean":
        return (b**k - a**k) / k
    if kind == "hyperbolic":
        if k == 2:
            # cosh b - cosh a, written without cancellation
            return 2.0 * np.sinh((b + a) / 2) * np.sinh((b - a) / 2)
        if k == 3:
            return ((np.sinh(2 * b) - np.sinh(2 * a)) / 2 - (b - a)) / 2
    if kind == "spherical":
        if k == 2:
            return 2.0 * np.sin((b + a) / 2) * np.sin((b - a) / 2)
        if k == 3:
            return ((b - a) - (np.sin(2 * b) - np.sin(2 * a)) / 2) / 2
    return None


def _quad_integral(profile: WarpProfile, k: int, a: float, b: float) -> float:
    if a == b:
        return 0.0
    phi = profile.phi
    p = k - 1
    breaks = None
    if profile.samples is not None:
        # interpolated profiles are only piecewise smooth: split at the knots
        knots = np.asarray(profile.samples)[:, 0]
        inside = knots[(knots > min(a, b)) & (knots < max(a, b))]
        breaks = inside if inside.size else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(lambda t: float(phi(t)) ** p, a, b, epsabs=QUAD_EPSABS,
                             epsrel=QUAD_EPSREL, limit=QUAD_LIMIT, points=breaks, full_output=1)
    val, err = res[0], res[1]
    if len(res) > 3 and res[2].get("last", 0) >= QUAD_LIMIT:
        raise QuadratureError(f"quadrature hit the subdivision cap on [{a}, {b}]")
    # roundoff-limited ier codes are fine as long as the error estimate is tiny
    if err > 100 * max(QUAD_EPSABS, QUAD_EPSREL * abs(val)):
        raise QuadratureError(f"quadrature error estimate {err:.3g} too large on [{a}, {b}]")
    return val


def power_integral(profile: WarpProfile, k: int, a, b, method: str = "auto"):
    """int_a^b phi(t)^(k-1) dt.

    ``method`` is ``"closed"`` (antiderivative; raises if none is known),
    ``"quad"`` (adaptive Gauss-Kronrod) or ``"auto"`` (closed when available).
    """
    if method not in ("auto", "closed", "quad"):
        raise ValueError(f"unknown method {method!r}")
    if method != "quad":
        val = _closed_form_integral(profile, k, np.asarray(a, float), np.asarray(b, float))
        if val is not None:
            return float(val) if np.ndim(val) == 0 else val
        if method == "closed":
            raise ValueError(f"no closed form for {profile.kind} profile with k={k}")
    a_arr, b_arr = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    if a_arr.ndim == 0:
        return _quad_integral(profile, k, float(a_arr), float(b_arr))
    # cumulative integral over the sorted endpoints: short pieces, one pass
    nodes = np.unique(np.concatenate([a_arr.ravel(), b_arr.ravel()]))
    pieces = [_quad_integral(profile, k, float(lo), float(hi)) for lo, hi in zip(nodes[:-1], nodes[1:])]
    cum = np.concatenate([[0.0], np.cumsum(pieces)])
    return cum[np.searchsorted(nodes, b_arr)] - cum[np.searchsorted(nodes, a_arr)]


def unit_sphere_area(m: int) -> float:
    """Surface area of the unit m-sphere in R^(m+1)."""
    if m < 0 or int(m) != m:
        raise ValueError("m must be a nonnegative integer")
    return 2.0 * math.pi ** ((m + 1) / 2) / math.gamma((m + 1) / 2)


def geodesic_disk_area(profile: WarpProfile, k: int, rho0: float, method: str = "auto") -> float:
    """Area of the totally geodesic k-disk of radius rho0 through the center."""
    if k < 1:
        raise ValueError("k must be >= 1")
    profile.check_radius(rho0)
    return unit_sphere_area(k - 1) * float(power_integral(profile, k, 0.0, rho0, method))


# --- the field ---------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationField:
    """W = f(r) d/dr on the punctured ball of radius rho0."""

    profile: WarpProfile
    k: int
    rho0: float
    C: float = field(init=False)

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        self.profile.check_radius(self.rho0)
        object.__setattr__(self, "C", float(power_integral(self.profile, self.k, 0.0, self.rho0)))
        if not self.C > 0:
            raise ValueError("integral of phi^(k-1) over (0, rho0) must be positive")

    def check_radius(self, r):
        r = np.asarray(r, dtype=float)
        self.profile.check_radius(r)
        if np.any(r > self.rho0 * (1 + 1e-12)):
            raise DomainError(f"radius {r.max()!r} lies outside the ball of radius {self.rho0!r}")

    def f_unchecked(self, r):
        """f without domain checks; valid slightly past rho0 for finite differences."""
        r = np.asarray(r, dtype=float)
        num = power_integral(self.profile, self.k, self.rho0, r)
        return np.asarray(num / self.profile.phi(r) ** (self.k - 1))

    def f(self, r):
        self.check_radius(r)
        out = self.f_unchecked(r)
        return float(out) if out.ndim == 0 else out

    def f_prime(self, r):
        self.check_radius(r)
        r = np.asarray(r, dtype=float)
        out = 1.0 - (self.k - 1) * np.asarray(self.f(r)) * _log_derivative(self.profile, r)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"profile": self.profile.label, "k": self.k, "rho0": self.rho0, "C": self.C}


def eval_f(field: CalibrationField, r):
    return field.f(r)


def eval_f_prime(field: CalibrationField, r):
    """f' from the ODE: 1 - (k-1) f phi'/phi."""
    return field.f_prime(r)


def ode_residual(field: CalibrationField, r):
    """f' + (k-1) f phi'/phi - 1 with f' taken by central differences of f."""
    field.check_radius(r)
    r = np.asarray(r, dtype=float)
    h = np.maximum(1e-6, 1e-6 * r)
    fd = (field.f_unchecked(r + h) - field.f_unchecked(r - h)) / (2 * h)
    out = fd + (field.k - 1) * field.f_unchecked(r) * _log_derivative(field.profile, r) - 1.0
    return float(out) if np.ndim(out) == 0 else out


def frame_divergence(field: CalibrationField, r, radial_mass):
    """Sum of <D_tau W, tau> over an orthonormal k-frame with the given radial mass.

    Equal to ``k f L + (f' - f L) m`` with ``L = phi'/phi``; it is evaluated in
    the rearranged form ``k f L (1 - m) + (f' + (k-1) f L) m`` so that the
    equality case m = 1 does not cancel two large terms against each other.
    """
    field.check_radius(r)
    m = np.asarray(radial_mass, dtype=float)
    if np.any(m < -1e-12) or np.any(m > 1 + 1e-12):
        raise DomainError("radial mass must lie in [0, 1]")
    r = np.asarray(r, dtype=float)
    f = np.asarray(field.f(r))
    fp = np.asarray(field.f_prime(r))
    L = _log_derivative(field.profile, r)
    k = field.k
    out = k * f * L * (1.0 - m) + (fp + (k - 1) * f * L) * m
    return float(out) if out.ndim == 0 else out


def asymptotic_constant(field: CalibrationField) -> float:
    """C = int_0^rho0 phi^(k-1) = omega / omega_{k-1}."""
    return field.C


def center_law(field: CalibrationField, r):
    """Predicted small-r behaviour f(r) ~ -C (phi'(0) r)^-(k-1)."""
    r = np.asarray(r, dtype=float)
    return -field.C * (field.profile.phi_prime_zero * r) ** (-(field.k - 1))


def center_law_residual(field: CalibrationField, r) -> float:
    """|f(r) (phi'(0) r)^(k-1) / C + 1|."""
    f = field.f(r)
    return abs(f * (field.profile.phi_prime_zero * r) ** (field.k - 1) / field.C + 1.0)


# --- frames ------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    """k orthonormal tangent vectors at a point.

    ``vectors`` is n x k; column j holds the coefficients of tau_j in the
    orthonormal basis {e_1, ..., e_{n-1}, e_n = d/dr}.
    """

    location: PolarPoint
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        object.__setattr__(self, "vectors", v)
        if v.ndim != 2 or v.shape[0] != self.location.dim:
            raise ValueError("frame vectors must be an n x k array")
        gram = v.T @ v
        if np.max(np.abs(gram - np.eye(v.shape[1]))) > 1e-10:
            raise ValueError("frame vectors are not orthonormal")

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    @property
    def radial_mass(self) -> float:
        return float(np.sum(self.vectors[-1] ** 2))


def _orthonormal_columns(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    for _ in range(10):
        q, r = np.linalg.qr(rng.standard_normal((n, k)))
        if np.min(np.abs(np.diag(r))) > 1e-10:
            return q
    raise RuntimeError("ten consecutive degenerate Gaussian draws")


def random_frame(location: PolarPoint, k: int, seed) -> Frame:
    n = location.dim
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    return Frame(location, _orthonormal_columns(np.random.default_rng(seed), n, k))


def radial_frame(location: PolarPoint, k: int, seed=0) -> Frame:
    """A frame whose span contains d/dr (the equality case)."""
    n = location.dim
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    vecs = np.zeros((n, k))
    vecs[-1, 0] = 1.0
    if k > 1:
        vecs[:-1, 1:] = _orthonormal_columns(np.random.default_rng(seed), n - 1, k - 1)
    return Frame(location, vecs)


def random_radial_masses(n: int, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Radial masses of ``count`` random k-frames in R^n (batched QR)."""
    z = rng.standard_normal((count, n, k))
    q, r = np.linalg.qr(z)
    diag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    bad = np.min(diag, axis=-1) <= 1e-10
    for i in np.flatnonzero(bad):
        q[i] = _orthonormal_columns(rng, n, k)
    return np.sum(q[:, -1, :] ** 2, axis=-1)


# --- chart-level oracle ------------------------------------------------------

def _chart_field(field: CalibrationField, y: np.ndarray) -> np.ndarray:
    s = float(np.linalg.norm(y))
    r = float(geodesic_radius(s))
    return float(field.f_unchecked(r)) * (y / s) / conformal_factor(y)


def frame_in_chart(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    """(ball point x, n x k chart components of the frame vectors)."""
    x = ball_from_polar(frame.location).x
    basis = tangent_basis(frame.location.theta)
    return x, basis @ frame.vectors / conformal_factor(x)


def chart_radial_mass(frame: Frame) -> float:
    """Sum_j <d/dr, tau_j>^2 computed with the ball metric."""
    x, tau = frame_in_chart(frame)
    lam = conformal_factor(x)
    radial = x / np.linalg.norm(x) / lam
    return float(np.sum((lam**2 * radial @ tau) ** 2))


def frame_divergence_oracle(field: CalibrationField, frame: Frame, step: float = ORACLE_STEP) -> float:
    """Sum_j <D_{tau_j} W, tau_j> computed directly in the Poincare ball chart.

    W's chart components are differenced numerically (fourth-order central
    stencil, step ``step * |x|``) and corrected with the Christoffel symbols of
    the conformal metric; nothing here uses the closed-form divergence.
    """
    if field.profile.kind != "hyperbolic":
        raise ValueError("the ball-chart oracle is defined for the hyperbolic profile only")
    r = frame.location.r
    if r < ORACLE_MIN_RADIUS:
        raise DomainError(f"oracle needs r >= {ORACLE_MIN_RADIUS}, got {r!r}")
    field.check_radius(r)
    x, tau = frame_in_chart(frame)
    n = x.shape[0]
    h = step * float(np.linalg.norm(x))
    jac = np.empty((n, n))  # jac[b, a] = d_a W^b
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        jac[:, a] = (8 * (_chart_field(field, x + e) - _chart_field(field, x - e))
                     - (_chart_field(field, x + 2 * e) - _chart_field(field, x - 2 * e))) / (12 * h)
    gamma = chart_christoffels(x)
    w = _chart_field(field, x)
    cov = jac + np.einsum("bac,c->ba", gamma, w)
    lam2 = conformal_factor(x) ** 2
    return float(lam2 * np.einsum("bj,ba,aj->", tau, cov, tau))


# --- condition report --------------------------------------------------------

@dataclass(frozen=True)
class Tolerances:
    boundary: float = 1e-9
    asymptotic: float = 1e-3
    divergence: float = 1e-9


@dataclass
class ConditionReport:
    boundary_residual: float
    asymptotic_residual: float
    asymptotic_radius: float
    divergence_max: float
    equality_residual: float
    equality_witnesses: list
    roundoff_allowance: float
    tolerances: Tolerances
    meta: dict

    @property
    def condition_1(self) -> bool:
        return bool(self.boundary_residual <= self.tolerances.boundary)

    @property
    def condition_2(self) -> bool:
        return bool(self.asymptotic_residual <= self.tolerances.asymptotic)

    @property
    def condition_3(self) -> bool:
        tol = self.tolerances.divergence + self.roundoff_allowance
        return bool(self.divergence_max <= 1.0 + tol and self.equality_residual <= tol)

    @property
    def passed(self) -> bool:
        return self.condition_1 and self.condition_2 and self.condition_3

    def to_dict(self) -> dict:
        return {
            "condition_1": {"residual": self.boundary_residual,
                            "tolerance": self.tolerances.boundary, "pass": self.condition_1},
            "condition_2": {"residual": self.asymptotic_residual,
                            "tolerance": self.tolerances.asymptotic, "pass": self.condition_2,
                            "radius": self.asymptotic_radius},
            "condition_3": {"residual": max(0.0, self.divergence_max - 1.0, self.equality_residual),
                            "tolerance": self.tolerances.divergence, "pass": self.condition_3,
                            "divergence_max": self.divergence_max,
                            "equality_residual": self.equality_residual,
                            "roundoff_allowance": self.roundoff_allowance,
                            "equality_witnesses": self.equality_witnesses},
            **self.meta,
        }


def _chunk_max(field, r, m):
    return float(np.max(frame_divergence(field, r, m)))


def verify_conditions(field: CalibrationField, r_grid, n_frames: int,
                      tolerances: Tolerances | None = None, seed: int = 0, dim: int = 3,
                      n_masses: int = 101, workers: int | None = None,
                      center_radius: float | None = None) -> ConditionReport:
    """Check the three calibration conditions on a radius grid.

    Condition 1 reads f at rho0, condition 2 compares f against the center
    law at ``center_radius`` (default: the smaller of the first grid radius
    and ``1e-5 * rho0``, since the law is a limit statement), condition 3 evaluates the divergence on
    the grid x radial-mass lattice, on ``n_frames`` random frames, and on one
    radial frame per grid radius (which must give exactly 1).  Failures are
    reported, never raised.
    """
    tol = tolerances or Tolerances()
    r_grid = np.sort(np.asarray(r_grid, dtype=float))
    field.check_radius(r_grid)
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    k = field.k
    workers = workers or threads_from_env()

    boundary = abs(float(field.f(field.rho0)))
    r_min = float(r_grid[0]) if center_radius is None else float(center_radius)
    if center_radius is None:
        r_min = min(r_min, CENTER_PROBE * field.rho0)
    asym = center_law_residual(field, r_min)

    masses = np.linspace(0.0, 1.0, n_masses)
    rr, mm = np.meshgrid(r_grid, masses, indexing="ij")
    rng = np.random.default_rng(seed)
    frame_r = rng.choice(r_grid, size=n_frames)
    frame_m = random_radial_masses(dim, k, n_frames, rng)
    all_r = np.concatenate([rr.ravel(), frame_r])
    all_m = np.concatenate([mm.ravel(), frame_m])
    # fixed chunking, so the max does not depend on the worker count
    chunks = np.array_split(np.arange(all_r.size), max(1, all_r.size // 20_000))
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maxima = list(pool.map(lambda c: _chunk_max(field, all_r[c], all_m[c]), chunks))
    else:
        maxima = [_chunk_max(field, all_r[c], all_m[c]) for c in chunks]
    div_max = max(maxima)

    witnesses = []
    eq_res = 0.0
    theta = np.zeros(dim)
    theta[-1] = 1.0
    for i, r in enumerate(r_grid):
        fr = radial_frame(PolarPoint(float(r), theta), k, seed=seed + i)
        d = float(frame_divergence(field, r, fr.radial_mass))
        eq_res = max(eq_res, abs(d - 1.0))
        if i in (0, len(r_grid) // 2, len(r_grid) - 1):
            witnesses.append({"r": float(r), "radial_mass": fr.radial_mass, "divergence": d})

    f_grid = np.asarray(field.f(r_grid))
    scale = float(np.max(np.abs(k * f_grid * _log_derivative(field.profile, r_grid))))
    allowance = 8 * np.finfo(float).eps * scale

    meta = {"profile": field.profile.label, "k": k, "rho0": field.rho0, "seed": seed,
            "n_frames": n_frames, "grid_points": int(r_grid.size), "dim": dim}
    return ConditionReport(boundary, asym, r_min, div_max, eq_res, witnesses, allowance, tol, meta)


def tolerances_dict(tol: Tolerances) -> dict:
    return asdict(tol)
