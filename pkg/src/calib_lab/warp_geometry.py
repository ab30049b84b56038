"""Rotationally symmetric ambient geometry.

A warp profile phi defines the metric ``ds^2 = dr^2 + phi(r)^2 dOmega^2`` on a
punctured ball around a center point p.  The built-in profiles are the
space forms (flat, hyperbolic, round sphere); tabulated profiles cover
everything else.  For the hyperbolic profile a Poincare ball chart is
provided, which the mesh code and the chart-level divergence oracle use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import CenterSingularityError, DomainError, ProfileError

KINDS = ("euclidean", "hyperbolic", "spherical", "tabulated")

# below this radius the built-in log-derivatives switch to their Laurent series
SERIES_CUTOFF = 1e-4
# slack on the domain end check, so that grids built with linspace pass
DOMAIN_SLACK = 1e-12
# radius at which phi'(0) is estimated for tabulated profiles
PHI_PRIME_PROBE = 1e-6


@dataclass(frozen=True)
class WarpProfile:
    """Warp factor phi of a rotationally symmetric metric.

    ``phi`` and ``phi_prime`` accept scalars or numpy arrays.  ``label`` is
    the string used in reports (``"hyperbolic"``, ``"table:path"``...).
    """

    kind: str
    phi: Callable
    phi_prime: Callable
    domain_end: float
    phi_prime_zero: float = 1.0
    samples: tuple | None = None
    label: str = ""

    def __post_init__(self):
        if not self.label:
            object.__setattr__(self, "label", self.kind)

    def check_radius(self, r):
        """Raise unless every r lies in (0, domain_end]."""
        r = np.asarray(r, dtype=float)
        if np.any(~np.isfinite(r)) or np.any(r <= 0.0):
            if np.any(r == 0.0):
                raise CenterSingularityError("r = 0 is the center p; only r > 0 is admissible")
            raise DomainError(f"radius must be positive, got min {float(r.min())!r}")
        if np.any(r > self.domain_end * (1 + DOMAIN_SLACK)):
            raise DomainError(
                f"radius {float(r.max())!r} exceeds the admissible domain end {self.domain_end!r} "
                f"of the {self.label} profile (phi' >= 0 is required)"
            )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "label": self.label, "domain_end": _json_float(self.domain_end)}


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


def _cos_clamped(r):
    # cos(pi/2) evaluates to 6e-17; phi' >= 0 on the closed domain requires clamping
    return np.maximum(np.cos(r), 0.0)


def make_profile(kind: str, samples: Sequence[tuple[float, float]] | np.ndarray | None = None,
                 domain_end: float | None = None, label: str | None = None) -> WarpProfile:
    """Build and validate a warp profile.

    ``kind`` is one of ``euclidean``, ``hyperbolic``, ``spherical`` or
    ``tabulated``.  Tabulated profiles need ``samples``, a sequence of
    ``(r, phi)`` pairs, and are interpolated with a monotone cubic (PCHIP),
    which keeps phi' >= 0 whenever the samples are nondecreasing.
    """
    if kind == "euclidean":
        end = math.inf if domain_end is None else float(domain_end)
        prof = WarpProfile(kind, lambda r: np.asarray(r, dtype=float) * 1.0,
                           lambda r: np.ones_like(np.asarray(r, dtype=float)), end)
    elif kind == "hyperbolic":
        end = math.inf if domain_end is None else float(domain_end)
        prof = WarpProfile(kind, np.sinh, np.cosh, end)
    elif kind == "spherical":
        end = math.pi / 2 if domain_end is None else float(domain_end)
        if end > math.pi / 2 * (1 + DOMAIN_SLACK):
            raise ProfileError(
                f"spherical profile requires domain_end <= pi/2 (phi' = cos r >= 0), got {end!r}"
            )
        prof = WarpProfile(kind, np.sin, _cos_clamped, end)
    elif kind == "tabulated":
        if samples is None:
            raise ProfileError("tabulated profile requires samples")
        return _tabulated_profile(np.asarray(samples, dtype=float), domain_end, label)
    else:
        raise ProfileError(f"unknown profile kind {kind!r}; expected one of {KINDS}")
    if not prof.domain_end > 0:
        raise ProfileError("domain_end must be positive")
    if label:
        object.__setattr__(prof, "label", label)
    return prof


def _tabulated_profile(table: np.ndarray, domain_end, label) -> WarpProfile:
    if table.ndim != 2 or table.shape[1] != 2:
        raise ProfileError("samples must be (r, phi) pairs")
    if len(table) < 8:
        raise ProfileError(f"tabulated profile needs at least 8 samples, got {len(table)}")
    r, phi = table[:, 0], table[:, 1]
    if not np.all(np.isfinite(table)):
        raise ProfileError("samples contain non-finite values")
    if np.any(np.diff(r) <= 0):
        raise ProfileError("sample radii must be strictly increasing")
    if r[0] >= 1e-3 or r[0] < 0:
        raise ProfileError(f"first sample radius must lie in [0, 1e-3), got {r[0]!r}")
    if r[0] == 0.0:
        if phi[0] != 0.0:
            raise ProfileError("phi must vanish at r = 0")
        if np.any(phi[1:] <= 0):
            raise ProfileError("phi must be positive for r > 0")
    else:
        if np.any(phi <= 0):
            raise ProfileError("phi must be positive for r > 0")
        r = np.concatenate([[0.0], r])
        phi = np.concatenate([[0.0], phi])
    if np.any(np.diff(phi) < 0):
        bad = int(np.argmax(np.diff(phi) < 0))
        raise ProfileError(
            f"phi' < 0 near r = {r[bad + 1]!r}: the warp factor must be nondecreasing "
            "on the working interval"
        )
    interp = PchipInterpolator(r, phi, extrapolate=True)
    deriv = interp.derivative()
    if np.any(deriv(r) < 0):
        raise ProfileError("interpolated phi' is negative on the sample grid")
    h = PHI_PRIME_PROBE / 2
    phi_prime_zero = float((interp(PHI_PRIME_PROBE + h) - interp(PHI_PRIME_PROBE - h)) / (2 * h))
    if not phi_prime_zero > 0:
        raise ProfileError(f"estimated phi'(0) = {phi_prime_zero!r} must be positive")
    end = float(r[-1]) if domain_end is None else float(domain_end)
    if end > r[-1] * (1 + DOMAIN_SLACK):
        raise ProfileError("domain_end beyond the last sample")
    return WarpProfile(
        "tabulated", interp, deriv, end,
        phi_prime_zero=phi_prime_zero,
        samples=tuple(map(tuple, table.tolist())),
        label=label or "tabulated",
    )


def load_profile_table(path: str | Path) -> WarpProfile:
    """Parse a two-column ``r phi`` text file ('#' comments) into a profile."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ProfileError(f"{path}:{lineno}: expected two columns 'r phi'")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ProfileError(f"{path}:{lineno}: {exc}") from None
    return make_profile("tabulated", rows, label=f"table:{path}")


def save_profile_table(path: str | Path, r: np.ndarray, phi: np.ndarray, comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    lines.append("# r phi")
    lines += [f"{a:.17g} {b:.17g}" for a, b in zip(r, phi)]
    Path(path).write_text("\n".join(lines) + "\n")


def log_derivative(profile: WarpProfile, r):
    """phi'(r) / phi(r), the principal curvature of the geodesic sphere of radius r."""
    profile.check_radius(r)
    r = np.asarray(r, dtype=float)
    out = _log_derivative(profile, r)
    return float(out) if out.ndim == 0 else out


def _log_derivative(profile: WarpProfile, r: np.ndarray) -> np.ndarray:
    kind = profile.kind
    if kind == "tabulated":
        return np.asarray(profile.phi_prime(r) / profile.phi(r))
    small = r < SERIES_CUTOFF
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "euclidean":
            return 1.0 / r
        if kind == "hyperbolic":
            direct = 1.0 / np.tanh(r)
            series = 1.0 / r + r / 3.0 - r**3 / 45.0
        else:
            direct = _cos_clamped(r) / np.sin(r)
            series = 1.0 / r - r / 3.0 - r**3 / 45.0
    return np.where(small, series, direct)


# --- polar / Poincare ball conversion (hyperbolic only) ----------------------

@dataclass(frozen=True)
class PolarPoint:
    """Geodesic polar coordinates (r, theta) about the center p."""

    r: float
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        if not self.r > 0:
            raise CenterSingularityError("PolarPoint needs r > 0")
        if abs(np.linalg.norm(theta) - 1.0) > 1e-12:
            raise DomainError("theta must be a unit vector")

    @property
    def dim(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class BallPoint:
    """Euclidean coordinates of a point in the Poincare ball model."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "x", x)
        if not np.linalg.norm(x) < 1.0:
            raise DomainError("Poincare ball points need |x| < 1")


def geodesic_radius(s):
    """Hyperbolic distance to the origin of a ball point with Euclidean norm s."""
    return 2.0 * np.arctanh(s)


def ball_radius(r):
    """Euclidean norm in the ball chart of a point at hyperbolic distance r."""
    return np.tanh(np.asarray(r, dtype=float) / 2.0)


def polar_from_ball(point: BallPoint) -> PolarPoint:
    s = float(np.linalg.norm(point.x))
    if s == 0.0:
        raise CenterSingularityError("the origin is the center p and has no polar angle")
    return PolarPoint(float(geodesic_radius(s)), point.x / s)


def ball_from_polar(q: PolarPoint) -> BallPoint:
    if not math.isfinite(q.r):
        raise DomainError("r must be finite")
    return BallPoint(float(ball_radius(q.r)) * q.theta)


def conformal_factor(x):
    """lambda(x) = 2 / (1 - |x|^2); the ball metric is lambda^2 times the Euclidean one."""
    x = np.asarray(x, dtype=float)
    return 2.0 / (1.0 - np.sum(x * x, axis=-1))


def ball_metric(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return conformal_factor(x) ** 2 * np.eye(x.shape[-1])


def chart_christoffels(x) -> np.ndarray:
    """Christoffel symbols ``G[k, i, j]`` of the Poincare ball metric at x.

    For g = exp(2u) delta with u = log(2 / (1 - |x|^2)):
    ``G^k_ij = delta_ik du_j + delta_jk du_i - delta_ij du_k``.
    """
    if isinstance(x, BallPoint):
        x = x.x
    x = np.asarray(x, dtype=float)
    sq = float(x @ x)
    if not sq < 1.0:
        raise DomainError("Poincare ball points need |x| < 1")
    du = 2.0 * x / (1.0 - sq)
    eye = np.eye(x.shape[0])
    return (np.einsum("ki,j->kij", eye, du)
            + np.einsum("kj,i->kij", eye, du)
            - np.einsum("ij,k->kij", eye, du))


def tangent_basis(theta: np.ndarray) -> np.ndarray:
    """Euclidean orthonormal basis of R^n whose last column is theta.

    The first n-1 columns span the tangent space of the sphere through theta;
    divided by the conformal factor they give the orthonormal frame
    {e_1, ..., e_{n-1}, e_n = d/dr} at a ball point.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[0]
    # Householder reflection taking the last standard basis vector to theta
    e_last = np.zeros(n)
    e_last[-1] = 1.0
    v = e_last - theta
    nv = float(v @ v)
    if nv < 1e-30:
        return np.eye(n)
    basis = np.eye(n) - 2.0 * np.outer(v, v) / nv
    return basis
