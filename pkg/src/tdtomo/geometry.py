"""Geometry of the unit disc/ball: travel times, boundary grids, chords.

Everything in this package lives on the open unit ball in R^2 or R^3.
Particles move at unit speed, so times equal path lengths, the outward
normal at a boundary point x is x itself, and the longest chord has
length 2.  This module collects the purely geometric pieces: distances
to the boundary along rays, deterministic boundary node sets, direction
quadratures, and the chord bookkeeping that indexes boundary
measurements by line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOUNDARY_TOL = 1e-10
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

__all__ = [
    "Domain",
    "BoundaryPoint",
    "Chord",
    "DirectionQuadrature",
    "tau_pm",
    "boundary_grid",
    "chord_from_endpoints",
    "chord_line_coords",
    "perp",
    "orthonormal_frame",
    "unit_vectors_2d",
]


@dataclass(frozen=True)
class Domain:
    """The unit ball B(0, 1) in R^n with n in {2, 3}.  Radius fixed to 1."""

    n: int = 2

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.n!r}")

    @property
    def radius(self) -> float:
        return 1.0

    @property
    def diameter(self) -> float:
        return 2.0

    def sphere_measure(self) -> float:
        """Total measure of the direction sphere S^{n-1} (2*pi or 4*pi)."""
        return 2.0 * np.pi if self.n == 2 else 4.0 * np.pi

    def ball_volume(self) -> float:
        return np.pi if self.n == 2 else 4.0 * np.pi / 3.0

    def contains(self, pts, tol: float = BOUNDARY_TOL):
        pts = np.asarray(pts, dtype=float)
        return np.einsum("...i,...i->...", pts, pts) <= (1.0 + tol) ** 2


def tau_pm(x, v):
    """Travel times (tau_minus, tau_plus) from x to the boundary sphere.

    tau_plus is the distance from x to |y| = 1 along +v, tau_minus the
    distance along -v; both are nonnegative roots of |x + s*v| = 1 given
    |x| <= 1 and |v| = 1.  Vectorized over any broadcastable leading
    shape of x and v.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    r2 = np.einsum("...i,...i->...", x, x)
    if np.any(r2 > 1.0 + 1e-9):
        raise ValueError("tau_pm called with a point outside the closed unit ball")
    b = np.einsum("...i,...i->...", x, v)
    root = np.sqrt(np.maximum(b * b + 1.0 - r2, 0.0))
    return b + root, root - b


def boundary_grid(domain: Domain, n_points: int):
    """Deterministic boundary node set: uniform circle (n=2) or Fibonacci sphere (n=3).

    Returns an array of shape (n_points, n) of unit vectors.  In n=2 the
    nodes are the n_points-th roots of unity starting at angle 0; in n=3
    they follow the golden-angle spiral, which gives asymptotically
    equal-area cells of measure 4*pi/n_points.
    """
    if n_points < 1:
        raise ValueError("n_points must be positive")
    if domain.n == 2:
        theta = 2.0 * np.pi * np.arange(n_points) / n_points
        return np.column_stack([np.cos(theta), np.sin(theta)])
    i = np.arange(n_points)
    z = 1.0 - (2.0 * i + 1.0) / n_points
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = GOLDEN_ANGLE * i
    pts = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    # the construction is exact up to rounding; renormalize defensively
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts


@dataclass(frozen=True)
class BoundaryPoint:
    """A point on the unit sphere.  Its outward normal is the point itself."""

    position: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if abs(np.linalg.norm(pos) - 1.0) > 1e-8:
            raise ValueError("boundary point must lie on the unit sphere")
        object.__setattr__(self, "position", pos)

    @property
    def normal(self) -> np.ndarray:
        return self.position


def perp(v):
    """Rotate a 2-vector by +pi/2 (counterclockwise).  Vectorized."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def orthonormal_frame(v):
    """Two unit vectors completing a 3-vector v to a right-handed frame.

    Deterministic: the first complement axis is built from the coordinate
    axis least aligned with v, so nearby v give nearby frames except at
    axis switches.
    """
    v = np.asarray(v, dtype=float)
    axes = np.eye(3)
    pick = np.argmin(np.abs(v), axis=-1)
    a = axes[pick]
    e2 = np.cross(v, a)
    e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
    e3 = np.cross(v, e2)
    return e2, e3


def unit_vectors_2d(angles):
    angles = np.asarray(angles, dtype=float)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


@dataclass(frozen=True)
class Chord:
    """A boundary-to-boundary segment: source endpoint, detector endpoint.

    v0 is the unit vector from src to det and t0 = |det - src| the travel
    time along the chord.  q is the signed offset in the parallel-beam
    frame (v0, perp(v0)) for n=2 — every chord point is t*v0 + q*perp(v0)
    — and the unsigned distance from the chord line to the origin for
    n=3.  The identity t0 = 2*sqrt(1 - q^2) holds in both cases.
    """

    src: np.ndarray
    det: np.ndarray
    v0: np.ndarray
    t0: float
    q: float

    @property
    def n(self) -> int:
        return self.src.shape[-1]

    def nu_dot_v0(self) -> float:
        """normal(det) . v0 = |normal(src) . v0| = t0/2 on the unit ball."""
        return self.t0 / 2.0

    def point(self, s: float) -> np.ndarray:
        """Point at distance s from the source endpoint along the chord."""
        return self.src + s * self.v0

    def foot(self) -> np.ndarray:
        """The chord point closest to the origin."""
        return self.point(self.t0 / 2.0)

    def line_coords(self):
        """Canonical (angle, offset) line coordinates; n=2 only."""
        return chord_line_coords(self.src, self.det)


def chord_from_endpoints(src, det) -> Chord:
    """Build a Chord from two boundary points (arrays or BoundaryPoint)."""
    if isinstance(src, BoundaryPoint):
        src = src.position
    if isinstance(det, BoundaryPoint):
        det = det.position
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    for p in (src, det):
        if abs(np.linalg.norm(p) - 1.0) > 1e-8:
            raise ValueError("chord endpoints must lie on the unit sphere")
    diff = det - src
    t0 = float(np.linalg.norm(diff))
    if t0 < 1e-12:
        raise ValueError("chord endpoints coincide")
    v0 = diff / t0
    if src.shape[-1] == 2:
        q = float(det @ perp(v0))
    else:
        foot = det - (det @ v0) * v0
        q = float(np.linalg.norm(foot))
    return Chord(src=src, det=det, v0=v0, t0=t0, q=q)


def chord_line_coords(src, det):
    """Canonical line coordinates (angle in [0, pi), signed offset) of a 2-d chord.

    The line with coordinates (phi, q) is {q*n(phi) + t*d(phi)} with
    d(phi) = (cos phi, sin phi) and n(phi) = (-sin phi, cos phi).
    Vectorized over leading axes.
    """
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    diff = det - src
    psi = np.arctan2(diff[..., 1], diff[..., 0])
    angle = np.mod(psi, np.pi)
    offset = -det[..., 0] * np.sin(angle) + det[..., 1] * np.cos(angle)
    return angle, offset


@dataclass(frozen=True)
class DirectionQuadrature:
    """Nodes and weights integrating over the direction sphere S^{n-1}."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.nodes.shape[0] != self.weights.shape[0]:
            raise ValueError("nodes and weights must have equal length")

    @property
    def n(self) -> int:
        return self.nodes.shape[-1]

    def integrate(self, values):
        return np.tensordot(np.asarray(values, dtype=float), self.weights, axes=([-1], [0]))

    @staticmethod
    def uniform_circle(m: int) -> "DirectionQuadrature":
        """Trapezoid rule on S^1 — spectrally accurate for periodic integrands."""
        theta = 2.0 * np.pi * np.arange(m) / m
        w = np.full(m, 2.0 * np.pi / m)
        return DirectionQuadrature(unit_vectors_2d(theta), w)

    @staticmethod
    def product_sphere(n_polar: int, n_azimuth: int) -> "DirectionQuadrature":
        """Gauss in cos(polar) x uniform azimuth on S^2; weights sum to 4*pi."""
        from scipy.special import roots_legendre

        c, wc = roots_legendre(n_polar)
        phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
        s = np.sqrt(1.0 - c * c)
        nodes = np.empty((n_polar, n_azimuth, 3))
        nodes[..., 0] = s[:, None] * np.cos(phi)[None, :]
        nodes[..., 1] = s[:, None] * np.sin(phi)[None, :]
        nodes[..., 2] = c[:, None]
        w = (wc[:, None] * (2.0 * np.pi / n_azimuth)) * np.ones_like(phi)[None, :]
        return DirectionQuadrature(nodes.reshape(-1, 3), w.reshape(-1))

    @staticmethod
    def for_domain(domain: Domain, m: int) -> "DirectionQuadrature":
        if domain.n == 2:
            return DirectionQuadrature.uniform_circle(m)
        n_polar = max(int(np.sqrt(m / 2)), 2)
        return DirectionQuadrature.product_sphere(n_polar, 2 * n_polar)
