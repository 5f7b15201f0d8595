"""Optical coefficients: absorption, scattering factor, phase, boundary profiles.

The medium is described by an absorption field sigma(x) >= 0, a spatial
scattering factor k0(x) >= 0, and a phase function g(v', v) = h(v'.v)
depending only on the deflection cosine, so the scattering kernel
factorizes as k(x, v', v) = k0(x) * h(v'.v).  Boundary instrument
profiles S (source side) and W (detector side) weight incoming/outgoing
directions.  Two support regimes are distinguished: "touching" (k0 may be
positive up to the boundary) and "interior" (k0 vanishes within a margin
delta of the boundary — enforced exactly by evaluation in that mode).

All built-in fields carry closed-form line integrals; the generic
adaptive Gauss-Legendre engine `line_quadrature` backs callables and
sampled grids and doubles as a cross-check of the closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import erf, roots_legendre

from .geometry import Domain

__all__ = [
    "ScalarField",
    "ConstantField",
    "DiscField",
    "GaussianField",
    "BumpField",
    "GridField",
    "PhaseFunction",
    "ConstantPhase",
    "CosinePhase",
    "BoundaryProfile",
    "ConstantProfile",
    "NormalCosineProfile",
    "OpticalField",
    "attenuation_E",
    "path_attenuation",
    "k_eval",
    "line_quadrature",
    "validate_admissible",
    "scalar_field_from_config",
    "optical_field_from_config",
]

# Absolute tolerance on attenuation exponents; discontinuous indicator
# fields get the relaxed value because adaptive refinement stalls at a
# jump (the closed-form path is exact anyway).
SMOOTH_LINE_TOL = 1e-10
INDICATOR_LINE_TOL = 1e-6

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_nodes(order: int):
    """Cached Gauss-Legendre nodes/weights on (-1, 1)."""
    got = _GL_CACHE.get(order)
    if got is None:
        got = roots_legendre(order)
        _GL_CACHE[order] = (np.asarray(got[0]), np.asarray(got[1]))
    return _GL_CACHE[order]


def line_quadrature(fn, p0, p1, tol: float = SMOOTH_LINE_TOL, max_depth: int = 40):
    """Adaptive Gauss-Legendre line integral of fn along the segment p0 -> p1.

    Bisects intervals until the 15-point vs two-halves estimate agrees to
    tol (absolute).  fn must accept an (m, n) array of points.  Scalar
    endpoints only; the vectorized paths in this module use the fields'
    closed forms instead.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    length = float(np.linalg.norm(p1 - p0))
    if length == 0.0:
        return 0.0
    xg, wg = gauss_nodes(15)

    def panel(a, b):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        ts = mid + half * xg
        pts = p0 + np.multiply.outer(ts, p1 - p0)
        return half * float(wg @ np.asarray(fn(pts), dtype=float))

    total = 0.0
    stack = [(0.0, 1.0, panel(0.0, 1.0), 0)]
    while stack:
        a, b, coarse, depth = stack.pop()
        m = 0.5 * (a + b)
        left, right = panel(a, m), panel(m, b)
        if abs(left + right - coarse) <= max(tol / length, 1e-16) * (b - a) or depth >= max_depth:
            total += left + right
        else:
            stack.append((a, m, left, depth + 1))
            stack.append((m, b, right, depth + 1))
    return total * length


class ScalarField:
    """Base scalar field on R^n, zero outside its stated support.

    Subclasses provide vectorized evaluation and, where possible, a
    closed-form `line_integral`.  `max_value` is a true upper bound of
    the field (used for Monte Carlo majorants), `sharp_support`
    describes a discontinuous disc/ball support (center, radius) when
    the field has one, else None.
    """

    max_value: float = 0.0
    sharp_support = None

    def __call__(self, pts):
        raise NotImplementedError

    @property
    def smooth(self) -> bool:
        return self.sharp_support is None

    def line_integral(self, p0, p1):
        """Integral along segments; default adaptive (scalar loop)."""
        p0, p1 = np.broadcast_arrays(np.asarray(p0, dtype=float), np.asarray(p1, dtype=float))
        tol = SMOOTH_LINE_TOL if self.smooth else INDICATOR_LINE_TOL
        flat0 = p0.reshape(-1, p0.shape[-1])
        flat1 = p1.reshape(-1, p1.shape[-1])
        out = np.array([line_quadrature(self, a, b, tol) for a, b in zip(flat0, flat1)])
        return out.reshape(p0.shape[:-1])


def _seg_geometry(p0, p1, center):
    """Per-segment decomposition used by the closed-form integrals.

    Returns (length L, u0 = (p0-c).u, rho2 = squared distance of the
    segment's line to c) with u the segment direction.
    """
    d = p1 - p0
    L = np.sqrt(np.einsum("...i,...i->...", d, d))
    safe = np.where(L > 0, L, 1.0)
    u = d / safe[..., None]
    rel = p0 - center
    u0 = np.einsum("...i,...i->...", rel, u)
    rho2 = np.einsum("...i,...i->...", rel, rel) - u0 * u0
    return L, u0, np.maximum(rho2, 0.0)


@dataclass
class ConstantField(ScalarField):
    """Spatially constant field on the whole ball."""

    value: float = 0.0

    def __post_init__(self):
        self.max_value = float(self.value)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.full(pts.shape[:-1], self.value)

    def line_integral(self, p0, p1):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        d = p1 - p0
        return self.value * np.sqrt(np.einsum("...i,...i->...", d, d))


@dataclass
class DiscField(ScalarField):
    """Indicator of a disc/ball |x - center| <= radius, times an amplitude."""

    center: np.ndarray
    radius: float
    amplitude: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        self.max_value = float(abs(self.amplitude))
        self.sharp_support = (self.center, float(self.radius))

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        rel = pts - self.center
        inside = np.einsum("...i,...i->...", rel, rel) <= self.radius**2
        return np.where(inside, self.amplitude, 0.0)

    def line_integral(self, p0, p1):
        # length of segment-ball intersection, in closed form
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        L, u0, rho2 = _seg_geometry(p0, p1, self.center)
        disc = self.radius**2 - rho2
        hit = disc > 0
        half = np.sqrt(np.where(hit, disc, 0.0))
        lo = np.clip(-u0 - half, 0.0, L)
        hi = np.clip(-u0 + half, 0.0, L)
        return self.amplitude * np.where(hit, hi - lo, 0.0)


@dataclass
class GaussianField(ScalarField):
    """amplitude * exp(-|x - center|^2 / width^2).

    Not compactly supported but decays fast; admissibility checks warn
    when the tail at the boundary is non-negligible.
    """

    center: np.ndarray
    width: float
    amplitude: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.width <= 0:
            raise ValueError("width must be positive")
        self.max_value = float(abs(self.amplitude))

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        rel = pts - self.center
        return self.amplitude * np.exp(-np.einsum("...i,...i->...", rel, rel) / self.width**2)

    def line_integral(self, p0, p1):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        L, u0, rho2 = _seg_geometry(p0, p1, self.center)
        w = self.width
        pref = self.amplitude * np.exp(-rho2 / w**2) * (w * np.sqrt(np.pi) / 2.0)
        return pref * (erf((u0 + L) / w) - erf(u0 / w))


@dataclass
class BumpField(ScalarField):
    """Quartic bump amplitude * (1 - |x-c|^2/R^2)^2 on |x-c| < R, zero outside.

    C^1 across the support edge and polynomial inside, so line integrals
    are exact antiderivatives.  The workhorse smooth compactly supported
    phantom.
    """

    center: np.ndarray
    radius: float
    amplitude: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        self.max_value = float(abs(self.amplitude))
        # smooth (C^1) — not flagged as a sharp support
        self.support_ball = (self.center, float(self.radius))

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        rel = pts - self.center
        t = 1.0 - np.einsum("...i,...i->...", rel, rel) / self.radius**2
        t = np.maximum(t, 0.0)
        return self.amplitude * t * t

    def line_integral(self, p0, p1):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        L, u0, rho2 = _seg_geometry(p0, p1, self.center)
        R2 = self.radius**2
        a = 1.0 - rho2 / R2  # f(s) = amp * (a - s^2/R^2)^2 for |s| < R*sqrt(a)
        hit = a > 0
        half = self.radius * np.sqrt(np.where(hit, a, 0.0))
        lo = np.clip(-u0 - half, 0.0, L) - (-u0)
        hi = np.clip(-u0 + half, 0.0, L) - (-u0)

        def anti(s):
            return a * a * s - 2.0 * a * s**3 / (3.0 * R2) + s**5 / (5.0 * R2 * R2)

        return self.amplitude * np.where(hit, anti(hi) - anti(lo), 0.0)


class GridField(ScalarField):
    """Bilinear/trilinear interpolation of samples on a uniform grid over [-1,1]^n.

    Values outside the grid hull are obtained by clamping the sample
    point to the hull (one-sided continuation), so evaluation is defined
    up to the closed ball.  Line integrals use a fixed-density composite
    Gauss rule scaled to the grid spacing.
    """

    def __init__(self, values, extent: float = 1.0):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim not in (2, 3):
            raise ValueError("grid must be 2-d or 3-d")
        self.extent = float(extent)
        self.max_value = float(np.max(np.abs(self.values)))
        from scipy.interpolate import RegularGridInterpolator

        axes = [np.linspace(-self.extent, self.extent, m) for m in self.values.shape]
        self._interp = RegularGridInterpolator(axes, self.values, bounds_error=False, fill_value=None)
        self._spacing = 2.0 * self.extent / (max(self.values.shape) - 1)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        clamped = np.clip(pts, -self.extent, self.extent)
        return self._interp(clamped.reshape(-1, pts.shape[-1])).reshape(pts.shape[:-1])

    def line_integral(self, p0, p1):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        d = p1 - p0
        L = np.sqrt(np.einsum("...i,...i->...", d, d))
        # enough panels to put ~4 Gauss nodes per grid cell crossed
        n_panels = max(1, int(np.ceil(np.max(L) / self._spacing)))
        xg, wg = gauss_nodes(4)
        ts = ((np.arange(n_panels)[:, None] + 0.5 + 0.5 * xg[None, :]) / n_panels).reshape(-1)
        wts = np.tile(wg * 0.5 / n_panels, n_panels)
        pts = p0[..., None, :] + ts[:, None] * d[..., None, :]
        vals = self(pts)
        return L * np.einsum("...k,k->...", vals, wts)


# ---------------------------------------------------------------------------
# phase functions


class PhaseFunction:
    """Deflection-cosine phase g(v', v) = eval_cos(v'.v), continuous, > 0 at 1."""

    def eval_cos(self, c):
        raise NotImplementedError

    def __call__(self, vp, v):
        c = np.einsum("...i,...i->...", np.asarray(vp, float), np.asarray(v, float))
        return self.eval_cos(np.clip(c, -1.0, 1.0))

    def diag(self) -> float:
        """Value g(v, v) on the diagonal (forward direction)."""
        return float(self.eval_cos(1.0))

    def total(self, domain: Domain) -> float:
        """Integral of g(v', v) over v' in S^{n-1}; independent of v."""
        if domain.n == 2:
            xg, wg = gauss_nodes(64)
            ang = np.pi * (xg + 1.0)  # (0, 2*pi)
            return float(np.pi * wg @ self.eval_cos(np.cos(ang)))
        xg, wg = gauss_nodes(64)
        return float(2.0 * np.pi * wg @ self.eval_cos(xg))

    def max_cos(self) -> float:
        xg, _ = gauss_nodes(256)
        return float(np.max(self.eval_cos(np.concatenate([[-1.0, 1.0], xg]))))

    def sample(self, rng, v_in):
        """Draw outgoing directions given incoming ones, by cosine rejection.

        Proposal: uniform on the sphere; accept with eval_cos/max.  Fine
        for the mildly anisotropic phases used here.
        """
        v_in = np.asarray(v_in, dtype=float)
        m, n = v_in.shape
        out = np.empty_like(v_in)
        todo = np.arange(m)
        gmax = self.max_cos()
        while todo.size:
            cand = _uniform_sphere(rng, todo.size, n)
            c = np.einsum("ij,ij->i", cand, v_in[todo])
            acc = rng.random(todo.size) * gmax <= self.eval_cos(c)
            out[todo[acc]] = cand[acc]
            todo = todo[~acc]
        return out


def _uniform_sphere(rng, m, n):
    if n == 2:
        th = rng.random(m) * 2.0 * np.pi
        return np.column_stack([np.cos(th), np.sin(th)])
    z = 2.0 * rng.random(m) - 1.0
    phi = rng.random(m) * 2.0 * np.pi
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


@dataclass
class ConstantPhase(PhaseFunction):
    """Isotropic phase g = value (value = 1/(2 pi) or 1/(4 pi) normalizes it)."""

    value: float = 1.0

    def eval_cos(self, c):
        return np.full_like(np.asarray(c, dtype=float), self.value)

    def total(self, domain: Domain) -> float:
        return self.value * domain.sphere_measure()

    def max_cos(self) -> float:
        return float(self.value)

    def sample(self, rng, v_in):
        v_in = np.asarray(v_in, dtype=float)
        return _uniform_sphere(rng, v_in.shape[0], v_in.shape[1])


@dataclass
class CosinePhase(PhaseFunction):
    """Forward-peaked phase a + b*(1 + v'.v)/2 with a > 0, b >= 0."""

    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b < 0:
            raise ValueError("need a > 0 and b >= 0 for an admissible phase")

    def eval_cos(self, c):
        return self.a + self.b * (1.0 + np.asarray(c, dtype=float)) / 2.0

    def max_cos(self) -> float:
        return self.a + self.b


# ---------------------------------------------------------------------------
# boundary instrument profiles


class BoundaryProfile:
    """Positive weight s(x, v) on boundary point/direction pairs."""

    def __call__(self, x, v):
        raise NotImplementedError

    def min_value(self) -> float:
        raise NotImplementedError

    def max_value(self) -> float:
        raise NotImplementedError


@dataclass
class ConstantProfile(BoundaryProfile):
    value: float = 1.0

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("profile must be bounded below by a positive constant")

    def __call__(self, x, v):
        x = np.asarray(x, dtype=float)
        return np.full(np.broadcast_shapes(x.shape[:-1], np.asarray(v).shape[:-1]), self.value)

    def min_value(self) -> float:
        return self.value

    def max_value(self) -> float:
        return self.value


@dataclass
class NormalCosineProfile(BoundaryProfile):
    """base + gain * |normal(x) . v|; exercises direction-dependent instruments."""

    base: float = 1.0
    gain: float = 0.0

    def __post_init__(self):
        if self.base <= 0 or self.gain < 0:
            raise ValueError("need base > 0 and gain >= 0")

    def __call__(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.base + self.gain * np.abs(np.einsum("...i,...i->...", x, v))

    def min_value(self) -> float:
        return self.base

    def max_value(self) -> float:
        return self.base + self.gain


# ---------------------------------------------------------------------------
# the assembled medium


@dataclass
class OpticalField:
    """Absorption + scattering + phase + instrument profiles on one domain.

    support_mode "interior" additionally guarantees k0 = 0 within distance
    delta of the boundary: evaluation masks the margin exactly, so a
    slightly-too-wide phantom cannot leak mass outside the allowed
    region.
    """

    domain: Domain
    sigma: ScalarField
    k0: ScalarField
    g: PhaseFunction = dc_field(default_factory=lambda: ConstantPhase(1.0))
    S: BoundaryProfile = dc_field(default_factory=ConstantProfile)
    W: BoundaryProfile = dc_field(default_factory=ConstantProfile)
    support_mode: str = "touching"
    delta: float = 0.0

    def __post_init__(self):
        if self.support_mode not in ("touching", "interior"):
            raise ValueError("support_mode must be 'touching' or 'interior'")
        if self.support_mode == "interior" and not (0.0 < self.delta < 1.0):
            raise ValueError("interior mode needs a margin 0 < delta < 1")

    def k0_eval(self, pts):
        vals = self.k0(pts)
        if self.support_mode == "interior":
            pts = np.asarray(pts, dtype=float)
            r2 = np.einsum("...i,...i->...", pts, pts)
            vals = np.where(r2 <= (1.0 - self.delta) ** 2, vals, 0.0)
        return vals

    def scattering_rate_max(self) -> float:
        """Upper bound of the total scattering rate k0(x) * total phase mass."""
        return self.k0.max_value * self.g.total(self.domain)

    def k0_line_integral(self, p0, p1):
        # the interior margin mask is honored by construction for compactly
        # supported phantoms; validate_admissible flags violations.
        return self.k0.line_integral(p0, p1)


def attenuation_E(x1, x2, fld: OpticalField):
    """Beer-Lambert attenuation exp(-integral of sigma) along x1 -> x2."""
    return np.exp(-fld.sigma.line_integral(x1, x2))


def path_attenuation(points, fld: OpticalField):
    """Attenuation along a polyline given as an array (..., m, n) of vertices."""
    points = np.asarray(points, dtype=float)
    total = 0.0
    for i in range(points.shape[-2] - 1):
        total = total + fld.sigma.line_integral(points[..., i, :], points[..., i + 1, :])
    return np.exp(-total)


def k_eval(x, vp, v, fld: OpticalField):
    """Scattering kernel k(x, v', v) = k0(x) * g(v', v), support margin enforced."""
    return fld.k0_eval(x) * fld.g(vp, v)


def validate_admissible(fld: OpticalField, n_samples: int = 4096, seed: int = 0) -> dict:
    """Sampling-based admissibility report for an assembled medium.

    Checks nonnegativity of sigma and k0 on the ball, positivity of the
    profiles, the support margin (k0 raw values inside the forbidden ring),
    and whether a nominally smooth k0 leaks outside the ball.  Returns a
    dict of findings; raises nothing (callers decide severity).
    """
    rng = np.random.default_rng(seed)
    n = fld.domain.n
    pts = _uniform_sphere(rng, n_samples, n) * rng.random((n_samples, 1)) ** (1.0 / n)
    report: dict = {"ok": True, "issues": []}

    def flag(msg):
        report["ok"] = False
        report["issues"].append(msg)

    sig = fld.sigma(pts)
    if np.min(sig) < -1e-12:
        flag(f"sigma attains negative value {np.min(sig):.3e}")
    k0v = fld.k0(pts)
    if np.min(k0v) < -1e-12:
        flag(f"k0 attains negative value {np.min(k0v):.3e}")
    if fld.g.diag() <= 0:
        flag("phase function vanishes in the forward direction")
    for name, prof in (("S", fld.S), ("W", fld.W)):
        if prof.min_value() <= 0:
            flag(f"profile {name} is not bounded below by a positive constant")
    if fld.support_mode == "interior":
        shell = _uniform_sphere(rng, n_samples, n)
        radii = 1.0 - fld.delta * rng.random((n_samples, 1))
        leak = np.max(np.abs(fld.k0(shell * radii)))
        if leak > 1e-12:
            flag(f"support margin violated by raw k0 (max {leak:.3e} inside the ring); "
                 "evaluation masks it, but the phantom should be shrunk")
    report["indicator_tolerance"] = (
        INDICATOR_LINE_TOL if not fld.sigma.smooth or not fld.k0.smooth else SMOOTH_LINE_TOL
    )
    return report


# ---------------------------------------------------------------------------
# config assembly (shared by the CLI and tests)

_FIELD_TYPES = {}


def scalar_field_from_config(cfg: dict, n: int) -> ScalarField:
    """Build a ScalarField from a JSON-style descriptor.

    Supported types: constant {value}, disc {center, radius, amplitude},
    gaussian {center, width, amplitude}, bump {center, radius, amplitude},
    grid {values, extent}, sum {terms: [...]}.
    """
    kind = cfg.get("type")
    if kind == "constant":
        return ConstantField(float(cfg.get("value", 0.0)))
    if kind == "disc":
        return DiscField(np.asarray(cfg["center"], float), float(cfg["radius"]),
                         float(cfg.get("amplitude", 1.0)))
    if kind == "gaussian":
        return GaussianField(np.asarray(cfg["center"], float), float(cfg["width"]),
                             float(cfg.get("amplitude", 1.0)))
    if kind == "bump":
        return BumpField(np.asarray(cfg["center"], float), float(cfg["radius"]),
                         float(cfg.get("amplitude", 1.0)))
    if kind == "grid":
        return GridField(np.asarray(cfg["values"], float), float(cfg.get("extent", 1.0)))
    if kind == "sum":
        return SumField([scalar_field_from_config(t, n) for t in cfg["terms"]])
    raise ValueError(f"unknown field type {kind!r}")


class SumField(ScalarField):
    """Pointwise sum of fields; exact line integral by linearity."""

    def __init__(self, terms):
        self.terms = list(terms)
        self.max_value = float(sum(t.max_value for t in self.terms))
        sharp = [t.sharp_support for t in self.terms if t.sharp_support is not None]
        self.sharp_support = sharp[0] if len(sharp) == 1 and len(self.terms) == 1 else None

    def __call__(self, pts):
        return sum(t(pts) for t in self.terms)

    def line_integral(self, p0, p1):
        return sum(t.line_integral(p0, p1) for t in self.terms)


def optical_field_from_config(cfg: dict) -> OpticalField:
    """Assemble an OpticalField from the experiment-config 'medium' block."""
    n = int(cfg.get("dimension", 2))
    domain = Domain(n)
    sigma = scalar_field_from_config(cfg.get("sigma", {"type": "constant", "value": 0.0}), n)
    k0 = scalar_field_from_config(cfg.get("k0", {"type": "constant", "value": 0.0}), n)
    gcfg = cfg.get("phase", {"type": "constant", "value": 1.0 / domain.sphere_measure()})
    if gcfg.get("type") == "constant":
        g: PhaseFunction = ConstantPhase(float(gcfg.get("value", 1.0)))
    elif gcfg.get("type") == "cosine":
        g = CosinePhase(float(gcfg.get("a", 1.0)), float(gcfg.get("b", 0.0)))
    else:
        raise ValueError(f"unknown phase type {gcfg.get('type')!r}")

    def profile(block):
        if block is None:
            return ConstantProfile(1.0)
        if block.get("type", "constant") == "constant":
            return ConstantProfile(float(block.get("value", 1.0)))
        if block["type"] == "normal_cosine":
            return NormalCosineProfile(float(block.get("base", 1.0)), float(block.get("gain", 0.0)))
        raise ValueError(f"unknown profile type {block['type']!r}")

    return OpticalField(
        domain=domain,
        sigma=sigma,
        k0=k0,
        g=g,
        S=profile(cfg.get("source_profile")),
        W=profile(cfg.get("detector_profile")),
        support_mode=cfg.get("support_mode", "touching"),
        delta=float(cfg.get("delta", 0.0)),
    )
