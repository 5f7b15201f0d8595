"""Self-contained verification suite: named checks with documented tolerances.

Each check pits one computational path against an independent target —
a closed form, an identity that must hold exactly, or an asymptotic
coefficient known in closed form on a canonical configuration.  The
"quick" level runs the cheap exact checks; "full" adds the asymptotic
coefficient checks and the refinement scan of the weighted kernel sups.

Checks return a CheckResult; run_suite collects them and the CLI turns
the collection into an exit code and a JSON report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import kernels
from .geometry import Domain, boundary_grid, chord_from_endpoints, tau_pm
from .kernels import EllipsoidDomain, gamma1_many, gamma1_limit_prediction, weighted_bound_scan
from .optics import (BumpField, ConstantField, CosinePhase, GaussianField,
                     NormalCosineProfile, OpticalField, line_quadrature)
from .xray import rho_weight, weighted_xray_line


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float           # the worst observed error (or scanned value)
    threshold: float          # the documented tolerance it must stay under
    seconds: float
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _result(name, start, measured, threshold, detail=""):
    return CheckResult(name=name, passed=bool(measured <= threshold),
                       measured=float(measured), threshold=float(threshold),
                       seconds=time.perf_counter() - start, detail=detail)


# ---------------------------------------------------------------------------
# quick level


def check_sphere_kernel_closed_form(n_pairs: int = 100, seed: int = 0) -> CheckResult:
    """Quadrature mode of the geometric sphere kernel vs its closed forms."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (2, 3):
        for _ in range(n_pairs):
            x = rng.normal(size=n)
            x *= rng.uniform(0.1, 0.999) / np.linalg.norm(x)
            xp = rng.normal(size=n)
            xp *= rng.uniform(0.1, 0.999) / np.linalg.norm(xp)
            t0 = np.linalg.norm(x - xp)
            tau = t0 * (1.0 + 10.0 ** rng.uniform(-3.0, 0.5))
            ref = kernels.n_kernel(tau, x, xp, mode="closed_form")
            quad = kernels.n_kernel(tau, x, xp, mode="quadrature")
            worst = max(worst, abs(quad - ref) / abs(ref))
    return _result("sphere_kernel_closed_form", start, worst, 1e-6,
                   f"{2 * n_pairs} random (tau, t0) pairs, n=2 and n=3")


class SmoothBlob:
    """Flat-topped C-infinity bump exp(1 - 1/(1 - |x-c|^2/R^2)) on |x-c| < R.

    All derivatives vanish at the support edge, so fixed Gauss rules
    converge root-exponentially on it — the right test field for
    identities checked to 1e-8.
    """

    def __init__(self, center, radius: float, amplitude: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.amplitude = float(amplitude)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        rel = pts - self.center
        u2 = np.einsum("...i,...i->...", rel, rel) / self.radius**2
        out = np.zeros(u2.shape)
        inside = u2 < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - u2[inside]))
        return self.amplitude * out


def check_weighted_transform_identity(n_fields: int = 20, n_chords: int = 50,
                                      seed: int = 1) -> CheckResult:
    """Weighted transform equals the plain transform of the rim-weighted field.

    Fields are kept supported in |y| <= 0.8 so the weighted integrand is
    smooth; the error budget is 1e-8 * (1 + |value|) per sample.  The
    weighted side runs the arcsine-substituted fixed rule, the plain
    side the adaptive bisection rule — independent code paths.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (2, 3):
        for _ in range(n_fields):
            c = rng.normal(size=n)
            c *= rng.uniform(0.0, 0.3) / max(np.linalg.norm(c), 1e-12)
            f = SmoothBlob(c, radius=rng.uniform(0.3, 0.5),
                           amplitude=rng.uniform(0.5, 2.0))

            def weighted(pts, f=f, n=n):
                return rho_weight(pts, n) * f(pts)

            for _ in range(n_chords):
                d = rng.normal(size=n)
                d /= np.linalg.norm(d)
                foot = rng.normal(size=n)
                foot -= (foot @ d) * d
                nf = np.linalg.norm(foot)
                if nf > 1e-12:
                    foot *= rng.uniform(0.0, 0.9) / nf
                half = np.sqrt(1.0 - foot @ foot)
                lhs, _ = weighted_xray_line(f, foot, d, n, nodes=1024)
                rhs = line_quadrature(weighted, foot - half * d, foot + half * d,
                                      tol=1e-12)
                err = abs(lhs - rhs) / (1.0 + abs(rhs))
                worst = max(worst, err)
    return _result("weighted_transform_identity", start, worst, 1e-8,
                   f"{n_fields} fields x {n_chords} chords, n=2 and n=3")


def check_flow_identity(nodes: int = 64) -> CheckResult:
    """Phase-space volume equals the boundary-flow integral over chords.

    Integrating f(x, v) over the disc times the direction circle must
    agree with integrating f along each inflow chord against the inflow
    measure |nu . v| dsigma dv; exercises the travel-time functions and
    the boundary measure convention shared by the kernels and the Monte
    Carlo sampler.
    """
    start = time.perf_counter()
    F = GaussianField(center=np.array([0.2, -0.1]), width=0.6, amplitude=1.0)
    e = np.array([0.8, 0.6])

    # disc x circle quadrature (polar Gauss x trapezoid)
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * (xg + 1.0)
    wr = 0.5 * wg
    ang = 2.0 * np.pi * (np.arange(2 * nodes) + 0.5) / (2 * nodes)
    pts = r[:, None, None] * np.stack([np.cos(ang), np.sin(ang)], -1)[None, :, :]
    vang = 2.0 * np.pi * (np.arange(2 * nodes) + 0.5) / (2 * nodes)
    vs = np.stack([np.cos(vang), np.sin(vang)], -1)
    space = np.einsum("ra,r->", F(pts) * r[:, None], wr) * (2.0 * np.pi / (2 * nodes))
    lhs = space * float(np.sum(1.0 + 0.3 * (vs @ e))) * (2.0 * np.pi / (2 * nodes))

    # boundary-flow side: x on the circle, v inward at angle psi to -nu
    th = 2.0 * np.pi * (np.arange(2 * nodes) + 0.5) / (2 * nodes)
    bx = np.stack([np.cos(th), np.sin(th)], -1)
    psi = 0.5 * np.pi * xg
    wpsi = 0.5 * np.pi * wg
    rhs = 0.0
    for i in range(2 * nodes):
        nu = bx[i]
        tang = np.array([-nu[1], nu[0]])
        v = -np.cos(psi)[:, None] * nu + np.sin(psi)[:, None] * tang
        _, tau_out = tau_pm(np.broadcast_to(bx[i], v.shape), v)
        tgl = 0.5 * (xg + 1.0)
        chords = bx[i] + tau_out[:, None, None] * tgl[None, :, None] * v[:, None, :]
        vals = F(chords) * (1.0 + 0.3 * (v @ e))[:, None]
        line = 0.5 * tau_out * (vals @ wg)
        rhs += float(np.sum(line * np.cos(psi) * wpsi)) * (2.0 * np.pi / (2 * nodes))
    err = abs(lhs - rhs) / abs(lhs)
    return _result("phase_space_flow_identity", start, err, 1e-8,
                   "disc x circle volume vs inflow-chord integral, n=2")


def check_shell_volume_bound() -> CheckResult:
    """The closed-form first-scatter shell volume stays under its bound."""
    start = time.perf_counter()
    worst = 0.0
    for n in (2, 3):
        src = np.zeros(n)
        src[0] = -1.0
        for t0 in (0.3, 0.9, 1.5, 1.9):
            det = src.copy()
            det[0] += t0
            det[1] = np.sqrt(max(1.0 - det[0] ** 2, 0.0)) if abs(det[0]) <= 1 else 0.0
            det /= np.linalg.norm(det)
            t0c = float(np.linalg.norm(det - src))
            for dtau in (1e-3, 0.1, 0.5, 1.0):
                shell = EllipsoidDomain(tau=t0c + dtau, src=src, det=det)
                worst = max(worst, shell.volume() / shell.volume_upper_bound())
    return _result("shell_volume_bound", start, worst, 1.0,
                   "volume / stated bound over a (t0, tau) grid, n=2 and n=3")


# ---------------------------------------------------------------------------
# full level


def _diameter_field(n: int, c: float, mode: str) -> tuple:
    fld = OpticalField(domain=Domain(n), sigma=ConstantField(0.0),
                       k0=ConstantField(c), support_mode=mode,
                       delta=0.05 if mode == "interior" else 0.0)
    src = np.zeros(n)
    det = np.zeros(n)
    src[-1], det[-1] = -1.0, 1.0
    return fld, src, det


def check_onset_coefficient_2d(c: float = 0.6) -> CheckResult:
    """n=2 canonical diameter: sqrt(tau - t0) * gamma1 -> pi * k0.

    With no absorption, unit instrument profiles, flat phase and
    constant k0 = c on the diameter, the onset coefficient is exactly
    pi * c (the weighted chord integral of 1 is pi).
    """
    start = time.perf_counter()
    fld, src, det = _diameter_field(2, c, "touching")
    val = float(gamma1_many(np.array([2.0 + 1e-8]), src, det, fld)[0])
    measured = abs(val * np.sqrt(1e-8) - np.pi * c) / (np.pi * c)
    return _result("onset_coefficient_2d", start, measured, 2e-2,
                   f"sqrt-weighted kernel vs pi*c at c={c}")


def check_onset_log_coefficient_3d(c: float = 0.7) -> CheckResult:
    """n=3 diameter with boundary-touching support: log-slope vs prediction."""
    start = time.perf_counter()
    fld, src, det = _diameter_field(3, c, "touching")
    pred = gamma1_limit_prediction(chord_from_endpoints(src, det), fld)
    d1, d2 = 1e-4, 1e-5
    g1 = float(gamma1_many(np.array([2.0 + d1]), src, det, fld)[0])
    g2 = float(gamma1_many(np.array([2.0 + d2]), src, det, fld)[0])
    slope = (g2 - g1) / np.log(d1 / d2)
    measured = abs(slope - pred.coefficient) / pred.coefficient
    return _result("onset_log_coefficient_3d", start, measured, 5e-2,
                   f"two-point log slope vs predicted {pred.coefficient:.6f}")


def check_onset_constant_3d() -> CheckResult:
    """n=3 interior-supported anisotropic medium: constant onset vs prediction."""
    start = time.perf_counter()
    fld = OpticalField(
        domain=Domain(3),
        sigma=GaussianField(center=np.array([0.2, -0.1, 0.15]), width=0.5, amplitude=0.4),
        k0=BumpField(center=np.array([0.05, -0.1, 0.0]), radius=0.5, amplitude=0.8),
        g=CosinePhase(a=1.0, b=0.9),
        S=NormalCosineProfile(base=0.7, gain=0.5),
        W=NormalCosineProfile(base=1.0, gain=0.3),
        support_mode="interior", delta=0.05)
    u = np.array([0.2, -0.1, 0.9746794])
    u /= np.linalg.norm(u)
    ch = chord_from_endpoints(-u, u)
    pred = gamma1_limit_prediction(ch, fld)
    val = float(gamma1_many(np.array([ch.t0 + 1e-4]), -u, u, fld)[0])
    measured = abs(val - pred.coefficient) / pred.coefficient
    return _result("onset_constant_3d", start, measured, 3e-2,
                   f"kernel at onset vs predicted {pred.coefficient:.6f}")


def check_weighted_sup_stability() -> CheckResult:
    """Weighted kernel sups stable under grid refinement, both supports."""
    start = time.perf_counter()
    worst = 0.0
    for mode, delta in (("touching", 0.0), ("interior", 0.1)):
        fld = OpticalField(
            domain=Domain(2),
            sigma=GaussianField(center=np.array([0.1, -0.2]), width=0.6, amplitude=0.3),
            k0=BumpField(center=np.array([-0.1, 0.15]),
                         radius=0.6 if mode == "touching" else 0.45, amplitude=0.7),
            g=CosinePhase(a=1.0, b=0.5),
            support_mode=mode, delta=delta)
        coarse = weighted_bound_scan(fld, n_boundary=16, n_tau=12)
        fine = weighted_bound_scan(fld, n_boundary=32, n_tau=24)
        rel = abs(coarse["sup_gamma1_over_N"] - fine["sup_gamma1_over_N"]) \
            / fine["sup_gamma1_over_N"]
        worst = max(worst, rel)
    return _result("weighted_sup_stability", start, worst, 5e-2,
                   "nested (chord, tau) grids, n=2, both support modes")


QUICK_CHECKS = (
    check_sphere_kernel_closed_form,
    check_weighted_transform_identity,
    check_flow_identity,
    check_shell_volume_bound,
)

FULL_CHECKS = QUICK_CHECKS + (
    check_onset_coefficient_2d,
    check_onset_log_coefficient_3d,
    check_onset_constant_3d,
    check_weighted_sup_stability,
)


def run_suite(level: str = "quick") -> list[CheckResult]:
    if level not in ("quick", "full"):
        raise ValueError("level must be 'quick' or 'full'")
    checks = QUICK_CHECKS if level == "quick" else FULL_CHECKS
    return [fn() for fn in checks]
