"""Singular kernels of the time-resolved boundary albedo, by scattering order.

For a source pulse entering the unit ball at x' and a detector at x, the
angularly averaged measurement decomposes over scattering orders.  The
order-m term is supported on arrival times tau >= t0 = |x - x'| and has
a universal singular structure near tau = t0:

* order 0 (ballistic): a delta at tau = t0 with a computable amplitude;
* order 1: an integral over single-scatter points z1 with |x - z1| +
  |z1 - x'| = tau (an ellipse/ellipsoid shell through the chord), whose
  strength blows up like (tau - t0)^{-1/2} in n=2, like log(1/(tau-t0))
  in n=3 when the scatterer reaches the boundary, and tends to a finite
  constant in n=3 when the scatterer is supported away from it;
* order 2 (computed in n=2 only): a double integral over the interior
  ellipse, bounded near tau = t0.

The quadratures here use the change of variables that rationalizes the
shell constraint — the same substitution that exposes the singular
factor analytically — so the remaining integrand is smooth and a single
Gauss panel per branch converges spectrally once the admissible
parameter window (scatter point inside the ball, and inside the
scatterer support when that support is a sharp disc) has been located
by probing + bisection.  Setting the scattering factor to 1 and the
instrument profiles to 1 reproduces the purely geometric sphere kernel
`n_kernel` in closed form, which is the main self-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Chord, Domain, chord_from_endpoints, orthonormal_frame, perp
from .optics import ConstantField, OpticalField, gauss_nodes

__all__ = [
    "gamma0",
    "gamma1",
    "gamma2",
    "n_kernel",
    "gamma1_limit_prediction",
    "LimitPrediction",
    "weighted_bound_scan",
    "EllipsoidDomain",
    "gamma1_many",
    "gamma2_many",
]

_PROBES = 65
_BISECT_ITERS = 30


# ---------------------------------------------------------------------------
# order 0


def gamma0(chord: Chord, fld: OpticalField):
    """Ballistic term: arrival time t0 and delta amplitude.

    The amplitude is E * W * S * (nu.v0) * |nu'.v0| / t0^{n-1} with both
    normal cosines equal to t0/2 on the unit ball; the trace of the
    measurement is amplitude * pulse(t - t0).
    """
    n = chord.n
    cosn = chord.t0 / 2.0
    E = float(np.exp(-fld.sigma.line_integral(chord.src, chord.det)))
    W = float(fld.W(chord.det, chord.v0))
    S = float(fld.S(chord.src, chord.v0))
    amp = E * W * S * cosn * cosn / chord.t0 ** (n - 1)
    return chord.t0, amp


# ---------------------------------------------------------------------------
# the geometric sphere kernel


def n_kernel(tau, x, xp, mode: str = "closed_form"):
    """Geometric kernel N(tau, x, x'): the single-scatter shell integral
    with all material factors set to 1 and no ball cutoff.

    Closed forms: 2*pi/sqrt(tau^2 - t0^2) in n=2 and
    (2*pi/(tau*t0)) * log((tau+t0)/(tau-t0)) in n=3, with t0 = |x - x'|.
    Zero for tau <= t0.  mode="quadrature" integrates the defining
    direction integral adaptively instead (used as a cross-check).
    """
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    n = x.shape[-1]
    t0 = float(np.linalg.norm(x - xp))
    tau = float(tau)
    if tau <= t0:
        return 0.0
    if mode == "closed_form":
        if n == 2:
            return 2.0 * np.pi / np.sqrt(tau * tau - t0 * t0)
        return (2.0 * np.pi / (tau * t0)) * np.log((tau + t0) / (tau - t0))
    if mode != "quadrature":
        raise ValueError(f"unknown mode {mode!r}")
    from scipy.integrate import quad

    if n == 2:
        val, _ = quad(lambda a: 1.0 / (tau - t0 * np.cos(a)), 0.0, 2.0 * np.pi,
                      epsabs=0.0, epsrel=1e-12, limit=200)
        return val
    val, _ = quad(lambda c: 2.0 * np.pi / (t0 * t0 + tau * tau - 2.0 * tau * t0 * c),
                  -1.0, 1.0, epsabs=0.0, epsrel=1e-12, limit=200)
    return val


# ---------------------------------------------------------------------------
# shared single-scatter machinery (n = 2)
#
# With D = |x - P| and elapsed time mu, scatter points z1 seen from the
# detector x at focal radius ell satisfy ell = (mu^2 - D^2) /
# (2*(mu - D*cos(Omega))).  Substituting ell = ell_new + (mu - D)/2 and
# ell_new = D*(1 + sin u)/2 maps each half-shell ("branch") to
# u in (-pi/2, pi/2) with the flat measure du, and the singular factor
# 1/sqrt(mu^2 - D^2) comes out in front.


def _gl(nodes):
    return gauss_nodes(nodes)


def _sigma_is_zero(fld):
    return isinstance(fld.sigma, ConstantField) and fld.sigma.value == 0.0


def _attenuation_two_leg(fld, a, z1, b, path_total=None):
    """exp(-int sigma) along a -> z1 -> b, with constant-sigma shortcuts."""
    if _sigma_is_zero(fld):
        return 1.0
    if isinstance(fld.sigma, ConstantField) and path_total is not None:
        # both legs lie in the ball, so their lengths sum to the elapsed time
        return np.exp(-fld.sigma.value * path_total)
    return np.exp(-(fld.sigma.line_integral(a, z1) + fld.sigma.line_integral(z1, b)))


def _scatter_window_scan(pred, shape_prefix, iters=_BISECT_ITERS, probes=_PROBES):
    """Locate the admissible u-interval per branch by probing + bisection.

    pred(u) evaluates the admissibility indicator for an array of u of
    shape shape_prefix + (k,).  Assumes the admissible set is a single
    interval (see module docstring); returns (u_lo, u_hi, nonempty).
    """
    u_p = np.linspace(-np.pi / 2, np.pi / 2, probes)
    ins = pred(np.broadcast_to(u_p, shape_prefix + (probes,)))
    nonempty = ins.any(axis=-1)
    first = ins.argmax(axis=-1)
    last = probes - 1 - ins[..., ::-1].argmax(axis=-1)
    a_lo = u_p[np.maximum(first - 1, 0)]
    b_lo = u_p[first]
    a_hi = u_p[np.minimum(last + 1, probes - 1)]
    b_hi = u_p[last]
    for _ in range(iters):
        mid = 0.5 * (a_lo + b_lo)
        pm = pred(mid[..., None])[..., 0]
        b_lo = np.where(pm, mid, b_lo)
        a_lo = np.where(pm, a_lo, mid)
        mid = 0.5 * (a_hi + b_hi)
        pm = pred(mid[..., None])[..., 0]
        b_hi = np.where(pm, mid, b_hi)
        a_hi = np.where(pm, a_hi, mid)
    u_lo = 0.5 * (a_lo + b_lo)
    u_hi = 0.5 * (a_hi + b_hi)
    u_lo = np.where(nonempty, u_lo, 0.0)
    u_hi = np.where(nonempty, u_hi, 0.0)
    return u_lo, u_hi, nonempty


def _scatter_arc_integral_n2(det, P, mu, fld, tail, nodes=32, support=None):
    """Sum over both branches of the windowed single-scatter u-integral.

    det: (..., 2) boundary detector points; P: (..., 2) source-side
    points (boundary or interior); mu: (...) elapsed times.  Returns
    (1/sqrt(mu^2 - D^2)) * sum_branches int_window Psi du, where the
    common factors W(det,v) (det.v) E(det->z1->P) k0(z1) are included
    and `tail(z1, vp, v, P_b)` supplies the remaining ones (phase
    products and, for boundary sources, the source profile); vp is the
    unit vector from P toward z1 and P_b is P broadcast to the node
    axes.  Zero where mu <= D or the window is empty.
    """
    det = np.asarray(det, dtype=float)
    P = np.asarray(P, dtype=float)
    mu = np.asarray(mu, dtype=float)
    diff = det - P
    D = np.sqrt(np.einsum("...i,...i->...", diff, diff))
    good = mu > D + 1e-14
    Dsafe = np.where(D > 0, D, 1.0)
    w_hat = diff / Dsafe[..., None]
    e2 = perp(w_hat)
    beta = np.where(good, 0.5 * (mu - D), 0.5)

    sign = np.array([1.0, -1.0])
    shape = np.broadcast_shapes(det.shape[:-1], mu.shape)
    pre = shape + (2,)

    musafe = np.where(good, mu, 2.0 * Dsafe + 1.0)

    def geom(u):
        # u: pre + (k,) -> z1, v, ell_old with matching shape
        ell_new = Dsafe[..., None, None] * (1.0 + np.sin(u)) / 2.0
        ell_old = ell_new + beta[..., None, None]
        cosO = (musafe[..., None, None]
                - (musafe**2 - Dsafe**2)[..., None, None] / (2.0 * ell_old)) / Dsafe[..., None, None]
        cosO = np.clip(cosO, -1.0, 1.0)
        sinO = sign[:, None] * np.sqrt(1.0 - cosO * cosO)
        v = cosO[..., None] * w_hat[..., None, None, :] + sinO[..., None] * e2[..., None, None, :]
        z1 = det[..., None, None, :] - ell_old[..., None] * v
        return z1, v, ell_old

    if support is not None:
        c_s, r_s = support
        c_s = np.asarray(c_s, dtype=float)

    def pred(u):
        z1, _, _ = geom(u)
        ok = np.einsum("...i,...i->...", z1, z1) < 1.0
        if support is not None:
            rel = z1 - c_s
            ok &= np.einsum("...i,...i->...", rel, rel) <= r_s * r_s
        return ok

    u_lo, u_hi, nonempty = _scatter_window_scan(pred, pre)
    xg, wg = _gl(nodes)
    mid = 0.5 * (u_lo + u_hi)
    half = np.where(nonempty & good[..., None], 0.5 * (u_hi - u_lo), 0.0)
    u_n = mid[..., None] + half[..., None] * xg
    z1, v, ell_old = geom(u_n)

    det_b = det[..., None, None, :]
    P_b = P[..., None, None, :]
    dist_from_P = musafe[..., None, None] - ell_old
    vp = (z1 - P_b) / dist_from_P[..., None]

    W = fld.W(det_b, v)
    nu_v = np.einsum("...i,...i->...", det_b, v)
    E = _attenuation_two_leg(fld, det_b, z1, P_b, path_total=musafe[..., None, None])
    k0v = fld.k0_eval(z1)
    psi = W * nu_v * E * k0v * tail(z1, vp, v, P_b)
    branch = np.einsum("...k,k->...", psi, wg) * half
    total = branch.sum(axis=-1)
    denom = np.sqrt(np.where(good, mu * mu - D * D, 1.0))
    return np.where(good, total / denom, 0.0)


def _window_support(fld):
    """Disc to which the u-window may be restricted: a sharp support or a
    known smooth support ball (k0 vanishes outside either)."""
    return fld.k0.sharp_support or getattr(fld.k0, "support_ball", None)


def _gamma1_n2_many(taus, src, det, fld, nodes=32):
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    taus = np.asarray(taus, dtype=float)

    def tail(z1, vp, v, P_b):
        g = fld.g(vp, v)
        S = fld.S(P_b, vp)
        nup = np.abs(np.einsum("...i,...i->...", P_b, vp))
        return g * S * nup

    return _scatter_arc_integral_n2(det, src, taus, fld, tail, nodes=nodes,
                                    support=_window_support(fld))


# ---------------------------------------------------------------------------
# n = 3 single scatter
#
# Seen from the detector, the shell at elapsed time tau is parameterized
# by the focal radius ell = r + (tau-t0)/2 with r in (0, t0) along the
# chord and an azimuth omega around it; integrating out the azimuth
# leaves int_0^t0 Arc(r) / ((r + e)(t0 + e - r)) dr with e = (tau-t0)/2,
# whose endpoint log layers are resolved by the substitution
# rho = log(r + e) applied from each end up to the chord midpoint.


def _gamma1_n3_many(taus, src, det, fld, n_radial=32, n_azimuth=24):
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    taus = np.asarray(taus, dtype=float)
    diff = det - src
    t0 = np.sqrt(np.einsum("...i,...i->...", diff, diff))
    v0 = diff / t0[..., None]
    e2, e3 = orthonormal_frame(v0)
    dtau = taus - t0
    good = dtau > 1e-14
    eps2 = np.where(good, 0.5 * dtau, 0.5)
    tsafe = np.where(good, taus, t0 + 1.0)

    xg, wg = _gl(n_radial)
    xo, wo = _gl(n_azimuth)

    a_rho = np.log(eps2)
    b_rho = np.log(eps2 + t0 / 2.0)
    mid_r, half_r = 0.5 * (a_rho + b_rho), 0.5 * (b_rho - a_rho)
    rho = mid_r[..., None] + half_r[..., None] * xg  # (..., R)

    out = np.zeros(np.broadcast_shapes(det.shape[:-1], taus.shape))
    for side in ("det", "src"):
        if side == "det":
            r = np.exp(rho) - eps2[..., None]
            denom = eps2[..., None] + t0[..., None] - r
        else:
            r = t0[..., None] - np.exp(rho) + eps2[..., None]
            denom = eps2[..., None] + r
        r = np.clip(r, 0.0, t0[..., None])
        ell = r + eps2[..., None]
        sinO = (tsafe[..., None] - (tsafe**2 - t0**2)[..., None] / (2.0 * ell)) / t0[..., None]
        sinO = np.clip(sinO, -1.0, 1.0)
        cosO = np.sqrt(1.0 - sinO * sinO)
        p = det[..., None, :] - (ell * sinO)[..., None] * v0[..., None, :]
        p2 = np.einsum("...i,...i->...", p, e2[..., None, :])
        p3 = np.einsum("...i,...i->...", p, e3[..., None, :])
        Rt = np.hypot(p2, p3)
        b_off = np.einsum("...i,...i->...", p, p) + (ell * cosO) ** 2 - 1.0
        a_lin = 2.0 * ell * cosO * Rt
        tinylin = a_lin < 1e-14
        ratio = np.where(tinylin, 0.0, b_off / np.where(tinylin, 1.0, a_lin))
        hw = np.arccos(np.clip(ratio, -1.0, 1.0))
        hw = np.where(tinylin, np.where(b_off < 0.0, np.pi, 0.0), hw)
        wc = np.arctan2(p3, p2)
        omega = wc[..., None] + hw[..., None] * xo  # (..., R, A)
        trans = (np.cos(omega)[..., None] * e2[..., None, None, :]
                 + np.sin(omega)[..., None] * e3[..., None, None, :])
        v = sinO[..., None, None] * v0[..., None, None, :] + cosO[..., None, None] * trans
        z1 = det[..., None, None, :] - ell[..., None, None] * v
        dist_src = (tsafe[..., None] - ell)[..., None]
        vp = (z1 - src[..., None, None, :]) / dist_src[..., None]

        det_b = det[..., None, None, :]
        src_b = src[..., None, None, :]
        W = fld.W(det_b, v)
        nu_v = np.einsum("...i,...i->...", det_b, v)
        E = _attenuation_two_leg(fld, det_b, z1, src_b, path_total=tsafe[..., None, None])
        k0v = fld.k0_eval(z1)
        g = fld.g(vp, v)
        S = fld.S(src_b, vp)
        nup = np.abs(np.einsum("...i,...i->...", src_b, vp))
        psi = W * nu_v * E * k0v * g * S * nup
        arc = np.einsum("...a,a->...", psi, wo) * hw
        out = out + np.einsum("...r,r->...", arc / denom, wg) * half_r
    # shell measure: 2^{n-2} from the area element times the 1/(2 t0)
    # substitution Jacobian gives 1/t0 overall for n = 3
    return np.where(good, out / t0, 0.0)


def gamma1_many(taus, src, det, fld: OpticalField, nodes: int = 32):
    """Vectorized order-1 kernel over broadcastable (taus, src, det).

    If the point arrays and tau array do not broadcast directly (the
    common case of per-chord points (C, n) with taus (C, T)), a tau axis
    is appended to the points.
    """
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    taus = np.asarray(taus, dtype=float)
    try:
        np.broadcast_shapes(src.shape[:-1], det.shape[:-1], taus.shape)
    except ValueError:
        src = src[..., None, :]
        det = det[..., None, :]
    n = src.shape[-1]
    if n == 2:
        return _gamma1_n2_many(taus, src, det, fld, nodes=nodes)
    return _gamma1_n3_many(taus, src, det, fld)


def gamma1(tau, src, det, fld: OpticalField, quad=None, nodes: int = 32):
    """Order-1 (single-scatter) kernel gamma1(tau, x', x).

    src and det are boundary points (arrays); tau a scalar or array of
    arrival times.  `quad` may carry a DirectionQuadrature whose node
    count sets the resolution; the actual quadrature is the substituted,
    windowed Gauss rule described in the module docstring.
    """
    if quad is not None and hasattr(quad, "nodes"):
        nodes = max(16, len(quad.weights) // 4)
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
    out = gamma1_many(tau_arr, src, det, fld, nodes=nodes)
    return float(out[0]) if np.isscalar(tau) or np.asarray(tau).ndim == 0 else out


# ---------------------------------------------------------------------------
# order 2 (n = 2)


def gamma2_many(taus, src, det, fld: OpticalField, n_radial=12, n_angular=16,
                inner_nodes=12):
    """Vectorized order-2 kernel, n=2 only.

    Outer integral over the first scatter point z2 = src + y in confocal
    ellipse coordinates (s, phi) with s = |y| + |det - src - y|: the
    radial map s = mid + half*sin(u) removes the inverse-square-root
    factors at both ends, and the Jacobian is
    (s^2 - t0^2 cos^2 phi) / (4 sqrt(s^2 - t0^2)).  The inner direction
    integral is the same windowed single-scatter core with the interior
    source z2 and elapsed time tau - |y|.  Outer nodes with zero weight
    (z2 outside the ball or outside the scatterer support) are
    compressed away before the inner integral runs.
    """
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if src.shape[-1] != 2:
        raise NotImplementedError("order-2 kernel is implemented for n=2 only")
    try:
        np.broadcast_shapes(src.shape[:-1], det.shape[:-1], taus.shape)
    except ValueError:
        src = src[..., None, :]
        det = det[..., None, :]
    diff = det - src
    t0 = np.sqrt(np.einsum("...i,...i->...", diff, diff))
    v0 = diff / t0[..., None]
    e2v = perp(v0)
    dtau = taus - t0
    good = dtau > 1e-14
    tsafe = np.where(good, taus, t0 + 1.0)

    xs, ws = _gl(n_radial)
    xp_, wp_ = _gl(n_angular)

    shape = np.broadcast_shapes(det.shape[:-1], taus.shape)
    mid_s = 0.5 * (t0 + tsafe)
    half_s = 0.5 * np.where(good, dtau, 1.0)
    u_s = 0.5 * np.pi * xs
    s_e = mid_s[..., None] + half_s[..., None] * np.sin(u_s)           # (..., S)
    ds_w = half_s[..., None] * np.cos(u_s) * (0.5 * np.pi * ws)         # GL weight * ds/du
    phi = np.pi * (xp_ + 1.0)
    dphi_w = np.pi * wp_

    ecc = np.sqrt(np.maximum(s_e**2 - t0[..., None] ** 2, 0.0))         # 2b
    y1 = 0.5 * (t0[..., None, None] + s_e[..., None] * np.cos(phi))     # (..., S, P)
    y2 = 0.5 * ecc[..., None] * np.sin(phi)
    jac = (s_e[..., None] ** 2 - (t0[..., None, None] * np.cos(phi)) ** 2) / \
        (4.0 * np.maximum(ecc[..., None], 1e-300))
    y = y1[..., None] * v0[..., None, None, :] + y2[..., None] * e2v[..., None, None, :]
    z2 = src[..., None, None, :] + y
    ynorm = np.sqrt(np.maximum(np.einsum("...i,...i->...", y, y), 1e-300))
    vout = y / ynorm[..., None]

    inside = np.einsum("...i,...i->...", z2, z2) < 1.0
    k2 = fld.k0_eval(z2)
    src_b = src[..., None, None, :]
    Sprof = fld.S(src_b, vout)
    nup = np.abs(np.einsum("...i,...i->...", src_b, vout))
    E2 = 1.0 if _sigma_is_zero(fld) else np.exp(-fld.sigma.line_integral(z2, src_b))
    outer_w = np.where(inside & good[..., None, None],
                       ds_w[..., None] * dphi_w * jac / ynorm * k2 * Sprof * nup * E2,
                       0.0)

    mu = tsafe[..., None, None] - ynorm

    flat_w = outer_w.reshape(-1)
    active = np.flatnonzero(flat_w != 0.0)
    out = np.zeros(shape)
    if active.size == 0:
        return out
    det_full = np.broadcast_to(det[..., None, None, :], z2.shape).reshape(-1, 2)[active]
    z2_flat = z2.reshape(-1, 2)[active]
    mu_flat = np.broadcast_to(mu, outer_w.shape).reshape(-1)[active]
    vout_flat = vout.reshape(-1, 2)[active]

    def tail(z1, vp, v, P_b):
        return fld.g(vp, v) * fld.g(vout_flat[:, None, None, :], vp)

    inner = _scatter_arc_integral_n2(det_full, z2_flat, mu_flat, fld, tail,
                                     nodes=inner_nodes,
                                     support=_window_support(fld))
    acc = np.zeros(flat_w.size)
    acc[active] = inner * flat_w[active]
    return acc.reshape(outer_w.shape).sum(axis=(-2, -1))


def gamma2(tau, src, det, fld: OpticalField, **kw):
    """Order-2 kernel gamma2(tau, x', x) for n=2 chords (scalar-friendly)."""
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
    out = gamma2_many(tau_arr, np.asarray(src, float), np.asarray(det, float), fld, **kw)
    return float(out[0]) if np.asarray(tau).ndim == 0 else out


# ---------------------------------------------------------------------------
# the singular-limit prediction and weighted scans


@dataclass(frozen=True)
class LimitPrediction:
    """Leading small-(tau - t0) behavior of gamma1 on a chord:
    gamma1 ~ coefficient * (tau-t0)^exponent, times log(1/(tau-t0))
    instead when log_factor is set."""

    exponent: float
    log_factor: bool
    coefficient: float


def _weighted_chord_integral(chord: Chord, fld: OpticalField, power: float, nodes=96):
    """int_0^t0 k0(x - s v0) g(v0,v0) / (s (t0 - s))^power ds via the
    arcsine substitution; exact windowing for sharp supports."""
    xg, wg = _gl(nodes)
    u_lo, u_hi = -np.pi / 2, np.pi / 2
    supp = _window_support(fld)
    if supp is not None:
        c_s, r_s = supp
        # chord point x - s v0 = src + (t0 - s) v0; solve |src + t v0 - c| = r
        rel = chord.src - np.asarray(c_s, float)
        b = rel @ chord.v0
        disc = b * b - (rel @ rel - r_s * r_s)
        if disc <= 0.0:
            return 0.0
        tlo, thi = -b - np.sqrt(disc), -b + np.sqrt(disc)
        slo = np.clip(chord.t0 - thi, 0.0, chord.t0)
        shi = np.clip(chord.t0 - tlo, 0.0, chord.t0)
        if shi - slo < 1e-15:
            return 0.0
        u_lo, u_hi = np.arcsin(2.0 * slo / chord.t0 - 1.0), np.arcsin(2.0 * shi / chord.t0 - 1.0)
    mid, half = 0.5 * (u_lo + u_hi), 0.5 * (u_hi - u_lo)
    u = mid + half * xg
    s = chord.t0 * (1.0 + np.sin(u)) / 2.0
    pts = chord.det - np.multiply.outer(s, chord.v0)
    vals = fld.k0_eval(pts) * fld.g.diag()
    base = (chord.t0 / 2.0) * np.cos(u)          # ds/du
    meas = s * (chord.t0 - s)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w_int = base / np.maximum(meas, 1e-300) ** power
    return float(half * (wg @ (vals * w_int)))


def gamma1_limit_prediction(chord: Chord, fld: OpticalField) -> LimitPrediction:
    """Predicted singular strength of the order-1 kernel on a chord.

    n=2: gamma1 ~ C (tau-t0)^{-1/2} with C = sqrt(2/t0) W S (nu.v0)
    |nu'.v0| E * int k(x - s v0, v0, v0) (s(t0-s))^{-1/2} ds.
    n=3, scatterer touching the boundary: C log(1/(tau-t0)) with
    C = (2 pi/t0^2) W S E (nu.v0)|nu'.v0| (k(x) + k(x')).
    n=3, scatterer supported away from the boundary: a finite constant
    (2 pi/t0) W S E (nu.v0)|nu'.v0| * int k (s(t0-s))^{-1} ds.
    """
    n = chord.n
    cosn = chord.t0 / 2.0
    E = float(np.exp(-fld.sigma.line_integral(chord.src, chord.det)))
    W = float(fld.W(chord.det, chord.v0))
    S = float(fld.S(chord.src, chord.v0))
    front = W * S * cosn * cosn * E
    if n == 2:
        P = _weighted_chord_integral(chord, fld, 0.5)
        return LimitPrediction(-0.5, False, np.sqrt(2.0 / chord.t0) * front * P)
    if fld.support_mode == "touching":
        kk = float(fld.k0_eval(chord.det) + fld.k0_eval(chord.src)) * fld.g.diag()
        return LimitPrediction(0.0, True, 2.0 * np.pi / chord.t0**2 * front * kk)
    P = _weighted_chord_integral(chord, fld, 1.0)
    return LimitPrediction(0.0, False, (2.0 * np.pi) / chord.t0 * front * P)


def weighted_bound_scan(fld: OpticalField, n_boundary: int = 24, n_tau: int = 24,
                        tau_margin: float = 0.5, include_gamma2: bool = False,
                        nodes: int = 32) -> dict:
    """Scan of the order-1 kernel weighted by the geometric kernel.

    Evaluates sup over a (chord, tau) grid of gamma1 / N — the
    normalized strength whose boundedness underlies the stability of
    the measurement operator — plus where the sup is attained.  Nested
    grids (doubling n_boundary and n_tau) should give stable sups for
    admissible media.  The same scan optionally reports gamma2 / N.
    """
    from .geometry import boundary_grid

    domain = fld.domain
    pts = boundary_grid(domain, n_boundary)
    ii, jj = np.triu_indices(n_boundary, k=1)
    src = pts[ii]
    det = pts[jj]
    t0 = np.linalg.norm(det - src, axis=-1)
    keep = t0 > 0.2
    src, det, t0 = src[keep], det[keep], t0[keep]
    # geometric tau spacing biased toward the singular end
    frac = np.geomspace(1e-4, tau_margin, n_tau)
    taus = t0[:, None] + frac[None, :]
    g1 = gamma1_many(taus, src[:, None, :], det[:, None, :], fld, nodes=nodes)
    if domain.n == 2:
        Nval = 2.0 * np.pi / np.sqrt(taus**2 - t0[:, None] ** 2)
    else:
        Nval = (2.0 * np.pi / (taus * t0[:, None])) * np.log((taus + t0[:, None]) / (taus - t0[:, None]))
    ratio = g1 / Nval
    flat = int(np.argmax(ratio))
    loc = np.unravel_index(flat, ratio.shape)
    report = {
        "sup_gamma1_over_N": float(np.max(ratio)),
        "argmax_t0": float(t0[loc[0]]),
        "argmax_tau_minus_t0": float(frac[loc[1]]),
        "n_boundary": n_boundary,
        "n_tau": n_tau,
    }
    if include_gamma2 and domain.n == 2:
        g2 = gamma2_many(taus, src[:, None, :], det[:, None, :], fld)
        report["sup_gamma2_over_N"] = float(np.max(g2 / Nval))
    return report


# ---------------------------------------------------------------------------
# the shell's interior region


@dataclass(frozen=True)
class EllipsoidDomain:
    """Interior region {y : |y| + |d - y| < tau} of first-scatter offsets
    y = z2 - src, with d = det - src and foci 0 and d."""

    tau: float
    src: np.ndarray
    det: np.ndarray

    @property
    def t0(self) -> float:
        return float(np.linalg.norm(self.det - self.src))

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        d = self.det - self.src
        a = np.sqrt(np.einsum("...i,...i->...", y, y))
        rel = y - d
        b = np.sqrt(np.einsum("...i,...i->...", rel, rel))
        return a + b < self.tau

    def semi_axes(self):
        a = self.tau / 2.0
        b = np.sqrt(self.tau**2 - self.t0**2) / 2.0
        return a, b

    def volume(self) -> float:
        a, b = self.semi_axes()
        n = self.det.shape[-1]
        return np.pi * a * b if n == 2 else (4.0 * np.pi / 3.0) * a * b * b

    def volume_upper_bound(self) -> float:
        """(tau + t0)-form bound, slightly above the exact volume."""
        n = self.det.shape[-1]
        t0, tau = self.t0, self.tau
        if n == 2:
            return np.pi * (tau + t0) * np.sqrt(tau**2 - t0**2) / 4.0
        return np.pi * (tau + t0) * (tau**2 - t0**2) / 6.0
