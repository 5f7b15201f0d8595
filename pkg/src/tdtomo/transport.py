"""Forward synthesis of time-resolved boundary measurements.

Two synthesis paths produce the same measurement model — a pulsed
source entering at a boundary node, angularly averaged detection at all
boundary nodes:

* `albedo_truncated`: deterministic convolution of the order-0/1/2
  kernels with the source pulse (order 2 in n=2 only).  The convolution
  with the inverse-square-root onset singularity is computed after the
  substitution (arrival - onset) = xi^2, which makes the integrand
  smooth uniformly in time, so a short Gauss panel per sample suffices.

* `simulate_albedo_mc`: Monte Carlo with majorant delta tracking at the
  scattering rate k0(x) * (total phase mass) and per-segment weights
  exp(-int (sigma - sigma_s)); this is an unbiased estimator of the
  same collision series, reduces to analog tracking when sigma equals
  the scattering rate, and remains valid for sigma = 0.  Scattering
  orders are tallied separately (0, 1, 2, >= 3), with batch-level
  sums of squares for standard errors.

Monte Carlo determinism: particles are processed in fixed-size batches,
each driven by its own counter-based Philox stream keyed on (seed,
source index, batch index), and batch tallies are reduced in batch
order — so results are bitwise identical for any thread count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .geometry import Domain, boundary_grid, tau_pm
from .kernels import gamma0, gamma1_many, gamma2_many
from .optics import OpticalField, gauss_nodes
from .geometry import chord_from_endpoints

__all__ = [
    "SourcePulse",
    "MeasurementSet",
    "McConfig",
    "albedo_truncated",
    "simulate_albedo_mc",
    "albedo_matrix",
    "AlbedoMatrix",
    "convolved_power_basis",
]


@dataclass(frozen=True)
class SourcePulse:
    """Triangular unit-area pulse on [0, width], peaked at width/2."""

    width: float = 0.05

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("pulse width must be positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        h = self.width / 2.0
        return np.where((t >= 0) & (t <= self.width),
                        (1.0 - np.abs(t - h) / h) / h, 0.0)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        eta = self.width
        tt = np.clip(t, 0.0, eta)
        lower = 2.0 * tt * tt / (eta * eta)
        upper = 1.0 - 2.0 * (eta - tt) ** 2 / (eta * eta)
        return np.where(tt <= eta / 2.0, lower, upper)

    def sample(self, rng, m: int):
        u = rng.random(m)
        eta = self.width
        lo = eta / 2.0 * np.sqrt(2.0 * u)
        hi = eta * (1.0 - np.sqrt((1.0 - u) / 2.0))
        return np.where(u <= 0.5, lo, hi)

    def energy(self) -> float:
        """integral of pulse^2 (matched-filter normalization)."""
        return 4.0 / (3.0 * self.width)


def convolved_power_basis(pulse: SourcePulse, deltas, exponent: float,
                          log_factor: bool = False, nodes: int = 24):
    """(m * pulse)(delta) for the onset models m(x) = x^exponent on x > 0
    (or m(x) = log(1/x) when log_factor is set), vectorized over delta.

    Used both to synthesize traces from kernel values and as the design
    basis of the singular-coefficient fits.  Singular/kinked models
    (exponent -1/2, logs) integrate after x = xi^2.
    """
    deltas = np.asarray(deltas, dtype=float)
    xg, wg = gauss_nodes(nodes)
    eta = pulse.width
    if log_factor or exponent < 0:
        lo = np.sqrt(np.maximum(deltas - eta, 0.0))
        hi = np.sqrt(np.maximum(deltas, 0.0))
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        xi = mid[..., None] + half[..., None] * xg
        x2 = xi * xi
        if log_factor:
            with np.errstate(divide="ignore"):
                m = -np.log(np.maximum(x2, 1e-300))
            vals = pulse(deltas[..., None] - x2) * m * 2.0 * xi
        else:
            vals = pulse(deltas[..., None] - x2) * x2 ** (exponent + 0.5) * 2.0
        return half * np.einsum("...k,k->...", vals, wg)
    if exponent == 0.0:
        return pulse.cdf(deltas)
    hi = np.minimum(np.maximum(deltas, 0.0), eta)
    mid, half = 0.5 * hi, 0.5 * hi
    r = mid[..., None] + half[..., None] * xg
    vals = pulse(r) * np.maximum(deltas[..., None] - r, 0.0) ** exponent
    return half * np.einsum("...k,k->...", vals, wg)


# ---------------------------------------------------------------------------
# measurement container


_TRACE_HEADER = "t,det_index,src_index,value,stderr,order"


@dataclass
class MeasurementSet:
    """Long-form time-resolved boundary measurements.

    Scattering rows live in parallel column arrays (t, det_index,
    src_index, value, stderr, order); the ballistic channel is kept
    separately as exact (t0, amplitude) per chord because a delta has no
    faithful sample representation.  `binned` marks bin-averaged (Monte
    Carlo) rather than pointwise-sampled values.
    """

    n: int
    det_points: np.ndarray
    src_points: np.ndarray
    src_indices: np.ndarray          # indices of sources within the detector grid
    t: np.ndarray
    det_index: np.ndarray
    src_index: np.ndarray            # positions into src_points
    value: np.ndarray
    stderr: np.ndarray
    order: np.ndarray
    ballistic_t0: np.ndarray         # (n_det, n_src)
    ballistic_amp: np.ndarray
    pulse_width: float
    dt: float
    t_max: float
    binned: bool
    method: str
    seed: int | None = None
    meta: dict = dc_field(default_factory=dict)

    def orders_present(self):
        return sorted(int(o) for o in np.unique(self.order)) if self.order.size else []

    def trace(self, det: int, src: int, order=None):
        sel = (self.det_index == det) & (self.src_index == src)
        if order is not None:
            sel &= self.order == order
        ts = self.t[sel]
        idx = np.argsort(ts, kind="stable")
        return ts[idx], self.value[sel][idx], self.stderr[sel][idx]

    def scatter_sum(self, det: int, src: int):
        """Summed-over-orders scattering trace on the pair's time samples."""
        sel = (self.det_index == det) & (self.src_index == src)
        ts = np.unique(self.t[sel])
        out = np.zeros_like(ts)
        err2 = np.zeros_like(ts)
        pos = np.searchsorted(ts, self.t[sel])
        np.add.at(out, pos, self.value[sel])
        np.add.at(err2, pos, self.stderr[sel] ** 2)
        return ts, out, np.sqrt(err2)

    def save(self, outdir):
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        cols = np.column_stack([self.t, self.det_index, self.src_index,
                                self.value, self.stderr, self.order])
        np.savetxt(outdir / "traces.csv", cols, delimiter=",",
                   fmt=["%.17g", "%d", "%d", "%.17g", "%.17g", "%d"],
                   header=_TRACE_HEADER, comments="")
        nd, ns = self.ballistic_amp.shape
        di, si = np.meshgrid(np.arange(nd), np.arange(ns), indexing="ij")
        bal = np.column_stack([di.ravel(), si.ravel(),
                               self.ballistic_t0.ravel(), self.ballistic_amp.ravel()])
        np.savetxt(outdir / "ballistic.csv", bal, delimiter=",",
                   fmt=["%d", "%d", "%.17g", "%.17g"],
                   header="det_index,src_index,t0,amplitude", comments="")
        meta = {
            "dimension": self.n,
            "det_points": self.det_points.tolist(),
            "src_points": self.src_points.tolist(),
            "src_indices": np.asarray(self.src_indices).tolist(),
            "pulse_width": self.pulse_width,
            "dt": self.dt,
            "t_max": self.t_max,
            "binned": self.binned,
            "method": self.method,
            "seed": self.seed,
            "orders": self.orders_present(),
        }
        meta.update(self.meta)
        (outdir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))

    @staticmethod
    def load(outdir) -> "MeasurementSet":
        outdir = Path(outdir)
        meta = json.loads((outdir / "meta.json").read_text())
        trace_lines = (outdir / "traces.csv").read_text().splitlines()
        if len(trace_lines) > 1:
            raw = np.loadtxt(outdir / "traces.csv", delimiter=",", skiprows=1, ndmin=2)
        else:
            # ballistic-only sets have a header and no rows; loadtxt warns on those
            raw = np.zeros((0, 6))
        bal = np.loadtxt(outdir / "ballistic.csv", delimiter=",", skiprows=1, ndmin=2)
        det_points = np.asarray(meta["det_points"], dtype=float)
        src_points = np.asarray(meta["src_points"], dtype=float)
        nd, ns = len(det_points), len(src_points)
        t0 = np.zeros((nd, ns))
        amp = np.zeros((nd, ns))
        if bal.size:
            di = bal[:, 0].astype(int)
            si = bal[:, 1].astype(int)
            t0[di, si] = bal[:, 2]
            amp[di, si] = bal[:, 3]
        known = {"dimension", "det_points", "src_points", "src_indices", "pulse_width",
                 "dt", "t_max", "binned", "method", "seed", "orders"}
        return MeasurementSet(
            n=int(meta["dimension"]),
            det_points=det_points,
            src_points=src_points,
            src_indices=np.asarray(meta.get("src_indices", range(ns)), dtype=int),
            t=raw[:, 0], det_index=raw[:, 1].astype(int), src_index=raw[:, 2].astype(int),
            value=raw[:, 3], stderr=raw[:, 4], order=raw[:, 5].astype(int),
            ballistic_t0=t0, ballistic_amp=amp,
            pulse_width=float(meta["pulse_width"]), dt=float(meta["dt"]),
            t_max=float(meta["t_max"]), binned=bool(meta["binned"]),
            method=str(meta["method"]),
            seed=meta.get("seed"),
            meta={k: v for k, v in meta.items() if k not in known},
        )


# ---------------------------------------------------------------------------
# deterministic synthesis


def _convolve_gamma1(fld, pulse, src, det, t_samples, nodes=10, kernel_nodes=32):
    """(gamma1 * pulse) at t_samples via the xi^2 substitution; src/det
    (C, n), t_samples (C, T)."""
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    t_samples = np.asarray(t_samples, dtype=float)
    t0 = np.linalg.norm(det - src, axis=-1)
    dl = t_samples - t0[..., None]
    xg, wg = gauss_nodes(nodes)
    lo = np.sqrt(np.maximum(dl - pulse.width, 0.0))
    hi = np.sqrt(np.maximum(dl, 0.0))
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    xi = mid[..., None] + half[..., None] * xg
    taus = t0[..., None, None] + xi * xi
    g1 = gamma1_many(taus, src[..., None, None, :], det[..., None, None, :], fld,
                     nodes=kernel_nodes)
    vals = pulse(dl[..., None] - xi * xi) * g1 * 2.0 * xi
    return half * np.einsum("...k,k->...", vals, wg)


def _convolve_gamma2(fld, pulse, src, det, t_samples, nodes=6, **g2kw):
    """(gamma2 * pulse); the order-2 term is bounded so a plain short
    Gauss rule over the pulse support is enough."""
    src = np.asarray(src, dtype=float)
    det = np.asarray(det, dtype=float)
    t_samples = np.asarray(t_samples, dtype=float)
    t0 = np.linalg.norm(det - src, axis=-1)
    dl = t_samples - t0[..., None]
    xg, wg = gauss_nodes(nodes)
    hi = np.minimum(np.maximum(dl, 0.0), pulse.width)
    mid, half = 0.5 * hi, 0.5 * hi
    r = mid[..., None] + half[..., None] * xg
    taus = t_samples[..., None] - r
    g2 = gamma2_many(taus, src[..., None, None, :], det[..., None, None, :], fld, **g2kw)
    vals = pulse(r) * g2
    return half * np.einsum("...k,k->...", vals, wg)


def _rotate_nodes(dpts, offsets):
    """Shift n=2 boundary nodes along the circle by the given angles."""
    theta = np.arctan2(dpts[:, 1], dpts[:, 0])[:, None] + offsets
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def albedo_truncated(fld: OpticalField, pulse: SourcePulse, det_points, src_indices,
                     dt: float, t_max: float, orders=(1, 2), bin_average: bool = False,
                     cell_average: int = 0, bin_nodes: int = 6, pair_times=None,
                     kernel_nodes: int = 32, conv_nodes: int = 10,
                     gamma2_kw: dict | None = None, chunk: int = 4_000_000) -> MeasurementSet:
    """Deterministic truncated albedo synthesis on a boundary node grid.

    det_points: (K, n) boundary nodes; src_indices: which nodes act as
    sources.  Times default to the full grid of bin centers; pass
    pair_times (a callable t0 -> per-chord sample times) to synthesize
    sparse per-chord windows instead (used by the reconstruction-grade
    configs, where only times near onset matter).

    bin_average produces exact averages over each time bin, integrating
    in s = sqrt(t - t0) so the onset bin is handled to quadrature
    accuracy; cell_average > 0 additionally averages over that many
    Gauss points along each detector's boundary cell (n=2), which is
    what a binned Monte Carlo tally measures.
    """
    det_points = np.asarray(det_points, dtype=float)
    src_indices = np.asarray(src_indices, dtype=int)
    n = det_points.shape[-1]
    if 2 in orders and n == 3:
        orders = tuple(o for o in orders if o != 2)
    if cell_average and n != 2:
        raise NotImplementedError("detector-cell averaging is n=2 only")
    g2kw = gamma2_kw or {}
    n_bins = int(round(t_max / dt))
    centers = (np.arange(n_bins) + 0.5) * dt

    rows_t, rows_d, rows_s, rows_v, rows_o = [], [], [], [], []
    nd, ns = len(det_points), len(src_indices)
    bal_t0 = np.zeros((nd, ns))
    bal_amp = np.zeros((nd, ns))

    def convolve(order, srcs, detp, tsamp):
        out = np.zeros(tsamp.shape)
        T = tsamp.shape[-1]
        if order == 1:
            # window-scan probes dominate in n=2; the radial-azimuth
            # product grid dominates in n=3
            per_row = T * conv_nodes * (100 if n == 2 else 1600)
        else:
            nr = g2kw.get("n_radial", 12)
            na = g2kw.get("n_angular", 16)
            ni = g2kw.get("inner_nodes", 12)
            per_row = T * 6 * nr * na * max(ni // 2, 1)
        step = max(1, chunk // max(per_row, 1))
        for a in range(0, tsamp.shape[0], step):
            b = a + step
            if order == 1:
                out[a:b] = _convolve_gamma1(fld, pulse, srcs[a:b], detp[a:b], tsamp[a:b],
                                            nodes=conv_nodes, kernel_nodes=kernel_nodes)
            else:
                out[a:b] = _convolve_gamma2(fld, pulse, srcs[a:b], detp[a:b], tsamp[a:b],
                                            **g2kw)
        return out

    for j, si in enumerate(src_indices):
        src = det_points[si]
        dets = np.arange(nd)
        dets = dets[dets != si]
        dpts = det_points[dets]
        t0 = np.linalg.norm(dpts - src, axis=-1)
        for d in dets:
            ch = chord_from_endpoints(src, det_points[d])
            bal_t0[d, j], bal_amp[d, j] = gamma0(ch, fld)

        if bin_average and pair_times is None:
            # exact bin (and optionally detector-cell) averages
            if cell_average:
                xo, wo = gauss_nodes(cell_average)
                P = _rotate_nodes(dpts, (np.pi / nd) * xo)    # (D, m, n)
                wcell = wo / 2.0
            else:
                P = dpts[:, None, :]
                wcell = np.array([1.0])
            D, m = P.shape[0], P.shape[1]
            t0o = np.linalg.norm(P - src, axis=-1)            # (D, m)
            b_lo = np.arange(n_bins) * dt
            s_lo = np.sqrt(np.maximum(b_lo - t0o[..., None], 0.0))       # (D, m, B)
            s_hi = np.sqrt(np.maximum(b_lo + dt - t0o[..., None], 0.0))
            xq, wq = gauss_nodes(bin_nodes)
            mid, half = 0.5 * (s_lo + s_hi), 0.5 * (s_hi - s_lo)
            s = mid[..., None] + half[..., None] * xq                     # (D, m, B, q)
            tq = t0o[..., None, None] + s * s
            flat_t = tq.reshape(D * m, -1)
            flat_det = P.reshape(D * m, n)
            flat_src = np.broadcast_to(src, flat_det.shape)
            for order in orders:
                f = convolve(order, flat_src, flat_det, flat_t).reshape(D, m, n_bins, -1)
                binned = np.einsum("dmbq,q->dmb", f * 2.0 * s, wq) * half / dt
                vals = np.einsum("dmb,m->db", binned, wcell)
                keep = vals != 0.0
                ii, _ = np.nonzero(keep)
                rows_t.append(np.broadcast_to(centers, vals.shape)[keep])
                rows_d.append(dets[ii])
                rows_s.append(np.full(keep.sum(), j, dtype=int))
                rows_v.append(vals[keep])
                rows_o.append(np.full(keep.sum(), order, dtype=int))
            continue

        if pair_times is not None:
            tlist = [np.asarray(pair_times(tt), dtype=float) for tt in t0]
            T = max((len(a) for a in tlist), default=0)
            tmat = np.full((len(dets), T), np.nan)
            for i, a in enumerate(tlist):
                tmat[i, : len(a)] = a
            live = ~np.isnan(tmat)
            tmat = np.where(live, tmat, (t0[..., None] + 1.0))
        else:
            tmat = np.broadcast_to(centers, (len(dets), n_bins))
            live = np.ones(tmat.shape, dtype=bool)

        for order in orders:
            flat_t = tmat.reshape(-1, 1)
            flat_src = np.broadcast_to(src, (flat_t.shape[0], n))
            flat_det = np.repeat(dpts, tmat.shape[1], axis=0)
            vals = convolve(order, flat_src, flat_det, flat_t)[..., 0].reshape(tmat.shape)
            keep = live & (vals != 0.0)
            ii, _ = np.nonzero(keep)
            rows_t.append(tmat[keep])
            rows_d.append(dets[ii])
            rows_s.append(np.full(keep.sum(), j, dtype=int))
            rows_v.append(vals[keep])
            rows_o.append(np.full(keep.sum(), order, dtype=int))

    cat = (lambda L, dt_=float: np.concatenate(L) if L else np.zeros(0, dtype=dt_))
    return MeasurementSet(
        n=n, det_points=det_points, src_points=det_points[src_indices],
        src_indices=src_indices,
        t=cat(rows_t), det_index=cat(rows_d, int), src_index=cat(rows_s, int),
        value=cat(rows_v), stderr=np.zeros(sum(len(r) for r in rows_t)),
        order=cat(rows_o, int),
        ballistic_t0=bal_t0, ballistic_amp=bal_amp,
        pulse_width=pulse.width, dt=dt, t_max=t_max, binned=bool(bin_average),
        method="kernel",
    )


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class McConfig:
    n_particles: int = 1 << 20
    batch_size: int = 1 << 16
    seed: int = 0
    threads: int = 1
    roulette_threshold: float = 1e-6
    max_order: int = 50


def _source_strength(fld: OpticalField, src):
    """c_S = int over inward directions of S(x', v) |nu . v| dv."""
    n = fld.domain.n
    xg, wg = gauss_nodes(48)
    if n == 2:
        alpha = 0.5 * np.pi * xg  # angle from the inward normal
        inward = -src
        t = np.array([-inward[1], inward[0]])
        dirs = np.cos(alpha)[:, None] * inward + np.sin(alpha)[:, None] * t
        vals = fld.S(src, dirs) * np.cos(alpha)
        return float(0.5 * np.pi * (wg @ vals))
    cth = 0.5 * (xg + 1.0)  # cos(theta) in (0, 1)
    phi = 2.0 * np.pi * (0.5 * (xg + 1.0))
    inward = -src
    e2 = np.cross(inward, [1.0, 0.0, 0.0])
    if np.linalg.norm(e2) < 1e-6:
        e2 = np.cross(inward, [0.0, 1.0, 0.0])
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(inward, e2)
    sth = np.sqrt(1.0 - cth**2)
    dirs = (cth[:, None, None] * inward
            + (sth[:, None] * np.cos(phi))[:, :, None] * e2
            + (sth[:, None] * np.sin(phi))[:, :, None] * e3)
    vals = fld.S(np.broadcast_to(src, dirs.shape), dirs) * cth[:, None]
    # dc weight wg/2 and dphi weight pi*wg combine to pi/2
    return float(0.5 * np.pi * np.einsum("i,ij,j->", wg, vals, wg))


def _sample_birth_dirs(fld, rng, src, m):
    """Inward directions from the density S(x',v)|nu.v| / c_S."""
    n = fld.domain.n
    inward = -src
    smax = fld.S.max_value()
    out = np.empty((m, n))
    todo = np.arange(m)
    if n == 2:
        t = np.array([-inward[1], inward[0]])
        while todo.size:
            sa = 2.0 * rng.random(todo.size) - 1.0
            ca = np.sqrt(1.0 - sa * sa)
            dirs = ca[:, None] * inward + sa[:, None] * t
            acc = rng.random(todo.size) * smax <= np.asarray(fld.S(src, dirs))
            out[todo[acc]] = dirs[acc]
            todo = todo[~acc]
        return out
    e2 = np.cross(inward, [1.0, 0.0, 0.0])
    if np.linalg.norm(e2) < 1e-6:
        e2 = np.cross(inward, [0.0, 1.0, 0.0])
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(inward, e2)
    while todo.size:
        cth = np.sqrt(rng.random(todo.size))  # cosine-weighted hemisphere
        phi = 2.0 * np.pi * rng.random(todo.size)
        sth = np.sqrt(1.0 - cth**2)
        dirs = (cth[:, None] * inward + (sth * np.cos(phi))[:, None] * e2
                + (sth * np.sin(phi))[:, None] * e3)
        acc = rng.random(todo.size) * smax <= np.asarray(fld.S(src, dirs))
        out[todo[acc]] = dirs[acc]
        todo = todo[~acc]
    return out


def _mc_batch(fld, pulse, src, size, key, dt, n_bins, det_points, det_lookup, lam, c_s,
              roulette, max_order):
    """One particle batch; returns (S1, S2) tallies of shape (4, n_bins, K)."""
    n = fld.domain.n
    K = len(det_points)
    rng = np.random.Generator(np.random.Philox(key=key))
    g_total = fld.g.total(fld.domain)

    x = np.broadcast_to(src, (size, n)).copy()
    v = _sample_birth_dirs(fld, rng, src, size)
    t = pulse.sample(rng, size)
    w = np.full(size, c_s)
    order = np.zeros(size, dtype=np.int64)
    alive = np.ones(size, dtype=bool)

    S1 = np.zeros((4, n_bins, K))
    S2 = np.zeros((4, n_bins, K))

    def tally(xe, ve, te, we, orde):
        binidx = np.floor(te / dt).astype(np.int64)
        keep = (binidx >= 0) & (binidx < n_bins)
        if not np.any(keep):
            return
        xe, ve, te, we, orde, binidx = (a[keep] for a in (xe, ve, te, we, orde, binidx))
        if n == 2:
            theta = np.arctan2(xe[:, 1], xe[:, 0])
            didx = np.rint(theta / (2.0 * np.pi / K)).astype(np.int64) % K
        else:
            didx = det_lookup.query(xe)[1]
        # W at the true exit point (the node only labels the cell)
        wd = we * np.asarray(fld.W(xe, ve))
        ch = np.minimum(orde, 3)
        np.add.at(S1, (ch, binidx, didx), wd)
        np.add.at(S2, (ch, binidx, didx), wd * wd)

    it = 0
    while np.any(alive) and it < 100000:
        it += 1
        idx = np.flatnonzero(alive)
        xa, va = x[idx], v[idx]
        _, d_exit = tau_pm(xa, va)
        if lam > 0.0:
            flight = -np.log1p(-rng.random(idx.size)) / lam
        else:
            flight = np.full(idx.size, np.inf)
        exiting = flight >= d_exit
        seg = np.where(exiting, d_exit, flight)
        ends = xa + seg[:, None] * va
        # weight update: exp(-int sigma) * exp(+int sigma_s) over the segment
        expo = -np.asarray(fld.sigma.line_integral(xa, ends), dtype=float)
        if lam > 0.0:
            expo = expo + g_total * np.asarray(fld.k0_line_integral(xa, ends), dtype=float)
        w[idx] *= np.exp(expo)
        t[idx] += seg
        x[idx] = ends
        ex = idx[exiting]
        if ex.size:
            tally(x[ex], v[ex], t[ex], w[ex], order[ex])
            alive[ex] = False
        co = idx[~exiting]
        if co.size == 0:
            continue
        # null vs real collision (delta tracking at the scattering rate)
        p_real = np.asarray(fld.k0_eval(x[co]), dtype=float) * g_total / lam
        real = rng.random(co.size) < p_real
        rr = co[real]
        if rr.size:
            v[rr] = fld.g.sample(rng, v[rr])
            order[rr] += 1
            over = rr[order[rr] > max_order]
            if over.size:
                alive[over] = False
        # roulette very light particles
        small = co[w[co] < roulette]
        if small.size:
            die = rng.random(small.size) < 0.5
            alive[small[die]] = False
            w[small[~die]] *= 2.0
    return S1, S2


def simulate_albedo_mc(fld: OpticalField, pulse: SourcePulse, det_points, src_indices,
                       dt: float, t_max: float, mc: McConfig) -> MeasurementSet:
    """Monte Carlo albedo synthesis; see the module docstring for the scheme."""
    det_points = np.asarray(det_points, dtype=float)
    src_indices = np.asarray(src_indices, dtype=int)
    n = det_points.shape[-1]
    K = len(det_points)
    n_bins = int(round(t_max / dt))
    cell = fld.domain.sphere_measure() / K
    lam = fld.scattering_rate_max()

    det_lookup = None
    if n == 3:
        from scipy.spatial import cKDTree

        det_lookup = cKDTree(det_points)

    n_batches = (mc.n_particles + mc.batch_size - 1) // mc.batch_size
    sizes = [min(mc.batch_size, mc.n_particles - b * mc.batch_size) for b in range(n_batches)]

    rows = {k: [] for k in ("t", "d", "s", "v", "e", "o")}
    nd, ns = K, len(src_indices)
    bal_t0 = np.zeros((nd, ns))
    bal_amp = np.zeros((nd, ns))
    centers = (np.arange(n_bins) + 0.5) * dt

    for j, si in enumerate(src_indices):
        src = det_points[si]
        for d in range(nd):
            if d == si:
                continue
            ch = chord_from_endpoints(src, det_points[d])
            bal_t0[d, j], bal_amp[d, j] = gamma0(ch, fld)
        c_s = _source_strength(fld, src)

        def run(b):
            key = np.array([mc.seed & 0xFFFFFFFFFFFFFFFF,
                            ((si & 0xFFFFFFFF) << 32) | (b & 0xFFFFFFFF)], dtype=np.uint64)
            return _mc_batch(fld, pulse, src, sizes[b], key, dt, n_bins, det_points,
                             det_lookup, lam, c_s, mc.roulette_threshold, mc.max_order)

        if mc.threads > 1:
            with ThreadPoolExecutor(max_workers=mc.threads) as pool:
                parts = list(pool.map(run, range(n_batches)))
        else:
            parts = [run(b) for b in range(n_batches)]
        S1 = np.zeros((4, n_bins, K))
        S2 = np.zeros((4, n_bins, K))
        for a, b in parts:  # fixed batch order: bitwise deterministic
            S1 += a
            S2 += b
        N = float(mc.n_particles)
        norm = dt * cell
        mean = S1 / (N * norm)
        var = np.maximum(S2 - S1 * S1 / N, 0.0) / max(N - 1.0, 1.0)
        se = np.sqrt(var / N) / norm
        ch_idx, b_idx, d_idx = np.nonzero(S1 != 0.0)
        rows["t"].append(centers[b_idx])
        rows["d"].append(d_idx)
        rows["s"].append(np.full(d_idx.size, j, dtype=int))
        rows["v"].append(mean[ch_idx, b_idx, d_idx])
        rows["e"].append(se[ch_idx, b_idx, d_idx])
        rows["o"].append(ch_idx)

    cat = (lambda L, dt_=float: np.concatenate(L) if L else np.zeros(0, dtype=dt_))
    return MeasurementSet(
        n=n, det_points=det_points, src_points=det_points[src_indices],
        src_indices=src_indices,
        t=cat(rows["t"]), det_index=cat(rows["d"], int), src_index=cat(rows["s"], int),
        value=cat(rows["v"]), stderr=cat(rows["e"]), order=cat(rows["o"], int),
        ballistic_t0=bal_t0, ballistic_amp=bal_amp,
        pulse_width=pulse.width, dt=dt, t_max=t_max, binned=True, method="mc",
        seed=mc.seed,
        meta={"n_particles": mc.n_particles, "batch_size": mc.batch_size,
              "order_channel_3_means": "order >= 3"},
    )


# ---------------------------------------------------------------------------
# discretized albedo operator (stability studies)


@dataclass
class AlbedoMatrix:
    """Order-(<=2) albedo kernel discretized on (time difference, det, src).

    scatter[k, i, j] = sum of gamma_m(tau_k, x_j, x_i) over m = 1, 2;
    ballistic amplitudes/onsets kept exactly.  Column masses integrate
    |kernel| against dt and the boundary cell measure; the ballistic
    delta contributes its amplitude times the cell measure.
    """

    points: np.ndarray
    taus: np.ndarray
    dt: float
    scatter: np.ndarray
    ballistic_amp: np.ndarray
    ballistic_t0: np.ndarray
    cell: float

    def column_mass(self, diff: "AlbedoMatrix | None" = None):
        """L1 column masses per source node; of the difference if diff given."""
        sc = self.scatter if diff is None else self.scatter - diff.scatter
        ba = self.ballistic_amp if diff is None else self.ballistic_amp - diff.ballistic_amp
        scat_mass = np.abs(sc).sum(axis=(0, 1)) * self.dt * self.cell
        bal_mass = np.abs(ba).sum(axis=0) * self.cell
        return scat_mass + bal_mass

    def operator_norm(self, diff: "AlbedoMatrix | None" = None) -> float:
        """max over source nodes of the column mass (discrete L1->L1 norm
        of the time-convolution operator's kernel)."""
        return float(np.max(self.column_mass(diff)))

    def ballistic_column_mass(self, diff: "AlbedoMatrix") -> np.ndarray:
        return np.abs(self.ballistic_amp - diff.ballistic_amp).sum(axis=0) * self.cell


def albedo_matrix(fld: OpticalField, n_boundary: int, dt: float, t_max: float,
                  orders=(1, 2), kernel_nodes: int = 24,
                  gamma2_kw: dict | None = None) -> AlbedoMatrix:
    """Discretize the truncated albedo kernel on a boundary node grid."""
    domain = fld.domain
    pts = boundary_grid(domain, n_boundary)
    K = len(pts)
    n_bins = int(round(t_max / dt))
    taus = (np.arange(n_bins) + 0.5) * dt
    g2kw = gamma2_kw or dict(n_radial=8, n_angular=10, inner_nodes=8)
    scatter = np.zeros((n_bins, K, K))
    bal_amp = np.zeros((K, K))
    bal_t0 = np.zeros((K, K))
    for j in range(K):
        src = pts[j]
        dets = np.arange(K)
        dets = dets[dets != j]
        dpts = pts[dets]
        tgrid = np.broadcast_to(taus, (len(dets), n_bins))
        vals = gamma1_many(tgrid, src[None, :], dpts[:, None, :], fld,
                           nodes=kernel_nodes)
        if 2 in orders and domain.n == 2:
            vals = vals + gamma2_many(tgrid, src[None, :], dpts[:, None, :], fld, **g2kw)
        scatter[:, dets, j] = vals.T
        for d in dets:
            ch = chord_from_endpoints(src, pts[d])
            bal_t0[d, j], bal_amp[d, j] = gamma0(ch, fld)
    cell = domain.sphere_measure() / K
    return AlbedoMatrix(points=pts, taus=taus, dt=dt, scatter=scatter,
                        ballistic_amp=bal_amp, ballistic_t0=bal_t0, cell=cell)
