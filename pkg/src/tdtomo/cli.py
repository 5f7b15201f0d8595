"""Command-line front end: simulate, reconstruct, verify.

One JSON document configures an experiment end to end; every output
file embeds the sha256 of that document so downstream commands can
refuse data that was produced under a different configuration.  All
array data leaves as flat CSV, reports as JSON, figures as PNG.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 data mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import boundary_grid
from .optics import optical_field_from_config
from .recon import chord_report, reconstruct
from .transport import (McConfig, MeasurementSet, SourcePulse, albedo_truncated,
                        simulate_albedo_mc)
from .verify import run_suite
from .xray import Image


class ConfigError(ValueError):
    pass


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_MISMATCH = 4


# ---------------------------------------------------------------------------
# configuration


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def load_config(path) -> tuple[dict, str]:
    """Parse + validate the experiment JSON; returns (config, sha256)."""
    raw = Path(path).read_text()
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    digest = hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    validate_config(cfg)
    return cfg, digest


def validate_config(cfg: dict):
    _require(isinstance(cfg, dict), "config root must be a JSON object")
    n = cfg.get("dimension", 2)
    _require(n in (2, 3), f"dimension must be 2 or 3, got {n!r}")
    mode = cfg.get("support_mode", "touching")
    _require(mode in ("touching", "interior"),
             f"support_mode must be 'touching' or 'interior', got {mode!r}")
    if mode == "interior":
        _require(0.0 < float(cfg.get("delta", 0.0)) < 1.0,
                 "interior support needs 0 < delta < 1")
    eta = float(cfg.get("pulse_width", 0.05))
    horizon = float(cfg.get("horizon", 4.0))
    _require(horizon > 2.0, f"horizon must exceed the diameter 2, got {horizon}")
    _require(0.0 < eta < horizon, "pulse_width must lie in (0, horizon)")
    dt = float(cfg.get("time_step", 0.02))
    _require(0.0 < dt < horizon, "time_step must lie in (0, horizon)")
    nb = int(cfg.get("boundary_nodes", 64))
    _require(nb >= 8, "need at least 8 boundary nodes")
    srcs = cfg.get("sources", 1)
    if isinstance(srcs, int):
        _require(1 <= srcs <= nb, "source count must lie in [1, boundary_nodes]")
    else:
        _require(isinstance(srcs, list) and len(srcs) > 0
                 and all(isinstance(s, int) and 0 <= s < nb for s in srcs),
                 "sources must be a count or a list of node indices")
    method = cfg.get("method", "kernel")
    _require(method in ("kernel", "mc"), f"method must be 'kernel' or 'mc', got {method!r}")
    orders = cfg.get("orders", [1, 2])
    _require(isinstance(orders, list) and set(orders) <= {1, 2},
             "orders must be a sublist of [1, 2]")
    mc = cfg.get("mc", {})
    _require(isinstance(mc, dict), "mc block must be an object")
    if "particles" in mc:
        _require(int(mc["particles"]) >= 1000, "mc.particles must be at least 1000")
    sino = cfg.get("sinogram", {})
    _require(isinstance(sino, dict), "sinogram block must be an object")
    for key, default in (("angles", 180), ("offsets", 256)):
        _require(int(sino.get(key, default)) >= 16, f"sinogram.{key} must be >= 16")
    _require(int(cfg.get("image_pixels", 128)) >= 16, "image_pixels must be >= 16")
    for blk in ("sigma", "k0", "phase", "source_profile", "detector_profile"):
        val = cfg.get(blk)
        _require(val is None or isinstance(val, dict), f"{blk} block must be an object")


def _medium_config(cfg: dict) -> dict:
    keys = ("dimension", "sigma", "k0", "phase", "source_profile",
            "detector_profile", "support_mode", "delta")
    return {k: cfg[k] for k in keys if k in cfg}


def _source_indices(cfg: dict) -> list:
    nb = int(cfg.get("boundary_nodes", 64))
    srcs = cfg.get("sources", 1)
    if isinstance(srcs, int):
        return [int(round(i * nb / srcs)) % nb for i in range(srcs)]
    return list(srcs)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: dict, digest: str, out_dir: Path, order: str | None,
                 seed: int | None, threads: int) -> int:
    fld = optical_field_from_config(_medium_config(cfg))
    pulse = SourcePulse(width=float(cfg.get("pulse_width", 0.05)))
    dets = boundary_grid(fld.domain, int(cfg.get("boundary_nodes", 64)))
    src_indices = _source_indices(cfg)
    dt = float(cfg.get("time_step", 0.02))
    horizon = float(cfg.get("horizon", 4.0))
    method = cfg.get("method", "kernel")
    orders = tuple(int(o) for o in cfg.get("orders", [1, 2]))
    if order is not None:
        if order == "mc":
            method = "mc"
        else:
            method = "kernel"
            orders = {"0": (), "1": (1,), "2": (1, 2)}[order]
    if seed is None:
        seed = int(cfg.get("seed", 0))

    start = time.perf_counter()
    if method == "mc":
        mc_block = cfg.get("mc", {})
        mc = McConfig(
            n_particles=int(mc_block.get("particles", 1 << 20)),
            batch_size=int(mc_block.get("batch_size", 1 << 16)),
            seed=seed,
            threads=threads,
            max_order=int(mc_block.get("max_order", 50)),
        )
        ms = simulate_albedo_mc(fld, pulse, dets, src_indices, dt, horizon, mc)
    else:
        ms = albedo_truncated(fld, pulse, dets, src_indices, dt, horizon,
                              orders=orders)
    ms.meta.update({
        "config_sha256": digest,
        "tool_version": __version__,
    })
    ms.save(out_dir)
    elapsed = time.perf_counter() - start
    print(f"wrote {out_dir}/traces.csv ballistic.csv meta.json "
          f"({method}, orders {sorted(ms.orders_present())}, {elapsed:.1f}s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct


def _write_image_csv(img: Image, path: Path):
    np.savetxt(path, img.values, delimiter=",", fmt="%.10g")


def cmd_reconstruct(cfg: dict, digest: str, data_dir: Path, out_dir: Path,
                    allow_mismatch: bool, render: bool) -> int:
    for fname in ("meta.json", "traces.csv", "ballistic.csv"):
        if not (data_dir / fname).exists():
            print(f"error: {data_dir} is missing {fname}", file=sys.stderr)
            return EXIT_MISMATCH
    ms = MeasurementSet.load(data_dir)
    recorded = ms.meta.get("config_sha256")
    if recorded != digest and not allow_mismatch:
        print(f"error: measurement set was produced under config {recorded},\n"
              f"       current config hashes to {digest};\n"
              "       pass --allow-hash-mismatch to proceed anyway", file=sys.stderr)
        return EXIT_MISMATCH
    if len(ms.det_points) != int(cfg.get("boundary_nodes", 64)):
        print("error: boundary grid size differs between config and data",
              file=sys.stderr)
        return EXIT_MISMATCH
    if not np.any(ms.ballistic_amp > 0):
        print("error: measurement set has no ballistic channel", file=sys.stderr)
        return EXIT_MISMATCH

    fld = optical_field_from_config(_medium_config(cfg))
    pulse = SourcePulse(width=ms.pulse_width)
    mode = cfg.get("support_mode", "touching")
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {
        "tool_version": __version__,
        "config_sha256": digest,
        "data_config_sha256": recorded,
        "dimension": ms.n,
        "method": ms.method,
        "support_mode": mode,
    }
    start = time.perf_counter()

    if ms.n == 3:
        feats = chord_report(ms, pulse, fld.S, fld.W, fld.g, support_mode=mode)
        cols = np.column_stack([feats["det"], feats["src"], feats["t0"],
                                feats["x_sigma"], feats["x_k0"],
                                feats["fit_pts"], feats["resid"]])
        np.savetxt(out_dir / "chords.csv", cols, delimiter=",",
                   fmt=["%d", "%d", "%.10g", "%.10g", "%.10g", "%d", "%.10g"],
                   header="det_index,src_index,t0,x_sigma,x_k0,fit_points,residual",
                   comments="")
        report["channels"] = {
            "x_sigma": "line integral of the absorption over each chord",
            "x_k0": ("endpoint sum k0(det) + k0(src) per chord" if mode == "touching"
                     else "rim-weighted line integral of k0 per chord"),
        }
        report["n_chords"] = int(len(feats["t0"]))
        report["seconds"] = time.perf_counter() - start
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        print(f"wrote {out_dir}/chords.csv report.json (boundary channels only, n=3)")
        return EXIT_OK

    sino_cfg = cfg.get("sinogram", {})
    result = reconstruct(
        ms, pulse, fld.S, fld.W, fld.g, support_mode=mode,
        n_angles=int(sino_cfg.get("angles", 180)),
        n_q=int(sino_cfg.get("offsets", 256)),
        image_n=int(cfg.get("image_pixels", 128)))
    _write_image_csv(result.sigma, out_dir / "image_sigma.csv")
    _write_image_csv(result.k0, out_dir / "image_k0.csv")
    np.savetxt(out_dir / "sinogram_sigma.csv", result.sigma_sinogram.values,
               delimiter=",", fmt="%.10g")
    np.savetxt(out_dir / "sinogram_k0.csv", result.k0_sinogram.values,
               delimiter=",", fmt="%.10g")

    X, Y = result.k0.grid()
    truth_support = result.k0_mask & \
        (np.asarray(fld.k0_eval(np.stack([X, Y], axis=-1))) > 0)
    norms = {
        "sigma_l2_disc09": result.sigma.rel_l2_error(fld.sigma, radius=0.9),
        "k0_l2_support": result.k0.rel_l2_error(fld.k0_eval,
                                                support_mask=truth_support),
    }
    report.update({
        "norms": norms,
        "params": result.params,
        "rebin": result.rebin_report,
        "seconds": time.perf_counter() - start,
    })
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    written = ["image_sigma.csv", "image_k0.csv", "sinogram_sigma.csv",
               "sinogram_k0.csv", "report.json"]
    if render:
        from .figures import reconstruction_figures

        paths = reconstruction_figures(result, out_dir, truth_sigma=fld.sigma,
                                       truth_k0=fld.k0_eval)
        written += [p.name for p in paths]
    print(f"wrote {out_dir}/{{{', '.join(written)}}}")
    print(f"relative L2: sigma {norms['sigma_l2_disc09']:.4f} (|y|<=0.9), "
          f"k0 {norms['k0_l2_support']:.4f} (support)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(level: str, out_path: Path | None) -> int:
    results = run_suite(level)
    for r in results:
        state = "PASS" if r.passed else "FAIL"
        print(f"{state}  {r.name:32s} measured {r.measured:.3e} "
              f"tolerance {r.threshold:.1e}  ({r.seconds:.2f}s)  {r.detail}")
    ok = all(r.passed for r in results)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(
            {"level": level, "all_passed": ok,
             "checks": [r.as_dict() for r in results],
             "tool_version": __version__},
            indent=2, sort_keys=True))
    print(f"{'all checks passed' if ok else 'CHECKS FAILED'} ({level} level)")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdtomo",
                                description="Pulsed boundary transport: synthesis "
                                            "and recovery on the unit disc/ball.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="synthesize a measurement set")
    sim.add_argument("--config", required=True, type=Path)
    sim.add_argument("--out", required=True, type=Path)
    sim.add_argument("--order", choices=["0", "1", "2", "mc"],
                     help="override the synthesis channel selection")
    sim.add_argument("--seed", type=int, help="override the config seed")
    sim.add_argument("--threads", type=int, default=1,
                     help="worker threads (never changes results)")

    rec = sub.add_parser("reconstruct", help="invert a measurement set")
    rec.add_argument("--config", required=True, type=Path)
    rec.add_argument("--data", required=True, type=Path,
                     help="directory written by simulate")
    rec.add_argument("--out", required=True, type=Path)
    rec.add_argument("--allow-hash-mismatch", action="store_true",
                     help="proceed even if the data was produced under a "
                          "different config")
    rec.add_argument("--no-figures", action="store_true",
                     help="skip PNG rendering, write CSV/JSON only")

    ver = sub.add_parser("verify", help="run the named check suite")
    ver.add_argument("--level", choices=["quick", "full"], default="quick")
    ver.add_argument("--out", type=Path, help="write the JSON check report here")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.level, args.out)
        cfg, digest = load_config(args.config)
        if args.command == "simulate":
            return cmd_simulate(cfg, digest, args.out, args.order, args.seed,
                                max(1, args.threads))
        return cmd_reconstruct(cfg, digest, args.data, args.out,
                               args.allow_hash_mismatch, not args.no_figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
