"""Command-line front end: config validation, exit codes, file outputs."""

import hashlib
import json
import shutil

import numpy as np
import pytest

from tdtomo import cli
from tdtomo.transport import MeasurementSet


def smoke_config(**overrides):
    """A config small enough that simulate + reconstruct run in seconds."""
    cfg = {
        "dimension": 2,
        "support_mode": "touching",
        "sigma": {"type": "constant", "value": 0.25},
        "k0": {"type": "constant", "value": 0.5},
        "pulse_width": 0.03,
        "time_step": 0.04,
        "horizon": 2.6,
        "boundary_nodes": 16,
        "sources": 2,
        "method": "kernel",
        "orders": [1],
        "seed": 11,
        "sinogram": {"angles": 16, "offsets": 16},
        "image_pixels": 16,
    }
    cfg.update(overrides)
    return cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def kernel_run(tmp_path_factory):
    """One shared simulate run: (config path, config dict, data dir)."""
    root = tmp_path_factory.mktemp("cli_kernel")
    cfg = smoke_config()
    cfg_path = write_config(root / "exp.json", cfg)
    data_dir = root / "data"
    assert cli.main(["simulate", "--config", str(cfg_path),
                     "--out", str(data_dir)]) == cli.EXIT_OK
    return cfg_path, cfg, data_dir


# ---------------------------------------------------------------------------
# configuration handling


def test_validate_config_accepts_smoke_config():
    cli.validate_config(smoke_config())


def test_validate_config_rejects_each_bad_field():
    bad = [
        {"dimension": 4},
        {"support_mode": "edge"},
        {"support_mode": "interior"},            # missing delta
        {"support_mode": "interior", "delta": 1.0},
        {"horizon": 1.5},                        # shorter than the diameter
        {"pulse_width": 0.0},
        {"pulse_width": 99.0},                   # outside (0, horizon)
        {"time_step": 0.0},
        {"boundary_nodes": 4},
        {"sources": 0},
        {"sources": [-1]},
        {"sources": [16]},                       # index beyond the grid
        {"sources": "three"},
        {"method": "fem"},
        {"orders": [3]},
        {"orders": "12"},
        {"mc": {"particles": 10}},
        {"mc": 7},
        {"sinogram": {"angles": 8}},
        {"sinogram": {"offsets": 8}},
        {"image_pixels": 8},
        {"sigma": [1, 2]},
    ]
    for overrides in bad:
        with pytest.raises(cli.ConfigError):
            cli.validate_config(smoke_config(**overrides))
    with pytest.raises(cli.ConfigError):
        cli.validate_config([1, 2, 3])


def test_load_config_digest_ignores_formatting(tmp_path):
    """The hash covers the parsed document, not the bytes on disk."""
    cfg = smoke_config()
    compact = write_config(tmp_path / "a.json", cfg)
    pretty = tmp_path / "b.json"
    pretty.write_text(json.dumps(dict(reversed(list(cfg.items()))), indent=3))
    _, da = cli.load_config(compact)
    _, db = cli.load_config(pretty)
    assert da == db
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    assert da == hashlib.sha256(canon).hexdigest()


def test_load_config_rejects_broken_json(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"dimension": 2,,}')
    with pytest.raises(cli.ConfigError):
        cli.load_config(p)


def test_main_returns_config_exit_code(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG
    bad = write_config(tmp_path / "bad.json", smoke_config(dimension=7))
    assert cli.main(["simulate", "--config", str(bad),
                     "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# simulate


def test_simulate_writes_measurement_set(kernel_run):
    cfg_path, cfg, data_dir = kernel_run
    for fname in ("traces.csv", "ballistic.csv", "meta.json"):
        assert (data_dir / fname).exists()
    _, digest = cli.load_config(cfg_path)
    ms = MeasurementSet.load(data_dir)
    assert ms.meta["config_sha256"] == digest
    assert ms.orders_present() == [1]
    n_pairs = cfg["boundary_nodes"] * cfg["sources"] - cfg["sources"]
    assert int(np.sum(ms.ballistic_amp > 0)) == n_pairs


def test_simulate_order_zero_keeps_only_ballistic(tmp_path):
    cfg_path = write_config(tmp_path / "exp.json", smoke_config())
    out = tmp_path / "data"
    assert cli.main(["simulate", "--config", str(cfg_path), "--out", str(out),
                     "--order", "0"]) == cli.EXIT_OK
    ms = MeasurementSet.load(out)
    assert ms.orders_present() == []
    assert np.any(ms.ballistic_amp > 0)


def test_simulate_rerun_is_byte_identical(tmp_path):
    cfg_path = write_config(tmp_path / "exp.json", smoke_config())
    outs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert cli.main(["simulate", "--config", str(cfg_path),
                         "--out", str(out)]) == cli.EXIT_OK
        outs.append(out)
    for fname in ("traces.csv", "ballistic.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_mc_thread_count_never_changes_results(tmp_path):
    """Identical traces from 1, 4, and 8 worker threads; a new seed differs."""
    cfg = smoke_config(method="mc", time_step=0.1,
                       mc={"particles": 20000, "batch_size": 5000})
    cfg_path = write_config(tmp_path / "mc.json", cfg)
    blobs = []
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        assert cli.main(["simulate", "--config", str(cfg_path), "--out", str(out),
                         "--threads", str(threads)]) == cli.EXIT_OK
        blobs.append((out / "traces.csv").read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]
    out = tmp_path / "reseeded"
    assert cli.main(["simulate", "--config", str(cfg_path), "--out", str(out),
                     "--seed", "99"]) == cli.EXIT_OK
    assert (out / "traces.csv").read_bytes() != blobs[0]


# ---------------------------------------------------------------------------
# reconstruct


def test_reconstruct_roundtrip_outputs(kernel_run, tmp_path):
    cfg_path, _, data_dir = kernel_run
    out = tmp_path / "out"
    assert cli.main(["reconstruct", "--config", str(cfg_path),
                     "--data", str(data_dir), "--out", str(out)]) == cli.EXIT_OK
    for fname in ("image_sigma.csv", "image_k0.csv", "sinogram_sigma.csv",
                  "sinogram_k0.csv", "report.json", "image_sigma.png",
                  "image_k0.png", "sinogram_sigma.png", "sinogram_k0.png"):
        assert (out / fname).exists(), fname
    report = json.loads((out / "report.json").read_text())
    _, digest = cli.load_config(cfg_path)
    assert report["config_sha256"] == digest
    assert report["data_config_sha256"] == digest
    for key in ("sigma_l2_disc09", "k0_l2_support"):
        assert np.isfinite(report["norms"][key])
    img = np.loadtxt(out / "image_sigma.csv", delimiter=",")
    assert img.shape == (16, 16)


def test_reconstruct_no_figures_flag(kernel_run, tmp_path):
    cfg_path, _, data_dir = kernel_run
    out = tmp_path / "bare"
    assert cli.main(["reconstruct", "--config", str(cfg_path),
                     "--data", str(data_dir), "--out", str(out),
                     "--no-figures"]) == cli.EXIT_OK
    assert (out / "report.json").exists()
    assert not list(out.glob("*.png"))


def test_reconstruct_refuses_foreign_config(kernel_run, tmp_path):
    """Data simulated under a different config is rejected unless overridden."""
    _, cfg, data_dir = kernel_run
    other = write_config(tmp_path / "other.json", smoke_config(seed=12))
    out = tmp_path / "out"
    assert cli.main(["reconstruct", "--config", str(other), "--data", str(data_dir),
                     "--out", str(out)]) == cli.EXIT_MISMATCH
    assert cli.main(["reconstruct", "--config", str(other), "--data", str(data_dir),
                     "--out", str(out), "--allow-hash-mismatch",
                     "--no-figures"]) == cli.EXIT_OK


def test_reconstruct_checks_grid_even_when_override_forced(kernel_run, tmp_path):
    _, _, data_dir = kernel_run
    resized = write_config(tmp_path / "resized.json", smoke_config(boundary_nodes=24))
    assert cli.main(["reconstruct", "--config", str(resized), "--data", str(data_dir),
                     "--out", str(tmp_path / "out"),
                     "--allow-hash-mismatch"]) == cli.EXIT_MISMATCH


def test_reconstruct_missing_data_exits_mismatch(kernel_run, tmp_path):
    cfg_path, _, _ = kernel_run
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["reconstruct", "--config", str(cfg_path), "--data", str(empty),
                     "--out", str(tmp_path / "out")]) == cli.EXIT_MISMATCH


def test_reconstruct_requires_ballistic_channel(kernel_run, tmp_path):
    cfg_path, _, data_dir = kernel_run
    hollow = tmp_path / "hollow"
    shutil.copytree(data_dir, hollow)
    bal = np.loadtxt(hollow / "ballistic.csv", delimiter=",", skiprows=1, ndmin=2)
    bal[:, 3] = 0.0
    np.savetxt(hollow / "ballistic.csv", bal, delimiter=",",
               fmt=["%d", "%d", "%.17g", "%.17g"],
               header="det_index,src_index,t0,amplitude", comments="")
    assert cli.main(["reconstruct", "--config", str(cfg_path), "--data", str(hollow),
                     "--out", str(tmp_path / "out")]) == cli.EXIT_MISMATCH


def test_reconstruct_ball_writes_chord_channels(tmp_path):
    """n=3 inverts per chord only: chords.csv + report.json, no images."""
    cfg = smoke_config(dimension=3, boundary_nodes=12, time_step=0.05, horizon=2.4,
                       sigma={"type": "constant", "value": 0.2},
                       k0={"type": "constant", "value": 0.4})
    cfg_path = write_config(tmp_path / "exp3.json", cfg)
    data_dir = tmp_path / "d3"
    out = tmp_path / "o3"
    assert cli.main(["simulate", "--config", str(cfg_path),
                     "--out", str(data_dir)]) == cli.EXIT_OK
    assert cli.main(["reconstruct", "--config", str(cfg_path), "--data", str(data_dir),
                     "--out", str(out)]) == cli.EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["chords.csv", "report.json"]
    rows = np.loadtxt(out / "chords.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape[1] == 7
    assert rows.shape[0] > 0
    report = json.loads((out / "report.json").read_text())
    assert report["dimension"] == 3
    assert report["n_chords"] == rows.shape[0]
    # constant sigma: every x_sigma sample should equal 0.2 * chord length
    t0, x_sigma = rows[:, 2], rows[:, 3]
    assert np.allclose(x_sigma, 0.2 * t0, rtol=1e-8)


# ---------------------------------------------------------------------------
# verify


def test_verify_quick_passes(tmp_path, capsys):
    report_path = tmp_path / "checks.json"
    assert cli.main(["verify", "--level", "quick",
                     "--out", str(report_path)]) == cli.EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["all_passed"] is True
    assert len(report["checks"]) >= 4
    lines = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("PASS") for line in lines) == len(report["checks"])


def test_verify_flags_tampered_kernel(tmp_path, monkeypatch):
    """A small systematic error in one closed form must fail the suite."""
    import tdtomo.kernels as kernels

    honest = kernels.n_kernel

    def crooked(tau, x, xp, mode="closed_form"):
        out = honest(tau, x, xp, mode=mode)
        return out * 1.0005 if mode == "closed_form" else out

    monkeypatch.setattr("tdtomo.kernels.n_kernel", crooked)
    report_path = tmp_path / "checks.json"
    assert cli.main(["verify", "--level", "quick",
                     "--out", str(report_path)]) == cli.EXIT_VERIFY
    report = json.loads(report_path.read_text())
    assert report["all_passed"] is False
