import json

import numpy as np
import pytest

import cli
from errors import ConfigurationError, DataFileError
from operators import write_matrix_csv

SMALL_INTEGRAL = {
    "preset": "integral",
    "n": 40,
    "n_batches": 4,
    "epochs": 3,
    "n_seeds": 2,
    "schedule": {"kind": "constant", "mu0": 0.5},
}
SMALL_CT = {
    "preset": "ct",
    "n_batches": 4,
    "epochs": 2,
    "n_seeds": 2,
    "geometry": {"grid_side": 16, "n_angles": 4, "angle_step": 45.0, "n_detectors": 23},
}


def _write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


# ─── config ───────────────────────────────────────────────────────────────────
def test_preset_defaults():
    cfg = cli.config_from_dict({"preset": "integral"})
    assert (cfg.n, cfg.n_batches, cfg.epochs) == (1000, 100, 250)
    assert cfg.schedule == {"kind": "epoch_decay", "scale": "L_max"}
    ct = cli.config_from_dict({"preset": "ct"})
    assert ct.n_batches == 60
    assert ct.noise == {"kind": "gaussian", "sigma": 0.01}
    assert ct.row_count() == 60 * 95


def test_parse_config_file(tmp_path):
    cfg = cli.parse_config(_write_config(tmp_path, {**SMALL_INTEGRAL, "r_x": 1.5}))
    assert cfg.x_space().r == 1.5
    assert cfg.row_count() == 40
    schedule = cfg.step_schedule()
    assert schedule.kind == "constant" and schedule.mu0 == 0.5


@pytest.mark.parametrize(
    "scale, expected",
    [(0.3, (0.3, False)), ("L_max", (1.0, True)), ("L_max/4", (0.25, True))],
)
def test_schedule_scale(scale, expected):
    assert cli._parse_scale(scale) == expected


def test_bad_schedule_scale():
    with pytest.raises(ConfigurationError):
        cli._parse_scale("twice L_max")


def test_non_smooth_space_rejected():
    with pytest.raises(ConfigurationError, match="smooth"):
        cli.config_from_dict({**SMALL_INTEGRAL, "r_x": 1.0})


def test_batch_count_must_divide_rows():
    with pytest.raises(ConfigurationError, match="divide"):
        cli.config_from_dict({**SMALL_INTEGRAL, "n_batches": 7})


@pytest.mark.parametrize("data", [{"epochz": 3}, {"noise": {"kind": "gaussian", "sgima": 0.1}}])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigurationError, match="unknown"):
        cli.config_from_dict({**SMALL_INTEGRAL, **data})


def test_json_syntax_error_has_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "preset": "integral",\n  "n": 40,,\n}')
    with pytest.raises(ConfigurationError, match=r"broken\.json:3:"):
        cli.parse_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(DataFileError):
        cli.parse_config(tmp_path / "nope.json")


def test_overrides():
    cfg = cli.config_from_dict(SMALL_INTEGRAL, ["seed=7", "noise.kind=gaussian", "noise.sigma=0.01", "method=landweber"])
    assert cfg.seed == 7
    assert cfg.method == "landweber"
    assert cfg.noise_spec().sigma == 0.01
    with pytest.raises(ConfigurationError):
        cli.config_from_dict(SMALL_INTEGRAL, ["no-equals-sign"])


def test_a_priori_stopping_needs_noise():
    cfg = cli.config_from_dict({**SMALL_INTEGRAL, "stopping": {"kind": "a_priori"}})
    with pytest.raises(ConfigurationError):
        cfg.stopping_rule(0.0)
    assert cfg.stopping_rule(0.01).kind == "a_priori"


def test_custom_preset_needs_files():
    with pytest.raises(ConfigurationError):
        cli.config_from_dict({"preset": "custom"})


# ─── experiments ──────────────────────────────────────────────────────────────
def test_integral_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["solve", str(_write_config(tmp_path, SMALL_INTEGRAL)), "--out-dir", str(out)])
    assert code == 0
    for name in ("trace_seed0.csv", "trace_seed1.csv", "ensemble_mean.csv", "reconstruction.csv",
                 "convergence.svg", "manifest.json"):
        assert (out / name).exists(), name
    trace = np.loadtxt(out / "trace_seed0.csv", delimiter=",", skiprows=1)
    assert trace.shape == (4, 7)
    assert np.array_equal(trace[:, 0], [0, 1, 2, 3])
    assert trace[0, -1] == 0.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert manifest["failed_seeds"] == []
    assert "Philox" in manifest["rng"]
    assert "✅" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    config = _write_config(tmp_path, SMALL_INTEGRAL)
    for name in ("a", "b"):
        assert cli.main(["solve", str(config), "--out-dir", str(tmp_path / name)]) == 0
    for name in ("trace_seed0.csv", "trace_seed1.csv", "ensemble_mean.csv", "reconstruction.csv", "convergence.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_single_seed_writes_no_ensemble(tmp_path, capsys):
    out = tmp_path / "out"
    config = _write_config(tmp_path, SMALL_INTEGRAL)
    assert cli.main(["solve", str(config), "--seeds", "1", "--seed", "5", "--out-dir", str(out)]) == 0
    assert (out / "trace_seed5.csv").exists()
    assert not (out / "ensemble_mean.csv").exists()
    assert "⚠️" in capsys.readouterr().out


def test_ct_run_writes_image(tmp_path):
    out = tmp_path / "ct"
    assert cli.main(["solve", str(_write_config(tmp_path, SMALL_CT)), "--out-dir", str(out)]) == 0
    data = (out / "reconstruction.pgm").read_bytes()
    assert data.startswith(b"P5\n16 16\n255\n")
    assert len(data) == len(b"P5\n16 16\n255\n") + 256
    assert np.loadtxt(out / "reconstruction.csv").shape == (256,)


def test_custom_preset(tmp_path):
    a = np.eye(4) + 0.1
    write_matrix_csv(tmp_path / "a.csv", a)
    write_matrix_csv(tmp_path / "x.csv", [1.0, 0.0, -1.0, 2.0])
    data = {
        "preset": "custom",
        "matrix": str(tmp_path / "a.csv"),
        "signal": str(tmp_path / "x.csv"),
        "n_batches": 2,
        "epochs": 50,
        "n_seeds": 2,
        "schedule": {"kind": "constant", "mu0": 0.5},
    }
    out = tmp_path / "out"
    assert cli.main(["solve", str(_write_config(tmp_path, data)), "--out-dir", str(out)]) == 0
    trace = np.loadtxt(out / "trace_seed0.csv", delimiter=",", skiprows=1)
    assert trace[-1, 1] < trace[0, 1]


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BANACH_SGD_OUT_DIR", str(tmp_path / "env"))
    assert cli.main(["solve", str(_write_config(tmp_path, SMALL_INTEGRAL))]) == 0
    assert (tmp_path / "env" / "manifest.json").exists()


def test_invalid_config_exit_code(tmp_path, capsys):
    config = _write_config(tmp_path, {**SMALL_INTEGRAL, "r_x": 1.0})
    assert cli.main(["solve", str(config), "--out-dir", str(tmp_path / "out")]) == 1
    assert "❌" in capsys.readouterr().out
    assert not (tmp_path / "out").exists()


def test_diverging_run_fails_every_seed_cleanly(tmp_path, capsys):
    data = {**SMALL_INTEGRAL, "epochs": 400, "schedule": {"kind": "constant", "mu0": 1e6}}
    out = tmp_path / "out"
    assert cli.main(["solve", str(_write_config(tmp_path, data)), "--out-dir", str(out)]) == 2
    printed = capsys.readouterr().out
    assert "❌ seed 0" in printed and "❌ seed 1" in printed
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failed_seeds"] == [0, 1]
    assert not (out / "trace_seed0.csv").exists()


# ─── phantom noise ────────────────────────────────────────────────────────────
NOISY_PHANTOM = {**SMALL_CT, "phantom_noise": 0.1, "noise": {"kind": "gaussian", "sigma": 0.01, "seed": 0}}


def test_phantom_and_sinogram_noise_use_distinct_streams():
    cfg = cli.config_from_dict(NOISY_PHANTOM)
    phantom_spec = cfg.phantom_noise_spec()
    assert phantom_spec.seed != cfg.noise_spec().seed
    assert phantom_spec.sigma == 0.1
    problem = cli.build_problem(cfg)
    measured = cli.corrupt(problem.x_true, phantom_spec)[0]
    np.testing.assert_allclose(problem.y_clean, problem.matrix @ measured, rtol=1e-12, atol=1e-12)
    phantom_draws = (measured - problem.x_true) / 0.1
    sinogram_draws = (cli.corrupt(problem.y_clean, cfg.noise_spec())[0] - problem.y_clean) / 0.01
    overlap = min(phantom_draws.size, sinogram_draws.size)
    assert np.max(np.abs(phantom_draws[:overlap] - sinogram_draws[:overlap])) > 0.1


def test_phantom_stream_is_reproducible():
    first = cli.config_from_dict(NOISY_PHANTOM).phantom_noise_spec().seed
    assert cli.config_from_dict(NOISY_PHANTOM).phantom_noise_spec().seed == first
    other = cli.config_from_dict({**NOISY_PHANTOM, "noise": {"kind": "gaussian", "sigma": 0.01, "seed": 1}})
    assert other.phantom_noise_spec().seed != first


def test_explicit_phantom_seed():
    cfg = cli.config_from_dict({**NOISY_PHANTOM, "phantom_seed": 7})
    assert cfg.phantom_noise_spec().seed == 7
    with pytest.raises(ConfigurationError, match="phantom_seed"):
        cli.config_from_dict({**NOISY_PHANTOM, "phantom_seed": 0})


# ─── norm estimate ────────────────────────────────────────────────────────────
def test_norm_estimate_command(tmp_path, capsys):
    path = tmp_path / "a.csv"
    write_matrix_csv(path, np.diag([3.0, 1.0]))
    assert cli.main(["norm-estimate", str(path), "--rx", "2", "--ry", "2"]) == 0
    assert "= 3.0000000000" in capsys.readouterr().out


def test_norm_estimate_reports_cap(tmp_path, capsys):
    path = tmp_path / "a.csv"
    write_matrix_csv(path, np.diag([3.0, 1.0]))
    assert cli.main(["norm-estimate", str(path), "--max-iter", "1"]) == 0
    assert "not converged" in capsys.readouterr().out


def test_norm_estimate_malformed_matrix(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("1,2\n3,oops\n")
    assert cli.main(["norm-estimate", str(path)]) == 3
