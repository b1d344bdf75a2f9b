import numpy as np
import pytest

import splab


def test_schedule_endpoints():
    s = splab.NoiseSchedule.zero_terminal_snr()
    table = s.alpha_bar_table()
    assert s.timesteps == 1000
    assert table[-1] == 0.0
    assert np.all(np.diff(table) < 0)
    assert splab.timestep_grid(25)[0] == 1000


def test_v_round_trip():
    s = splab.NoiseSchedule.zero_terminal_snr()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 2)).astype(np.float32)
    eps = rng.standard_normal((4, 2)).astype(np.float32)
    t = [1, 250, 700, 1000]
    x_t = splab.forward_diffuse(x0, eps, t, s)
    v = splab.v_target(x0, eps, t, s)
    np.testing.assert_allclose(splab.v_to_x0(v, x_t, t, s), x0, atol=1e-5)
    np.testing.assert_allclose(splab.v_to_eps(v, x_t, t, s), eps, atol=1e-5)


def test_guidance_helpers():
    vc = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
    vu = np.zeros_like(vc)
    np.testing.assert_array_equal(splab.cfg_combine(vc, vu, 1.0), vc)
    guided = splab.cfg_combine(vc, vu, 3.0)
    np.testing.assert_array_equal(splab.cfg_rescale(guided, vc, 0.0), guided)


def test_dataset_and_metrics():
    points, labels = splab.generate_dataset("gauss_mixture_8", {"n": 256}, seed=1)
    assert points.shape == (256, 2)
    assert len(labels) == 256
    m = splab.compute_metrics(points[:128], points[128:])
    assert set(m) == {"energy_distance", "mmd_rbf", "nn_recall"}
    assert splab.energy_distance(points, points) == pytest.approx(0.0, abs=1e-9)
    mid = splab.mse_midpoint([points[0], points[1]])
    np.testing.assert_allclose(mid, (points[0] + points[1]) / 2, atol=1e-6)


def test_config_hash_and_errors():
    h = splab.config_hash("dataset = two_moons\n")
    assert len(h) == 16
    assert h == splab.config_hash("", {"dataset": "two_moons", "output_dir": "elsewhere"})
    with pytest.raises(splab.ConfigError):
        splab.config_hash("no_such_key = 1\n")


def test_tiny_experiment(tmp_path):
    overrides = {
        "output_dir": str(tmp_path),
        "model.hidden": 16,
        "mse.steps": 20,
        "sp.steps": 5,
        "mse.batch": 32,
        "sp.batch": 32,
        "eval.samples": 64,
        "heldout": 64,
        "sampler.steps": 5,
        "checkpoint_every": 0,
    }
    exp = splab.Experiment("dataset = gauss_mixture_8\n", overrides)
    assert len(exp.train_mse()) == 20
    assert len(exp.train_sp()) == 5
    rows = exp.evaluate()
    assert [r["model"] for r in rows] == ["mse", "sp"]
    assert all(r["config_hash"] == exp.hash for r in rows)
    model = exp.load_model("sp")
    x = np.zeros((3, 2), dtype=np.float32)
    v = model.forward(x, [10, 500, 1000], [0, -1, 3])
    assert v.shape == (3, 2) and np.all(np.isfinite(v))
    samples = model.sample([0, 1, 2, 3], steps=5, cfg_scale=2.0, rescale_phi=0.7)
    assert samples.shape == (4, 2)
