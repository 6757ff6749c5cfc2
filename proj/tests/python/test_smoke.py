import math

import numpy as np
import pytest

import cssl


def test_closed_form_matches_pair_sum():
    for b in (2, 5, 64):
        for p in (0.0, 0.3, 0.9, 1.0):
            direct = sum(p ** (j - i) for i in range(b) for j in range(i + 1, b)) / (b * (b - 1) / 2)
            assert cssl.correlation_likelihood(b, p) == pytest.approx(direct, abs=1e-12)
            assert cssl.correlation_likelihood_exact(b, p) == pytest.approx(direct, abs=1e-12)


def test_monte_carlo_and_fifo_reduction():
    est, sigma = cssl.correlation_likelihood_monte_carlo(16, 0.7, trials=20000, seed=3)
    assert abs(est - cssl.correlation_likelihood(16, 0.7)) < 4 * sigma
    ratio, approx = cssl.fifo_reduction(256, 4096, 0.5)
    assert ratio < 1.0
    assert approx == 1 / 16
    assert abs(ratio / approx - 1) < 0.1


def test_domain_errors():
    with pytest.raises(ValueError):
        cssl.correlation_likelihood(1, 0.5)
    with pytest.raises(ValueError):
        cssl.correlation_likelihood(4, 1.5)


def test_segment_stream_shape_and_runs():
    s = cssl.generate_stream("segment", num_classes=4, dim=8, seed=1, n_seq=16, num_segments=5)
    assert s["payload"].shape == (80, 8)
    assert list(s["id"]) == list(range(80))
    assert len(set(s["source"].tolist())) == 5
    assert cssl.batch_correlation(s["source"][:16].tolist()) == 1.0


def test_replay_buffer_fifo_and_minred():
    buf = cssl.ReplayBuffer(3, "fifo")
    buf.add(np.zeros((3, 2)), [0, 1, 2], [0, 1, 2])
    assert buf.add(np.zeros((1, 2)), [3], [3]) == [0]
    assert buf.ids() == [1, 2, 3]

    mr = cssl.ReplayBuffer(3, "minred")
    mr.add(np.zeros((3, 2)), [0, 1, 2], [0, 1, 2])
    mr.track_features([0, 1, 2], np.array([[1.0, 0.0], [0.99, 0.14], [0.0, 1.0]]))
    assert mr.initialized_count == 3
    assert mr.add(np.zeros((1, 2)), [3], [3]) == [0]
    with pytest.raises(RuntimeError):
        mr.sample_ids(5)


def test_simsiam_loss_bounds():
    z = np.array([1.0, 2.0, 3.0])
    eye = np.eye(3)
    assert cssl.simsiam_loss(z, z, eye, np.zeros(3)) == pytest.approx(-2.0)
    assert cssl.simsiam_loss(z, -z, eye, np.zeros(3)) == pytest.approx(2.0)


CONFIG = {
    "name": "py-smoke",
    "kind": "efficiency",
    "seeds": [0],
    "data": {"num_classes": 4, "dim": 8},
    "stream": {"type": "iid", "length": 192},
    "methods": [
        {"name": "conventional", "mode": "conventional"},
        {"name": "fifo", "mode": "buffered", "buffer": {"capacity": 64}},
    ],
    "learner": {"hidden": 16, "embedding": 8, "batch_size": 16},
    "bandwidth": {"t_data": 4, "t_opt": 1, "k": 4},
    "evaluation": {"probe_train_per_class": 10, "probe_test_per_class": 10},
}


def test_validate_reports_fields():
    assert cssl.validate_config(CONFIG) == []
    bad = dict(CONFIG, learner={"batch_size": 1})
    fields = [f for f, _ in cssl.validate_config(bad)]
    assert "learner.batch_size" in fields
    resolved = cssl.resolve_config(CONFIG)
    assert resolved["learner"]["optimizer"]["momentum"] == 0.9


def test_run_experiment_in_memory():
    r = cssl.run_experiment(CONFIG)
    assert "output_dir" not in r
    assert [run["method"] for run in r["runs"]] == ["conventional", "fifo"]
    for run in r["runs"]:
        assert run["completed"]
        assert run["single_pass"]
        assert 0.0 <= run["final_accuracy"] <= 1.0
    assert r["runs"][1]["effective_hyper_sampling"] == 4.0


def test_run_and_compare_on_disk(tmp_path):
    cfg = dict(CONFIG, output_dir=str(tmp_path))
    r = cssl.run_experiment(cfg, write_outputs=True)
    summary = cssl.compare_runs([r["output_dir"]])
    assert len(summary["runs"]) == 2
    assert not math.isnan(summary["runs"][0]["final_accuracy"])
