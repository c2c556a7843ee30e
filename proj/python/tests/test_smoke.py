import json
import math

import numpy as np
import pytest

import qkt

TINY = {
    "dataset": {"num_classes": 4, "dims": 4, "train_per_class": 200, "test_per_class": 40},
    "partition": {"num_clients": 4, "classes_per_client": 2},
    "model": {"hidden": [16, 8]},
    "local_training": {"max_epochs": 40, "patience": 5, "learning_rate": 0.01},
    "protocols": [{"method": "qkt", "epochs": 3}, "naive_kd", "local"],
    "seeds": [0],
    "save_checkpoints": False,
    "write_instrumentation": False,
}


def test_model_outputs_distributions():
    m = qkt.make_mlp(5, [7, 6], 3, seed=1)
    assert m.input_dim == 5 and m.num_classes == 3
    assert m.parameter_count == 5 * 7 + 7 + 7 * 6 + 6 + 6 * 3 + 3
    p = m.predict_proba(np.random.default_rng(0).normal(size=(9, 5)))
    assert p.shape == (9, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_make_mlp_is_deterministic():
    assert qkt.make_mlp(4, [8], 2, seed=3) == qkt.make_mlp(4, [8], 2, seed=3)
    assert not qkt.make_mlp(4, [8], 2, seed=3) == qkt.make_mlp(4, [8], 2, seed=4)


def test_checkpoint_round_trip(tmp_path):
    m = qkt.make_mlp(4, [8], 2, seed=3)
    m.save(tmp_path / "m.qktm")
    back = qkt.load_model(tmp_path / "m.qktm")
    assert back == m and back.digest() == m.digest()


def test_synthetic_shapes():
    xtr, ytr, xte, yte = qkt.generate_synthetic(num_classes=3, dims=5, train_per_class=10, test_per_class=4)
    assert xtr.shape == (30, 5) and xte.shape == (12, 5)
    assert sorted(set(ytr)) == [0, 1, 2]


def test_metric_examples():
    assert qkt.average_accuracy({0: 0.8, 1: 0.4, 2: 0.6}, {0: 75, 1: 25}, [2]) == pytest.approx(0.65, abs=1e-12)
    assert qkt.query_acc_gain({0: 0.0}, {0: 0.78}, [0]) == pytest.approx(0.78, abs=1e-12)
    assert qkt.forgetting({0: 0.9, 1: 0.8}, {0: 0.7, 1: 0.85}, [0, 1]) == pytest.approx(-0.10, abs=1e-12)
    assert qkt.uniform_accuracy({0: 0.5, 1: 1.0}) == pytest.approx(0.75, abs=1e-12)


def test_mask_and_probe():
    assert qkt.build_mask([2], [0, 2], 1.5, 4) == [1.0, 0.0, 1.5, 0.0]
    p = qkt.probe(qkt.make_mlp(4, [8], 3, seed=0), noise_batch=20, seed=1)
    assert len(p) == 3 and math.isclose(sum(p), 1.0, abs_tol=1e-12)


def test_config_errors_raise():
    with pytest.raises(qkt.ConfigError, match="/protocols"):
        qkt.config_hash(json.dumps({"protocols": []}))


def test_run_experiment_is_deterministic():
    rows, errors = qkt.run_experiment(json.dumps(TINY))
    again, _ = qkt.run_experiment(json.dumps(TINY))
    assert len(rows) + len(errors) == 3 * 4
    assert rows == again
    for r in rows:
        assert r["forgetting"] <= 0.0
        assert r["comm_rounds"] == (0 if r["protocol"] == "local" else 1)
