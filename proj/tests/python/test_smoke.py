import math

import numpy as np
import pytest

import twotower as tt

SMALL = {"synth_users": 200, "synth_items": 300, "synth_clusters": 5, "synth_per_user": 20, "seed": 3}
FAST = {"max_iters": 40, "eval_every": 20, "batch_size": 32, "dim": 8, "hidden": 16, "bank_size": 64, "warmup": 5}


def test_corrected_logit():
    assert tt.corrected_logit([0.5], [1.0], 0.25) == pytest.approx(1.886294, abs=1e-6)
    with pytest.raises(ValueError):
        tt.corrected_logit([1.0], [1.0], 0.0)


def test_metrics():
    assert tt.ndcg_at_k([9, 1], [1], 2) == pytest.approx(0.6309, abs=1e-4)
    assert tt.recall_at_k([1, 5, 2], [1, 2, 3], 3) == pytest.approx(2 / 3)
    assert tt.recall_at_k([1, 2], [], 2) is None


def test_topk_matches_argsort():
    rng = np.random.default_rng(0)
    items = rng.normal(size=(50, 4))
    u = rng.normal(size=4)
    want = list(np.argsort(-(items @ u), kind="stable")[:10])
    assert tt.topk_retrieve(list(u), items, 10) == want


def test_all_items_softmax_equals_oracle():
    rng = np.random.default_rng(1)
    items = rng.normal(size=(20, 4))
    users = rng.normal(size=(5, 4))
    pos = list(rng.integers(0, 20, size=5))
    assert tt.all_items_sampled_softmax(users, items, pos) == pytest.approx(
        tt.full_softmax_oracle(users, items, pos), abs=1e-10
    )


def test_feature_drift():
    a = np.zeros((3, 5))
    b = a.copy()
    b[1, :2] = [3.0, 4.0]
    assert tt.feature_drift(b, a) == 5.0


def test_train_evaluate_and_checkpoint(tmp_path):
    ds = tt.Dataset.synthetic(SMALL)
    assert ds.n_items == 300
    report, model = tt.train(ds, FAST)
    assert report["strategy"] == "cbns"
    assert report["iterations"] == 40
    assert len(report["records"]) == 2
    assert all(math.isfinite(x) for x in report["losses"])
    again, _ = tt.train(ds, FAST)
    assert again["losses"] == report["losses"]
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = tt.Model.load(path)
    assert np.array_equal(loaded.item_vectors([0, 1, 2]), model.item_vectors([0, 1, 2]))
    metrics = tt.evaluate(loaded, ds, "test")
    assert 0.0 <= metrics["recall@50"] <= 1.0


def test_config_errors():
    ds = tt.Dataset.synthetic(SMALL)
    with pytest.raises(tt.ConfigError):
        tt.train(ds, {"l2": 0.5})
    with pytest.raises(tt.ConfigError):
        tt.train(ds, {"strategy": "cbns", "bank_size": 16, "batch_size": 32})
    with pytest.raises(tt.ConfigError):
        tt.train(ds, {"not_a_key": 1})
    assert tt.settings_defaults()["bank_size"] == "2432"
