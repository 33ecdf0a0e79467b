import math

import numpy as np
import pytest

import choir


@pytest.fixture(scope="module")
def corpus():
    return choir.generate_corpus(classes=2, instances=8, points=128, seed=1)


def test_corpus_shape(corpus):
    assert len(corpus) == 16
    class_id, instance_id, points = corpus[0]
    assert class_id == "airplane"
    assert instance_id == "airplane_000"
    assert points.shape == (128, 3)
    np.testing.assert_allclose(points.mean(axis=0), 0.0, atol=1e-12)


def test_cloud_round_trip(tmp_path, corpus):
    points = corpus[3][2]
    for name in ("a.xyz", "a.cpts"):
        choir.save_cloud(tmp_path / name, points)
        np.testing.assert_array_equal(choir.load_cloud(tmp_path / name), points)


def test_missing_cloud_raises(tmp_path):
    with pytest.raises(choir.DataError):
        choir.load_cloud(tmp_path / "nope.xyz")


def test_rotations():
    r = choir.sample_rotation(3)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    mean, degenerate = choir.chordal_mean([r, r, r])
    assert not degenerate
    assert choir.angle_between(mean, r) < 1e-9
    noisy = choir.project_to_so3(r + 1e-3 * np.ones((3, 3)))
    assert choir.angle_between(noisy, r) < 1e-2
    assert choir.angle_between(np.eye(3), np.diag([1.0, -1.0, -1.0])) == pytest.approx(math.pi)


def test_predictor_is_equivariant(corpus):
    model = choir.Predictor.untrained(seed=2, knn_mode="frozen")
    points = corpus[5][2]
    r = choir.sample_rotation(9)
    f = model.predict(points)
    f_rotated = model.predict(points @ r)
    assert choir.angle_between(f_rotated, f @ r) < 1e-6
    canonical = model.canonicalize(points)
    np.testing.assert_allclose(canonical, points @ f.T, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, corpus):
    model = choir.Predictor.untrained(seed=4, use_residual=False)
    assert not model.use_residual
    model.save(tmp_path / "m.ckpt")
    loaded = choir.Predictor.load(tmp_path / "m.ckpt")
    assert loaded.parameter_count == model.parameter_count
    points = corpus[0][2]
    np.testing.assert_array_equal(loaded.predict(points), model.predict(points))


def test_evaluate(corpus):
    model = choir.Predictor.untrained(seed=0, knn_mode="frozen")
    report = choir.evaluate(model, corpus, rotations=3, seed=5)
    assert [c["class_id"] for c in report["classes"]] == ["airplane", "chair"]
    for c in report["classes"]:
        assert c["mean_stability_deg"] < 1e-3
        assert 0.0 <= c["consistency_deg"] <= 180.0
        assert len(c["instances"]) == 8
    assert report["metadata"]["rotations"] == "3"


def test_train_small(corpus):
    options = {
        "epochs": 2,
        "points": 64,
        "eval_rotations": 2,
        "eval_interval": 1,
        "widths": "4,8",
        "channels": 8,
        "k": 8,
        "residual_hidden": 8,
        "residual_k": 6,
        "patch_size": 8,
    }
    model, history = choir.train(corpus, options)
    assert [row["epoch"] for row in history] == [1, 2]
    assert sum(row["selected"] for row in history) == 1
    assert all(math.isfinite(row["loss"]) for row in history)
    assert model.predict(corpus[0][2]).shape == (3, 3)


def test_bad_option_is_rejected(corpus):
    with pytest.raises(Exception):
        choir.train(corpus, {"no_such_key": 1})


def test_selfcheck_small():
    checks = choir.selfcheck(trials=2, points=64, gradcheck_draws=1)
    assert checks
    assert all(c["passed"] for c in checks), [c for c in checks if not c["passed"]]
