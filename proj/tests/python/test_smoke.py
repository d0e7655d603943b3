import math

import numpy as np
import pytest

import nctta


def test_version():
    assert nctta.__version__


def test_softmax_and_entropy():
    p = nctta.softmax(np.array([1.0, 2.0, 3.0]))
    assert abs(sum(p) - 1.0) < 1e-12
    assert nctta.entropy(np.array([0.25] * 4)) == pytest.approx(math.log(4.0))
    big = nctta.softmax(np.array([1000.0, 0.0]))
    assert big[0] == pytest.approx(1.0)


def test_clusters_are_deterministic():
    a = nctta.make_clusters(3, 8, 10, 0.5, 42)
    b = nctta.make_clusters(3, 8, 10, 0.5, 42)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert a.meta["generator"].startswith("clusters-v1")
    assert len(a) == 30


def test_shift_keeps_labels():
    d = nctta.make_clusters(3, 8, 10, 0.5, 1)
    s = nctta.apply_shift(d, "gaussian_noise", 3, seed=5)
    assert np.array_equal(s.labels, d.labels)
    assert s.meta["severity"] == 3
    with pytest.raises(nctta.NcttaError):
        nctta.apply_shift(s, "mean_shift", 1)


def test_fca_identity():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 6))
    h = rng.normal(size=6)
    d = np.asarray(nctta.fca_distances(h, w))
    hn = h / np.linalg.norm(h)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    ref = np.linalg.norm(hn[None, :] - wn, axis=1)
    assert np.allclose(d, ref, atol=1e-12)
    assert (d >= 0).all() and (d <= 2).all()


def test_hybrid_target_blend():
    out = nctta.hybrid_target([0.0, 2.0], [0.9, 0.1], alpha=0.5, epsilon=1.0, k=1)
    assert out["y_tilde"][0] == pytest.approx(0.95)
    assert out["y_tilde"][1] == pytest.approx(0.5 * math.exp(-2.0) + 0.05)
    assert out["target_set"] == [0]


def test_train_adapt_roundtrip(tmp_path):
    full = nctta.make_clusters(3, 8, 90, 0.4, 3)
    train, test = nctta.split_per_class(full, 30)
    model = nctta.init_model(8, [16, 16], 3, seed=1)
    cfg = nctta.TrainConfig()
    cfg.epochs = 40
    cfg.post_zero_epochs = 10
    cfg.batch_size = 90
    trace = nctta.train_to_tpt(model, train, cfg)
    assert trace[-1]["train_accuracy"] == 1.0
    assert trace[-1]["mean_gfca"] < trace[0]["mean_gfca"]

    path = str(tmp_path / "model.ckpt")
    nctta.save_checkpoint(model, path)
    loaded = nctta.load_checkpoint(path)
    assert np.array_equal(loaded.classifier, model.classifier)
    assert nctta.evaluate_accuracy(loaded, test) == nctta.evaluate_accuracy(model, test)

    acfg = nctta.AdaptConfig()
    acfg.method = "nctta"
    acfg.k = 1
    acfg.lr = 0.05
    acfg.batch_size = 30
    log = nctta.run_scenario(loaded, test, scenario="mild", shift="gaussian_noise",
                             severity=2, config=acfg, seed=0)
    assert 0.0 <= log["stream_accuracy"] <= 1.0
    assert len(log["steps"]) == math.ceil(len(test) / 30)
    # adaptation never touches the classifier
    assert np.array_equal(loaded.classifier, model.classifier)


def test_ctta_segments():
    full = nctta.make_clusters(3, 8, 60, 0.4, 9)
    train, test = nctta.split_per_class(full, 20)
    model = nctta.init_model(8, [16], 3, seed=2)
    cfg = nctta.TrainConfig()
    cfg.epochs = 30
    cfg.post_zero_epochs = 5
    cfg.batch_size = 60
    nctta.train_to_tpt(model, train, cfg)
    acfg = nctta.AdaptConfig()
    acfg.k = 1
    acfg.batch_size = 40
    log = nctta.run_scenario(model, test, scenario="ctta", severities=[1, 2, 3],
                             config=acfg, seed=1)
    assert [s["severity"] for s in log["segments"]] == [1, 2, 3]


def test_forward_shapes():
    model = nctta.init_model(5, [8], 4, seed=3)
    x = np.zeros((6, 5))
    h, z, p = nctta.forward(model, x, mode="eval")
    assert h.shape == (6, 8)
    assert z.shape == (6, 4)
    assert p.shape == (6, 4)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
