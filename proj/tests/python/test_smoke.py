import math

import numpy as np
import pytest

import prima


def random_tokens(rng, n, tokens, d):
    return rng.normal(size=(n, d)), [rng.normal(size=(tokens, d)) for _ in range(n)]


def test_uniform_fixed_points():
    n, length, k, d = 3, 4, 5, 6
    v = np.linspace(0.5, 2.5, d)
    img = (np.tile(v, (n, 1)), [np.tile(v, (k, 1)) for _ in range(n)])
    txt = (np.tile(v, (n, 1)), [np.tile(v, (length, 1)) for _ in range(n)])
    parts = prima.alignment_losses(img, img, txt)
    assert parts["img"] == pytest.approx(math.log(2 * n - 1), abs=1e-9)
    assert parts["glo"] == pytest.approx(math.log(n), abs=1e-9)
    assert parts["loc"] == pytest.approx(math.log(length), abs=1e-9)


def test_weighted_total_and_identity_soft_targets():
    rng = np.random.default_rng(0)
    n = 4
    parts = prima.alignment_losses(random_tokens(rng, n, 5, 8), random_tokens(rng, n, 5, 8),
                                   random_tokens(rng, n, 3, 8))
    manual = 0.2 * parts["img"] + 0.3 * parts["glo"] + 0.2 * parts["loc"] + 0.3 * parts["soft"]
    assert parts["total"] == pytest.approx(manual, abs=1e-12)
    assert n * parts["soft"] == pytest.approx(parts["glo"], abs=1e-10)


def test_soft_targets_rows():
    rng = np.random.default_rng(1)
    s = prima.soft_targets(rng.integers(0, 2, size=(6, 5)).astype(float), 0.5)
    assert s.shape == (6, 6)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    u = prima.soft_targets(np.ones((4, 3)), 0.5)
    np.testing.assert_allclose(u, 0.25, atol=1e-12)


def test_restricted_probabilities_ignore_outside_logits():
    vocab = prima.class_vocabulary(["a", "b", "c"], [1, 3, 5])
    z = np.random.default_rng(2).normal(size=8)
    p = prima.restricted_probabilities(z, vocab)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    z[[0, 2, 4, 6, 7]] += 10.0
    np.testing.assert_array_equal(prima.restricted_probabilities(z, vocab), p)


def test_metrics_and_errors():
    m = prima.metrics([0, 0, 1, 1], [0, 1, 1, 1], ["x", "y"])
    assert m["mean"]["accuracy"] == pytest.approx(75.0)
    with pytest.raises(prima.DomainError):
        prima.metrics([0], [0, 1], ["x", "y"])
    with pytest.raises(prima.ConfigError):
        prima.alignment_losses(*([random_tokens(np.random.default_rng(3), 2, 2, 4)] * 3), betas=(1, 2))


def test_gradcheck_passes_and_detects_corruption():
    assert all(r["passed"] for r in prima.gradcheck(instances=3))
    bad = {r["loss"]: r["passed"] for r in prima.gradcheck(instances=2, corrupt="L_img")}
    assert not bad["L_img"]


def test_tiny_training_run(tmp_path):
    prima.set_log_level("quiet")
    info = prima.generate_cohort(tmp_path / "data", patients=40, documents=10, seed=5)
    assert sum(info["classes"].values()) == 40
    overrides = [
        f'data.manifest="{info["manifest"]}"',
        f'data.corpus="{info["corpus"]}"',
        f'output_dir="{tmp_path / "run"}"',
        "folds=2", "stage1.epochs=1", "stage2.epochs=1", "stage3.epochs=1",
        "stage2.batch_size=8", "stage3.batch_size=8",
    ]
    report = prima.train("", overrides)
    assert report["classes"] == ["bcc", "scc", "ack"]
    assert 0.0 <= report["mean"]["macro_f1"] <= 100.0
    assert (tmp_path / "run" / "metrics.json").exists()
    assert prima.default_config()["stage1"]["epochs"] == 50
